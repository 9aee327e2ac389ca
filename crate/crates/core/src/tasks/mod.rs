//! Synthetic data, evaluation metrics and the biased-gradient testbed.

pub mod copy;
pub mod testbed;

pub use copy::{gen_copy, CopyConfig, LabeledSequence};
pub use testbed::{BiasedLossOracle, CosineBowl};

use crate::error::{Error, Result};

/// `exp(mean per-token loss)`.
pub fn perplexity(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::invalid("perplexity of an empty loss sequence"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("loss passed to perplexity".into()));
    }
    Ok((losses.iter().sum::<f64>() / losses.len() as f64).exp())
}
