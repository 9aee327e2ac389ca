//! Recurrent network training with adaptively truncated backpropagation
//! through time.
//!
//! The crate measures how fast backpropagated gradient norms decay with lag,
//! turns that decay into a bound on the relative bias of truncated gradients,
//! and picks the shortest truncation that keeps the bound under a tolerance.
//! Fixed-truncation training and a biased-SGD testbed sit alongside it.

pub mod backprop;
pub mod cells;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod tasks;
pub mod trainer;
pub mod truncation;

pub use backprop::{bptt, grad_norm_profile, GradAccumulator, GradNormProfile};
pub use error::{Error, Result};
pub use model::{Architecture, CellKind, HiddenStates, ModelParams, TokenWindow};
pub use rng::SeededRng;
pub use trainer::{TrainConfig, TruncationMode};
