//! Experiment specs and the runner behind the `tbptt` binary.
//!
//! A spec is a TOML file; every section and key is optional except `task`.
//!
//! ```toml
//! task = "copy-fixed"
//! seed = 1
//!
//! [train]
//! mode = "fixed"
//! k = 15
//! epochs = 25
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backprop::GradNormProfile;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::rng::SeededRng;
use crate::tasks::copy::{gen_copy, CopyConfig};
use crate::tasks::testbed::{optimal_bound, optimal_stepsize, run_biased_sgd, BiasedLossOracle, CosineBowl};
use crate::trainer::{
    adapt_truncation, train, EpochStats, Schedule, ScheduleKind, Split, TrainConfig, TrainEvent,
    TruncationMode,
};
use crate::truncation::BetaEstimator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    CopyFixed,
    CopyVariable,
    SgdTestbed,
    ProfileOnly,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::CopyFixed => "copy-fixed",
            Task::CopyVariable => "copy-variable",
            Task::SgdTestbed => "sgd-testbed",
            Task::ProfileOnly => "profile-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Adaptive,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: ModeName,
    pub delta: f64,
    pub k: usize,
    pub gamma: f64,
    pub schedule: ScheduleKind,
    pub batch_size: usize,
    pub window: usize,
    pub k0: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub epochs: usize,
    pub adapt_every: usize,
    pub estimator: BetaEstimator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_hat: Option<usize>,
    pub diagnostics: bool,
    pub embedding: usize,
    pub hidden: Vec<usize>,
    /// Uniform half-width for every weight; absent uses fan-scaled defaults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    /// Record wallclock seconds; off gives byte-reproducible epoch CSVs.
    pub timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: ModeName::Adaptive,
            delta: 0.9,
            k: t.k0,
            gamma: t.gamma,
            schedule: t.schedule,
            batch_size: t.batch_size,
            window: t.window,
            k0: t.k0,
            k_min: t.k_min,
            k_max: t.k_max,
            epochs: t.epochs,
            adapt_every: t.adapt_every,
            estimator: t.estimator,
            tau_hat: None,
            diagnostics: false,
            embedding: 6,
            hidden: vec![50, 50],
            init_scale: None,
            timing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopySection {
    pub data_symbols: usize,
    /// Memory length of `copy-fixed`.
    pub m: usize,
    /// Memory range of `copy-variable`.
    pub m_low: usize,
    pub m_high: usize,
    pub train_len: usize,
    pub valid_len: usize,
    pub test_len: usize,
}

impl Default for CopySection {
    fn default() -> Self {
        Self {
            data_symbols: 6,
            m: 10,
            m_low: 5,
            m_high: 10,
            train_len: 256_000,
            valid_len: 64_000,
            test_len: 64_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSection {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub steps: usize,
    pub deltas: Vec<f64>,
    pub seeds: usize,
    /// Initial coordinates are uniform on `[−init_range, init_range]`.
    pub init_range: f64,
    /// `None` uses the optimal constant stepsize for each run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub schedule: ScheduleKind,
}

impl Default for TestbedSection {
    fn default() -> Self {
        Self {
            dim: 20,
            a: 0.5,
            b: 1.2,
            sigma: 1.0,
            steps: 10_000,
            deltas: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            seeds: 20,
            init_range: 3.0,
            gamma: None,
            schedule: ScheduleKind::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: Task,
    /// At most `2^63 − 1`, the largest TOML integer.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Model to profile in `profile-only`; freshly initialised when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub copy: CopySection,
    #[serde(default)]
    pub testbed: TestbedSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/out")
}

impl ExperimentSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            seed: 0,
            out: default_out(),
            checkpoint: None,
            train: TrainSection::default(),
            copy: CopySection::default(),
            testbed: TestbedSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: match t.mode {
                ModeName::Adaptive => TruncationMode::Adaptive { delta: t.delta },
                ModeName::Fixed => TruncationMode::Fixed { k: t.k },
            },
            gamma: t.gamma,
            schedule: t.schedule,
            batch_size: t.batch_size,
            window: t.window,
            k0: t.k0,
            k_min: t.k_min,
            k_max: t.k_max,
            epochs: t.epochs,
            adapt_every: t.adapt_every,
            estimator: t.estimator,
            tau_hat: t.tau_hat,
            diagnostics: t.diagnostics,
            seed: self.seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::lstm(self.copy.data_symbols + 2, self.train.embedding, &self.train.hidden)
    }

    /// Copy configs for the train, validation and test splits.
    pub fn copy_configs(&self) -> [CopyConfig; 3] {
        let c = &self.copy;
        let (lo, hi) = match self.task {
            Task::CopyVariable => (c.m_low, c.m_high),
            _ => (c.m, c.m),
        };
        let master = SeededRng::new(self.seed);
        let make = |len, tag| CopyConfig {
            data_symbols: c.data_symbols,
            m_low: lo,
            m_high: hi,
            length: len,
            seed: master.derive(tag).next_u64(),
        };
        [make(c.train_len, 10), make(c.valid_len, 11), make(c.test_len, 12)]
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.delta > 0.0 && t.delta < 1.0) {
            return Err(Error::config(format!("train.delta must lie in (0,1), got {}", t.delta)));
        }
        if t.hidden.is_empty() || t.hidden.contains(&0) || t.embedding == 0 {
            return Err(Error::config("train.hidden and train.embedding must be positive"));
        }
        if t.init_scale.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::config("train.init_scale must be nonnegative"));
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::config(format!("[train] {e}")))?;
        match self.task {
            Task::SgdTestbed => {
                let b = &self.testbed;
                CosineBowl::new(b.dim, b.a, b.b).map_err(|e| Error::config(format!("[testbed] {e}")))?;
                if b.deltas.iter().any(|d| !(0.0..1.0).contains(d)) {
                    return Err(Error::config("testbed.deltas must lie in [0,1)"));
                }
                if b.steps == 0 || b.seeds == 0 || !(b.sigma > 0.0) {
                    return Err(Error::config("testbed.steps, seeds and sigma must be positive"));
                }
            }
            _ => {
                for c in self.copy_configs() {
                    c.validate().map_err(|e| Error::config(format!("[copy] {e}")))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub mode: String,
    #[serde(rename = "delta_or_K")]
    pub delta_or_k: Option<f64>,
    pub best_valid_ppl: Option<f64>,
    pub test_ppl_at_best: Option<f64>,
    pub epochs_run: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct EpochRow<'a> {
    epoch: usize,
    mode: &'a str,
    #[serde(rename = "K_n")]
    k_n: usize,
    beta_hat: Option<f64>,
    #[serde(rename = "delta_hat_at_Kn")]
    delta_hat_at_kn: Option<f64>,
    train_loss: f64,
    valid_ppl: f64,
    test_ppl: f64,
    wallclock_s: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let path = dir.join("summary.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Runs an experiment, writing artifacts under `spec.out`.
pub fn run(spec: &ExperimentSpec) -> Result<Summary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    std::fs::write(spec.out.join("spec.toml"), spec.to_toml()?)
        .map_err(|e| Error::io(spec.out.join("spec.toml"), e))?;
    match spec.task {
        Task::CopyFixed | Task::CopyVariable => run_copy(spec),
        Task::ProfileOnly => run_profile(spec),
        Task::SgdTestbed => run_testbed(spec),
    }
}

/// The initial model of a training run.
pub fn init_model(spec: &ExperimentSpec) -> Result<ModelParams> {
    let mut rng = SeededRng::new(spec.seed).derive(1);
    match spec.train.init_scale {
        Some(scale) => ModelParams::init_with_scale(&spec.architecture(), &mut rng, scale),
        None => ModelParams::init(&spec.architecture(), &mut rng),
    }
}

fn run_copy(spec: &ExperimentSpec) -> Result<Summary> {
    let cfg = spec.train_config();
    let [tc, vc, ec] = spec.copy_configs();
    let (tr, va, te) = (gen_copy(&tc)?, gen_copy(&vc)?, gen_copy(&ec)?);
    let model = init_model(spec)?;
    let dir = &spec.out;
    let csv_path = dir.join("epochs.csv");
    let mut epochs_csv = csv::Writer::from_writer(create(&csv_path)?);
    let timing = spec.train.timing;
    let mut epochs_run = 0;
    let result = train(
        &cfg,
        model,
        Split { inputs: &tr.inputs, targets: &tr.targets },
        Split { inputs: &va.inputs, targets: &va.targets },
        Split { inputs: &te.inputs, targets: &te.targets },
        |event| match event {
            TrainEvent::Profiled { epoch, profile, adaptation } => {
                profile.save_csv(&dir.join(format!("profile_epoch{epoch:03}.csv")))?;
                adaptation
                    .table
                    .save_csv(&dir.join(format!("bias_bounds_epoch{epoch:03}.csv")))
            }
            TrainEvent::Epoch(s) => {
                epochs_run = s.epoch;
                epochs_csv.serialize(epoch_row(s, timing))?;
                epochs_csv.flush().map_err(|e| Error::io(&csv_path, e))
            }
        },
    );
    drop(epochs_csv);
    let mode = cfg.mode.name().to_string();
    let delta_or_k = Some(match cfg.mode {
        TruncationMode::Adaptive { delta } => delta,
        TruncationMode::Fixed { k } => k as f64,
    });
    let mut summary = Summary {
        task: spec.task.name().into(),
        mode,
        delta_or_k,
        best_valid_ppl: None,
        test_ppl_at_best: None,
        epochs_run,
        seed: spec.seed,
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            write_summary(dir, &summary)?;
            return Err(e);
        }
    };
    checkpoint::save(&report.final_model, &dir.join("final.ckpt"))?;
    checkpoint::save(&report.best_model, &dir.join("best.ckpt"))?;
    summary.best_valid_ppl = Some(report.best_valid_ppl);
    summary.test_ppl_at_best = Some(report.test_ppl_at_best);
    write_summary(dir, &summary)?;
    Ok(summary)
}

fn epoch_row(s: &EpochStats, timing: bool) -> EpochRow<'_> {
    EpochRow {
        epoch: s.epoch,
        mode: s.mode,
        k_n: s.k,
        beta_hat: s.beta_hat,
        delta_hat_at_kn: s.delta_hat_at_k,
        train_loss: s.train_loss,
        valid_ppl: s.valid_ppl,
        test_ppl: s.test_ppl,
        wallclock_s: if timing { s.wallclock_s } else { 0.0 },
    }
}

fn run_profile(spec: &ExperimentSpec) -> Result<Summary> {
    let cfg = spec.train_config();
    let model = match &spec.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => init_model(spec)?,
    };
    let [tc, _, _] = spec.copy_configs();
    let data = gen_copy(&tc)?;
    let delta = spec.train.delta;
    let mut rng = SeededRng::new(spec.seed).derive(2);
    let (profile, adaptation): (GradNormProfile, _) =
        adapt_truncation(&model, &data.inputs, &data.targets, &cfg, delta, &mut rng)?;
    profile.save_csv(&spec.out.join("profile.csv"))?;
    adaptation.table.save_csv(&spec.out.join("bias_bounds.csv"))?;
    let summary = Summary {
        task: spec.task.name().into(),
        mode: "adaptive".into(),
        delta_or_k: Some(delta),
        best_valid_ppl: None,
        test_ppl_at_best: None,
        epochs_run: 0,
        seed: spec.seed,
    };
    write_summary(&spec.out, &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct TestbedRow {
    delta: f64,
    seed: u64,
    gamma: f64,
    d_l: f64,
    min_grad_sq: f64,
    bound: f64,
    above_cap: bool,
}

fn run_testbed(spec: &ExperimentSpec) -> Result<Summary> {
    let tb = &spec.testbed;
    let bowl = CosineBowl::new(tb.dim, tb.a, tb.b)?;
    let path = spec.out.join("testbed.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let master = SeededRng::new(spec.seed);
    let mut violations = 0;
    for (di, &delta) in tb.deltas.iter().enumerate() {
        for s in 0..tb.seeds as u64 {
            let mut rng = master.derive(1000 * di as u64 + s);
            let theta0: Vec<f64> = (0..tb.dim)
                .map(|_| rng.uniform(-tb.init_range, tb.init_range))
                .collect();
            let seed = rng.next_u64();
            let mut oracle = BiasedLossOracle::new(bowl, delta, tb.sigma, seed)?;
            let d_l = bowl.loss(&theta0) - bowl.min_loss();
            let l = bowl.lipschitz();
            let gamma = tb
                .gamma
                .unwrap_or_else(|| optimal_stepsize(d_l, l, oracle.variance(), tb.steps));
            let run = run_biased_sgd(&mut oracle, &theta0, Schedule::new(tb.schedule, gamma), tb.steps)?;
            let bound = match (tb.gamma, tb.schedule) {
                (None, ScheduleKind::Constant) => optimal_bound(delta, d_l, l, oracle.variance(), tb.steps),
                _ => run.bound,
            };
            violations += usize::from(run.min_grad_sq > bound);
            w.serialize(TestbedRow {
                delta,
                seed: s,
                gamma,
                d_l,
                min_grad_sq: run.min_grad_sq,
                bound,
                above_cap: run.above_cap,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if violations > 0 {
        log::warn!("{violations} testbed runs exceeded their bound");
    }
    let summary = Summary {
        task: spec.task.name().into(),
        mode: "biased-sgd".into(),
        delta_or_k: None,
        best_valid_ppl: None,
        test_ppl_at_best: None,
        epochs_run: 0,
        seed: spec.seed,
    };
    write_summary(&spec.out, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_spec_gets_defaults() {
        let s = ExperimentSpec::from_toml("task = \"copy-fixed\"\nseed = 4\n").unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.train, TrainSection::default());
        assert_eq!(s.copy.m, 10);
        assert_eq!(s.copy.data_symbols, 6);
        assert_eq!(s.train.hidden, vec![50, 50]);
        let cfg = s.train_config();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!((cfg.window, cfg.k0, cfg.k_min, cfg.k_max), (100, 15, 2, 100));
    }

    #[test]
    fn bad_specs_are_rejected() {
        let err = ExperimentSpec::from_toml("task = \"copy-fixed\"\n[train]\ndelta = 1.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("delta"), "{err}");
        assert!(ExperimentSpec::from_toml("task = \"copy-fixed\"\nbogus = 1\n").is_err());
        assert!(ExperimentSpec::from_toml("seed = 1\n").is_err());
        let err = ExperimentSpec::from_toml("task = \"copy-fixed\"\n[train]\nepochs = \"x\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    proptest! {
        #[test]
        fn toml_roundtrip(seed in 0..=i64::MAX as u64, delta in 0.01f64..0.99, k in 1usize..50,
                          fixed in any::<bool>(), variable in any::<bool>()) {
            let mut s = ExperimentSpec::new(if variable { Task::CopyVariable } else { Task::CopyFixed });
            s.seed = seed;
            s.train.delta = delta;
            s.train.k = k;
            s.train.mode = if fixed { ModeName::Fixed } else { ModeName::Adaptive };
            s.train.tau_hat = Some(k + 10);
            let text = s.to_toml().unwrap();
            let back = ExperimentSpec::from_toml(&text).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
