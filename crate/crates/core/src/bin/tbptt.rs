use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_tbptt::experiment::{run, ExperimentSpec, ModeName, Task};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    CopyFixed,
    CopyVariable,
    SgdTestbed,
    ProfileOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adaptive,
    Fixed,
}

/// Train RNNs with adaptive or fixed truncated BPTT, or run the biased-SGD testbed.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML experiment spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Relative-bias tolerance for adaptive mode, in (0,1).
    #[arg(long)]
    delta: Option<f64>,
    /// Truncation length for fixed mode.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_spec(args: &Args) -> adaptive_tbptt::Result<ExperimentSpec> {
    let mut spec = match &args.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::new(Task::CopyFixed),
    };
    if let Some(t) = args.task {
        spec.task = match t {
            TaskArg::CopyFixed => Task::CopyFixed,
            TaskArg::CopyVariable => Task::CopyVariable,
            TaskArg::SgdTestbed => Task::SgdTestbed,
            TaskArg::ProfileOnly => Task::ProfileOnly,
        };
    }
    if let Some(m) = args.mode {
        spec.train.mode = match m {
            ModeArg::Adaptive => ModeName::Adaptive,
            ModeArg::Fixed => ModeName::Fixed,
        };
    }
    if let Some(d) = args.delta {
        spec.train.delta = d;
    }
    if let Some(k) = args.k {
        spec.train.k = k;
        if args.mode.is_none() {
            spec.train.mode = ModeName::Fixed;
        }
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(e) = args.epochs {
        spec.train.epochs = e;
    }
    if let Some(o) = &args.out {
        spec.out = o.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = build_spec(&args).and_then(|spec| run(&spec));
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
