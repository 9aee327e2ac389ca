use std::path::Path;
use std::process::Command;

use adaptive_tbptt::experiment::{run, ExperimentSpec, ModeName, Task};

fn tiny(task: Task, out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(task);
    spec.seed = 3;
    spec.out = out.to_path_buf();
    spec.train.timing = false;
    spec.train.epochs = 2;
    spec.train.batch_size = 4;
    spec.train.window = 20;
    spec.train.k0 = 5;
    spec.train.k_max = 20;
    spec.train.hidden = vec![8];
    spec.copy.m = 3;
    spec.copy.m_low = 2;
    spec.copy.m_high = 3;
    spec.copy.train_len = 2_000;
    spec.copy.valid_len = 400;
    spec.copy.test_len = 400;
    spec.testbed.steps = 200;
    spec.testbed.seeds = 2;
    spec.testbed.deltas = vec![0.0, 0.5];
    spec
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn fixed_copy_run_writes_artifacts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut spec = tiny(Task::CopyFixed, a.path());
    spec.train.mode = ModeName::Fixed;
    spec.train.k = 5;
    let sa = run(&spec).unwrap();
    spec.out = b.path().to_path_buf();
    let sb = run(&spec).unwrap();

    assert_eq!(sa.epochs_run, 2);
    assert_eq!(sa.mode, "fixed");
    assert_eq!(sa.delta_or_k, Some(5.0));
    assert!(sa.best_valid_ppl.unwrap().is_finite());
    for name in ["epochs.csv", "summary.json", "final.ckpt", "best.ckpt"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
    assert_eq!(sa.best_valid_ppl, sb.best_valid_ppl);

    let csv = read(a.path(), "epochs.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,mode,K_n,beta_hat,delta_hat_at_Kn,train_loss,valid_ppl,test_ppl,wallclock_s"
    );
    assert_eq!(lines.count(), 2);

    let json: serde_json::Value = serde_json::from_str(&read(a.path(), "summary.json")).unwrap();
    for key in ["task", "mode", "delta_or_K", "best_valid_ppl", "test_ppl_at_best", "epochs_run", "seed"] {
        assert!(json.get(key).is_some(), "summary missing {key}");
    }
}

#[test]
fn adaptive_copy_run_profiles_each_adaptation_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(Task::CopyVariable, dir.path());
    spec.train.mode = ModeName::Adaptive;
    spec.train.delta = 0.5;
    spec.train.adapt_every = 1;
    run(&spec).unwrap();
    for epoch in 1..=2 {
        assert!(dir.path().join(format!("profile_epoch{epoch:03}.csv")).exists());
        assert!(dir.path().join(format!("bias_bounds_epoch{epoch:03}.csv")).exists());
    }
    let csv = read(dir.path(), "epochs.csv");
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], "adaptive");
        let k: usize = cols[2].parse().unwrap();
        assert!((2..=20).contains(&k), "K_n {k}");
        assert!(!cols[3].is_empty() && !cols[4].is_empty());
    }
}

#[test]
fn profile_only_writes_profile_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(Task::ProfileOnly, dir.path());
    let s = run(&spec).unwrap();
    assert_eq!(s.epochs_run, 0);
    assert!(s.best_valid_ppl.is_none());
    assert!(read(dir.path(), "profile.csv").lines().count() > 1);
    assert!(read(dir.path(), "bias_bounds.csv").lines().count() > 1);
}

#[test]
fn testbed_writes_one_row_per_delta_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(Task::SgdTestbed, dir.path());
    run(&spec).unwrap();
    let csv = read(dir.path(), "testbed.csv");
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("delta,seed,gamma"));
}

#[test]
fn cli_flags_override_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.toml");
    let out = dir.path().join("out");
    let spec = tiny(Task::CopyFixed, &out);
    std::fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();

    let output = Command::new(env!("CARGO_BIN_EXE_tbptt"))
        .args(["--spec", spec_path.to_str().unwrap(), "--K", "4", "--epochs", "1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(summary["mode"], "fixed");
    assert_eq!(summary["delta_or_K"], 4.0);
    assert_eq!(summary["epochs_run"], 1);
    let written = ExperimentSpec::load(&out.join("spec.toml")).unwrap();
    assert_eq!(written.train.k, 4);
}

#[test]
fn cli_rejects_out_of_range_delta() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_tbptt"))
        .args(["--mode", "adaptive", "--delta", "1.5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("delta"));
}
