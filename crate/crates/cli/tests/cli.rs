use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn leeds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leeds")).args(args).output().expect("binary runs")
}

fn quick<'a>(verb: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![verb, "PLACEHOLDER", "--output_dir", out, "--hp.pretrain_tasks", "200", "--n_seeds", "1", "--n_steps=20"]
}

fn with_config<'a>(mut args: Vec<&'a str>, cfg: &'a str) -> Vec<&'a str> {
    args[1] = cfg;
    args
}

#[test]
fn run_writes_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("smoke.json");
    let o = leeds(&with_config(quick("run", out), cfg.to_str().unwrap()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("leeds") && stdout.contains("maml_reset"));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("mode,seed_count,overall_acc_mean,overall_acc_std,pretrain_acc_mean,ood1_acc_mean,ood2_acc_mean,precision_mean,recall_mean"));
    let rows = std::fs::read_to_string(dir.path().join("episodes/leeds_seed0.csv")).unwrap();
    assert_eq!(rows.lines().count(), 21);
    let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(header["config"]["n_steps"], 20);
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("smoke.json");
    let cfg = cfg.to_str().unwrap();
    for extra in [
        vec!["--stream.p_stay", "1.5"],
        vec!["--stream.nosuch.field", "1"],
        vec!["--det.delta=-1"],
    ] {
        let mut args = with_config(quick("run", out), cfg);
        args.extend(extra.iter());
        let o = leeds(&args);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(leeds(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
    let o = leeds(&["sweep", cfg, "--param", "gamma", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_with_only_failing_points_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("smoke.json");
    let mut args = with_config(quick("sweep", out), cfg.to_str().unwrap());
    args.extend(["--param", "p_stay", "--values", "1.5,2"]);
    let o = leeds(&args);
    assert_eq!(o.status.code(), Some(1));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().skip(1).filter(|l| l.contains(",error,")).count(), 2);
}

#[test]
fn sweep_writes_one_block_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("smoke.json");
    let mut args = with_config(quick("sweep", out), cfg.to_str().unwrap());
    args.extend(["--param", "ell", "--values", "1.0,2.0"]);
    let o = leeds(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    // header plus two modes for each of two values
    assert_eq!(sweep.lines().count(), 5);
    assert!(dir.path().join("sweep/ell_1/episodes/leeds_seed0.csv").exists());
}

#[test]
fn calibrate_and_theory_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config("smoke.json");
    let cfg = cfg.to_str().unwrap();
    let o = leeds(&with_config(quick("calibrate", out), cfg));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("tau = "));
    assert!(dir.path().join("calibration.json").exists());

    let mut args = with_config(quick("theory", out), cfg);
    args.extend([
        "--theory.trials", "1000",
        "--theory.s_grid", "[4]",
        "--theory.quad_seeds", "2",
        "--theory.regret_steps", "10",
        "--theory.calibration_episodes", "40",
        "--theory.contraction_trials", "5",
    ]);
    let o = leeds(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("theory.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"contraction_rho_agreement"));
    assert!(names.contains(&"ell_m"));
}
