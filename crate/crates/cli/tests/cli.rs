use std::path::Path;
use std::process::{Command, Output};

fn retrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retrain")).args(args).output().unwrap()
}

const SMALL: &[&str] = &[
    "--runs", "2", "--T", "12", "--n", "200", "--training-steps", "2048", "--episode-len", "10",
];

fn with_out<'a>(sub: &'a str, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v = vec![sub.to_string()];
    v.extend(SMALL.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v.push("--out".into());
    v.push(out.display().to_string());
    v
}

fn run_owned(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    retrain(&refs)
}

#[test]
fn no_arguments_prints_help_and_succeeds() {
    let out = retrain(&[]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "compare", "tune-rho", "simulate", "gradcheck"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn help_flag_succeeds() {
    assert_eq!(retrain(&["compare", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(retrain(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(retrain(&["compare", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(retrain(&["compare", "--scenario", "odd"]).status.code(), Some(1));
    let out = retrain(&["compare", "--runs", "many"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let out = retrain(&["compare", "--T", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));
    let out = retrain(&["compare", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.toml"));
}

#[test]
fn gradcheck_passes() {
    let out = retrain(&["gradcheck", "--nets", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check passed"));
}

#[test]
fn train_then_compare_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = run_owned(&with_out("train", &train_dir, &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_dir.join("policy.bin");
    assert!(ckpt.is_file());

    let cmp_dir = dir.path().join("cmp");
    let ckpt_arg = ckpt.display().to_string();
    let out = run_owned(&with_out("compare", &cmp_dir, &["--checkpoint", &ckpt_arg, "--mu", "0.01,0.05"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(cmp_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("strategy,mu,mean_utility,stderr,mean_updates"));
    assert_eq!(csv.lines().count(), 1 + 8 * 2);
    assert!(!cmp_dir.join("reward_curve.csv").exists());
}

#[test]
fn config_file_fields_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "horizon = 40\nnum_runs = 1\nscenario = \"misspecified\"\n").unwrap();
    let out_dir = dir.path().join("sim");
    let cfg_arg = cfg.display().to_string();
    let out = run_owned(&with_out("simulate", &out_dir, &["--config", &cfg_arg]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snapshot = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("horizon = 12"));
    assert!(snapshot.contains("num_runs = 2"));
    assert!(snapshot.contains("scenario = \"misspecified\""));
}

#[test]
fn tune_rho_with_one_candidate_returns_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_owned(&with_out("tune-rho", dir.path(), &["--rho-grid", "0.03"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("chosen rho: 0.03"));
}
