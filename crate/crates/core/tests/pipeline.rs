use retrain_core::harness::{self, ExperimentConfig, ScenarioKind, StrategyKind};
use retrain_core::Policy;

fn tiny(scenario: ScenarioKind) -> ExperimentConfig {
    ExperimentConfig {
        scenario,
        horizon: 15,
        batch_size: 200,
        num_runs: 3,
        training_steps: 128,
        episode_len: 10,
        ppo_rollout_len: 64,
        ppo_minibatch_size: 16,
        ppo_epochs: 2,
        ppo_hidden_sizes: vec![8, 8],
        dynamic_rollout_len: 4,
        dynamic_minibatch_size: 2,
        master_seed: 9,
        ..ExperimentConfig::default()
    }
}

#[test]
fn compare_writes_every_output_and_snapshot_reruns_identically() {
    let cfg = tiny(ScenarioKind::WellSpecified);
    let dir = tempfile::tempdir().unwrap();
    let cmp = harness::run_comparison(&cfg, None).unwrap();
    harness::emit_outputs(&cmp, &cfg, dir.path()).unwrap();
    for f in ["results.csv", "results.md", "reward_curve.csv", "policy.bin", "config.toml"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    for r in 0..cfg.num_runs {
        assert!(dir.path().join(format!("traces/run_{r:03}.csv")).is_file());
    }

    let snapshot = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);
    let again = tempfile::tempdir().unwrap();
    let cmp2 = harness::run_comparison(&snapshot, None).unwrap();
    harness::emit_outputs(&cmp2, &snapshot, again.path()).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("results.csv")).unwrap(),
        std::fs::read(again.path().join("results.csv")).unwrap()
    );
    assert_eq!(harness::ResultTable::read_csv(&dir.path().join("results.csv")).unwrap(), cmp.table);
}

#[test]
fn saved_checkpoint_reproduces_the_comparison() {
    let cfg = tiny(ScenarioKind::WellSpecified);
    let dir = tempfile::tempdir().unwrap();
    let cmp = harness::run_comparison(&cfg, None).unwrap();
    harness::emit_outputs(&cmp, &cfg, dir.path()).unwrap();
    let policy = Policy::load(&dir.path().join("policy.bin")).unwrap();
    let cmp2 = harness::run_comparison(&cfg, Some(policy)).unwrap();
    assert_eq!(cmp.table, cmp2.table);
    assert!(cmp2.training.is_none());
}

#[test]
fn checkpoint_with_wrong_state_size_is_rejected() {
    let cfg = tiny(ScenarioKind::WellSpecified);
    let wrong = Policy::new(5, &[4], &mut retrain_core::rng::stream_rng(0, retrain_core::rng::Stream::NetworkInit, 0)).unwrap();
    assert!(harness::run_comparison(&cfg, Some(wrong)).is_err());
}

#[test]
fn misspecified_comparison_runs_on_identical_streams() {
    let cfg = tiny(ScenarioKind::Misspecified);
    let cmp = harness::run_comparison(&cfg, None).unwrap();
    let scenario = harness::Scenario::build(&cfg).unwrap();
    for run in &cmp.runs {
        let (_, batches) = scenario.run_data(&cfg, run.run).unwrap();
        assert_eq!(run.digest, harness::stream_digest(&batches));
        assert_eq!(run.traces.len(), StrategyKind::ALL.len());
        for st in &run.traces {
            assert_eq!(st.trace.utilities.len(), cfg.horizon);
        }
    }
}

#[test]
fn simulate_and_tuning_write_their_files() {
    let cfg = ExperimentConfig {
        rho_grid: vec![0.01, 0.03],
        pilot_runs: 2,
        ..tiny(ScenarioKind::Misspecified)
    };
    let dir = tempfile::tempdir().unwrap();
    harness::simulate(&cfg, &dir.path().join("sim")).unwrap();
    let header = std::fs::read_to_string(dir.path().join("sim/drift_run_000.csv")).unwrap();
    assert!(header.starts_with("t,intercept,beta_1,beta_2,beta_3,beta_4,beta_5,interaction,quadratic,extra,label_rate"));
    assert_eq!(header.lines().count(), cfg.horizon + 1);

    let report = harness::tune_rho(&cfg).unwrap();
    harness::emit_tuning(&report, &cfg, &dir.path().join("tune")).unwrap();
    for f in ["pilot.csv", "pilot.md", "chosen_rho.txt", "reward_curve_rho_0.01.csv", "reward_curve_rho_0.03.csv"] {
        assert!(dir.path().join("tune").join(f).is_file(), "missing {f}");
    }
}
