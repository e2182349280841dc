use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use retrain_core::harness::{self, ActModeKind, ExperimentConfig, ScenarioKind};
use retrain_core::Policy;

/// Learn when to retrain a classifier under concept drift, and benchmark
/// the learned policy against drift detectors and fixed schedules.
#[derive(Debug, Parser)]
#[command(name = "retrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the update policy in the simulating environment.
    Train(Common),
    /// Evaluate every strategy over seeded drift runs and write result tables.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Evaluate this policy checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one agent per penalty and pick the penalty on pilot episodes.
    TuneRho {
        #[command(flatten)]
        common: Common,
        /// Comma-separated penalty grid.
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long)]
        pilot_runs: Option<usize>,
    },
    /// Write drift paths and batch summaries only.
    Simulate(Common),
    /// Check network gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        nets: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Flags shared by every subcommand. Each overrides the matching field of
/// the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// well_specified or misspecified [default: well_specified].
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    /// Output directory [default: results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of drift runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Model life-span.
    #[arg(long = "T", visible_alias = "horizon")]
    horizon: Option<usize>,
    /// Samples per batch.
    #[arg(long)]
    n: Option<usize>,
    /// Update penalty used in training.
    #[arg(long)]
    rho: Option<f64>,
    /// Comma-separated update costs for the result tables.
    #[arg(long, value_delimiter = ',')]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    training_steps: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
    /// probabilistic or deterministic.
    #[arg(long, value_parser = parse_act_mode)]
    act_mode: Option<ActModeKind>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

fn parse_act_mode(s: &str) -> Result<ActModeKind, String> {
    match s {
        "probabilistic" => Ok(ActModeKind::Probabilistic),
        "deterministic" => Ok(ActModeKind::Deterministic),
        _ => Err(format!("expected probabilistic or deterministic, got {s:?}")),
    }
}

impl Common {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.scenario {
            cfg.scenario = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.runs {
            cfg.num_runs = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.n {
            cfg.batch_size = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = &self.mu {
            cfg.mu_grid = v.clone();
        }
        if let Some(v) = self.training_steps {
            cfg.training_steps = v;
        }
        if let Some(v) = self.episode_len {
            cfg.episode_len = v;
        }
        if let Some(v) = self.act_mode {
            cfg.act_mode = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn setup(&self) -> anyhow::Result<ExperimentConfig> {
        let level = if self.verbose { "info" } else { "warn" };
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
        if let Some(threads) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .context("configuring worker threads")?;
        }
        self.resolve()
    }
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(common) => {
            let cfg = common.setup()?;
            let scenario = harness::Scenario::build(&cfg)?;
            let (policy, report) = harness::train_policy(&cfg, &scenario, cfg.rho)?;
            create_out(&cfg.out_dir)?;
            policy.save(&cfg.out_dir.join("policy.bin"))?;
            harness::write_reward_curve(&cfg.out_dir.join("reward_curve.csv"), &report.curve)?;
            std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string())
                .with_context(|| format!("writing config snapshot in {}", cfg.out_dir.display()))?;
            if let Some(last) = report.curve.last() {
                println!(
                    "trained for {} steps; final mean episode reward {:.4}",
                    report.steps, last.mean_episode_reward
                );
            }
            println!("policy written to {}", cfg.out_dir.join("policy.bin").display());
        }
        Command::Compare { common, checkpoint } => {
            let cfg = common.setup()?;
            let policy = checkpoint.as_deref().map(Policy::load).transpose()?;
            let cmp = harness::run_comparison(&cfg, policy)?;
            harness::emit_outputs(&cmp, &cfg, &cfg.out_dir)?;
            print!("{}", cmp.table.to_markdown());
            println!("results written to {}", cfg.out_dir.display());
        }
        Command::TuneRho {
            common,
            rho_grid,
            pilot_runs,
        } => {
            let mut cfg = common.setup()?;
            if let Some(grid) = rho_grid {
                cfg.rho_grid = grid;
            }
            if let Some(p) = pilot_runs {
                cfg.pilot_runs = p;
            }
            cfg.validate()?;
            let report = harness::tune_rho(&cfg)?;
            harness::emit_tuning(&report, &cfg, &cfg.out_dir)?;
            println!("chosen rho: {}", report.chosen);
        }
        Command::Simulate(common) => {
            let cfg = common.setup()?;
            harness::simulate(&cfg, &cfg.out_dir)?;
            println!("drift traces written to {}", cfg.out_dir.display());
        }
        Command::Gradcheck {
            common,
            nets,
            samples,
            tolerance,
        } => {
            let cfg = common.setup()?;
            let reports = harness::gradcheck(&cfg, nets, samples)?;
            let mut worst = 0.0f64;
            for (name, r) in &reports {
                println!(
                    "{name}: {} parameters, max relative error {:.3e} (parameter {})",
                    r.parameters, r.max_relative_error, r.worst_parameter
                );
                worst = worst.max(r.max_relative_error);
            }
            if worst >= tolerance {
                bail!("gradient check failed: max relative error {worst:.3e} >= {tolerance:e}");
            }
            println!("gradient check passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let _ = Cli::command().print_help();
        println!();
        return ExitCode::SUCCESS;
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            if !rendered.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
