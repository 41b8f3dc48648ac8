use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semcom_core::harness::{self, oracle, RunConfig};
use semcom_core::Error;

/// Probabilistic modality selection with distributed IB coding.
#[derive(Parser)]
#[command(name = "semcom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rate multiplier.
    #[arg(long)]
    beta: Option<f64>,
    /// Sparse-selection multiplier.
    #[arg(long)]
    gamma: Option<f64>,
    /// Relax all link budgets.
    #[arg(long)]
    no_limits: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scheme and write its log, heatmap, checkpoint and metrics.
    Train(Common),
    /// Train once per rate multiplier and write the frontier.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated multipliers.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2, 1e-1])]
        betas: Vec<f64>,
    },
    /// Compare every scheme on shared data.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Seeds per scheme; adds standard-deviation columns when above 1.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run a brute-force check.
    Oracle {
        /// selection-enum | pg-unbiased | mi-arith | bound-check | knn-entropy
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode held-out rows with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inference session; selects the shared random draw.
        #[arg(long, default_value_t = 0)]
        session: u64,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = c.beta {
        cfg.objective.beta = b;
    }
    if let Some(g) = c.gamma {
        cfg.objective.gamma = g;
    }
    if c.no_limits {
        cfg.topology.limits = false;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let run = harness::cmd_train(&cfg, &cfg.out)?;
            println!("{}", json(&run.outcome.metrics));
        }
        Command::SweepBeta { common, betas } => {
            let cfg = resolve(&common)?;
            for p in harness::cmd_sweep_beta(&cfg, &betas, &cfg.out)? {
                println!("beta={:e} sum_rate={:.4} nce={:.4}", p.beta, p.sum_rate, p.nce);
            }
        }
        Command::Bench { common, repeats } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = repeats {
                cfg.repeats = r;
                cfg.validate()?;
            }
            for row in harness::cmd_bench(&cfg, &cfg.out)? {
                println!("{} sum_rate={:.4} nce={:.4}", row.method, row.sum_rate(), row.nce());
            }
        }
        Command::Oracle { suite, seed } => {
            let report = oracle::run(suite.parse()?, seed)?;
            for l in &report.lines {
                println!("{l}");
            }
            println!("{}: {}", report.suite, if report.passed { "PASS" } else { "FAIL" });
            return Ok(report.passed);
        }
        Command::Infer {
            common,
            checkpoint,
            session,
        } => {
            let cfg = resolve(&common)?;
            println!("{}", json(&harness::cmd_infer(&cfg, &checkpoint, session)?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            })
        }
    }
}
