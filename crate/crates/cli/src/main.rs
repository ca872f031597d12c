use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use factor_ood::config::RunConfig;
use factor_ood::pipeline;

#[derive(Parser, Debug)]
#[command(name = "factor-ood", version, about = "Factor-wise out-of-distribution reasoning with a rule-trained VAE")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Require bit-reproducible execution. Every stage already runs
    /// single-threaded with seeded streams, so this only records the request.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and print its manifest digest.
    GenData,
    /// Train the model; writes the checkpoint and loss history.
    Train {
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fit one reasoner per factor on the calibration split.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test splits and write the metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reasoner files; defaults to every factor's file in the run directory.
        #[arg(long = "reasoner")]
        reasoners: Vec<PathBuf>,
    },
    /// Print per-factor verdicts for images or directories of images.
    Reason {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "reasoner")]
        reasoners: Vec<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Failure before any work started (bad flags or config).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn load_config(cli: &Cli, required: bool) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if required => return Err(UsageError("--config is required for this command".into()).into()),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        log::info!("deterministic mode requested");
    }
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli, true)?;
            let s = pipeline::gen_data(&cfg)?;
            for (split, n) in &s.counts {
                println!("{split}: {n} samples");
            }
            println!("dataset: {}", s.dir.display());
            println!("manifest sha256: {}", s.digest);
        }
        Command::Train { epochs } => {
            let mut cfg = load_config(&cli, true)?;
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
            let s = pipeline::train_run(&cfg)?;
            println!("epochs run: {}  best epoch: {:?}  stopped early: {}", s.epochs_run, s.best_epoch, s.stopped_early);
            if let Some(r) = &s.last {
                println!("last epoch: total {:.5} rec {:.5} reg {:.5}", r.train.total, r.train.recloss, r.train.regloss);
            }
            println!("checkpoint: {}", s.checkpoint.display());
            println!("history: {}", s.history.display());
        }
        Command::Calibrate { checkpoint } => {
            let cfg = load_config(&cli, true)?;
            for p in pipeline::calibrate_run(&cfg, checkpoint.as_deref())? {
                println!("reasoner: {}", p.display());
            }
        }
        Command::Evaluate { checkpoint, reasoners } => {
            let cfg = load_config(&cli, true)?;
            let report = pipeline::evaluate_run(&cfg, checkpoint.as_deref(), reasoners)?;
            print!("{}", report.summary());
            println!("report: {}", cfg.out_dir().join(pipeline::REPORT_DIR).display());
        }
        Command::Reason { checkpoint, reasoners, inputs } => {
            let cfg = load_config(&cli, false)?;
            for v in pipeline::reason_run(&cfg, checkpoint.as_deref(), reasoners, inputs)? {
                println!("{}", v.line());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<UsageError>() {
        return 1;
    }
    match e.downcast_ref::<factor_ood::Error>() {
        Some(err) if err.is_config() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
