use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use residual_ood::eval::load_report;
use residual_ood::experiment::{dump_residuals, ExperimentError};
use residual_ood::{run_experiment, save_dataset, synthesize, ExperimentConfig, SynthSpec};

#[derive(Parser)]
#[command(name = "resood", version, about = "Residual-based OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every case x detector of a config and write the reports.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Replaces every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic Gaussian-mixture feature dataset.
    Synth(SynthArgs),
    /// Export the train residuals of a config's dataset as CSV.
    DumpResiduals {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Restrict to these known classes (repeatable; default all).
        #[arg(long = "class")]
        classes: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretty-print JSON reports.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Print indented JSON instead of the metric table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Manifest path; the CSV is written beside it.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    known: usize,
    #[arg(long, default_value_t = 5)]
    unknown: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    train: usize,
    #[arg(long, default_value_t = 30)]
    test: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() || matches!(e, ExperimentError::Io { .. }) {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let reports = run_experiment(&cfg).map_err(|e| match e {
                ExperimentError::Io { .. } => Failure::Runtime(e.to_string()),
                other => other.into(),
            })?;
            for r in &reports {
                println!(
                    "{:<16} {:<34} OA {:.4}  AUROC {}",
                    r.case,
                    r.detector,
                    r.oa,
                    r.auroc.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("{} reports written to {}", reports.len(), cfg.output_dir.display());
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                num_known: a.known,
                num_unknown: a.unknown,
                dim: a.dim,
                per_class_train: a.train,
                per_class_test: a.test,
                mean_separation: a.separation,
                within_std: a.std,
                seed: a.seed,
            };
            let ds = synthesize(&spec).map_err(|e| Failure::Config(e.to_string()))?;
            save_dataset(&ds, &a.out).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{} samples written to {}", ds.samples().len(), a.out.display());
        }
        Command::DumpResiduals { config, out, classes, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            let rows = dump_residuals(&cfg, &classes, &out).map_err(|e| match e {
                ExperimentError::Io { .. } => Failure::Runtime(e.to_string()),
                other => other.into(),
            })?;
            println!("{rows} residuals written to {}", out.display());
        }
        Command::Report { files, json } => {
            for (i, path) in files.iter().enumerate() {
                let report = load_report(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                if i > 0 {
                    println!();
                }
                if json {
                    let text = serde_json::to_string_pretty(&report)
                        .map_err(|e| Failure::Runtime(e.to_string()))?;
                    println!("{text}");
                } else {
                    print!("{}", report.table());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
