use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use trajattr::cli::{self, AttributeEstimator, Command, SelectMode, Workspace, OUTPUT_ROOT_ENV};
use trajattr::config::ExperimentConfig;

/// Trajectory-based training-data attribution experiments.
#[derive(Parser)]
#[command(name = "trajattr", version)]
struct Args {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set optimizer.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Worker threads for parallel work (0 = one per core).
    #[arg(long, default_value_t = 0, global = true)]
    jobs: usize,

    /// Directory that relative `output_dir` values resolve against.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Sgd,
    Adamw,
    Ensemble,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or import the dataset splits.
    GenData,
    /// Train and record the trajectory.
    Train,
    /// Score every (sample, step) pair of the recorded trajectory.
    Attribute {
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
    },
    /// Leave-one-out retraining for sampled (sample, step) pairs.
    Tsloo,
    /// Spearman correlation of estimator scores with TSLOO loss changes.
    Fidelity,
    /// Per-bin error decomposition of SGD-influence against AdamW-influence.
    Decompose,
    /// AdamW-influence error across learning rates.
    SweepFactors,
    /// Closed-form error proxy against the observed error.
    Proxy,
    /// Influence-guided data selection.
    Select {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Look-ahead horizon sweep across learning rates and seeds.
    KSweep,
    /// Merge summary CSVs into one table.
    Report,
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::GenData => Command::GenData,
            Cmd::Train => Command::Train,
            Cmd::Attribute { estimator } => Command::Attribute(match estimator {
                EstimatorArg::Sgd => AttributeEstimator::Sgd,
                EstimatorArg::Adamw => AttributeEstimator::AdamW,
                EstimatorArg::Ensemble => AttributeEstimator::Ensemble,
            }),
            Cmd::Tsloo => Command::Tsloo,
            Cmd::Fidelity => Command::Fidelity,
            Cmd::Decompose => Command::Decompose,
            Cmd::SweepFactors => Command::SweepFactors,
            Cmd::Proxy => Command::Proxy,
            Cmd::Select { mode } => Command::Select(match mode {
                ModeArg::Online => SelectMode::Online,
                ModeArg::Offline => SelectMode::Offline,
            }),
            Cmd::KSweep => Command::KSweep,
            Cmd::Report => Command::Report,
        }
    }
}

fn run(args: &Args) -> anyhow::Result<()> {
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path, &args.sets)?,
        None => ExperimentConfig::from_toml("", &args.sets)?,
    };
    let ws = Workspace::new(config, args.output_root.as_deref())?;
    let command = args.command.command();
    let written = ws.run(command)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut stderr = std::io::stderr().lock();
            let written = match err.downcast_ref::<trajattr::Error>() {
                Some(e) => cli::write_error_record(&mut stderr, e),
                None => {
                    let record = serde_json::json!({
                        "status": "error",
                        "kind": "internal",
                        "message": format!("{err:#}"),
                    });
                    use std::io::Write;
                    writeln!(stderr, "{record}")
                }
            };
            if written.is_err() {
                eprintln!("{err:#}");
            }
            ExitCode::from(match err.downcast_ref::<trajattr::Error>() {
                Some(trajattr::Error::Config(_)) => 2,
                Some(trajattr::Error::Dependency { .. }) => 3,
                _ => 1,
            })
        }
    }
}
