use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uaplab_cli::config::ExperimentConfig;
use uaplab_cli::stages::{Filters, Pipeline, StageOutcome};
use uaplab_cli::CliError;
use uaplab_core::zoo::Regime;

/// Universal-perturbation workbench: synthetic data, regime training,
/// attacks, robustness reports.
#[derive(Parser)]
#[command(name = "uaplab", version, about)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Output directory; artifacts land under `<out>/<config-hash>/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap. Any value produces identical artifacts.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Restrict attack/eval stages to one ε.
    #[arg(long, global = true)]
    epsilon: Option<f32>,

    /// Restrict stages to one regime (IN, SIN, SIN+IN, SIN+2IN).
    #[arg(long, global = true)]
    regime: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the base, stylized and cue-conflict bundles.
    GenData,
    /// Train the regime models and cross architectures.
    Train,
    /// Generate untargeted sweeps, targeted sweeps and noise baselines.
    Attack,
    /// Accuracy, shape-bias, white-box/noise and sweep reports.
    Eval,
    /// Cross-model transfer matrix at the primary ε.
    Transfer,
    /// Hard/soft voting ensembles against the perturbation pool.
    Ensemble,
    /// Export perturbations as PPM images.
    ExportUap,
    /// Run the whole pipeline end to end.
    Repro,
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();

    let text = std::fs::read_to_string(&cli.config).map_err(|_| CliError::MissingArtifact {
        path: cli.config.clone(),
    })?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let regime = match &cli.regime {
        None => None,
        Some(name) => match Regime::parse(name) {
            Ok(r) if r != Regime::Other => Some(r),
            _ => {
                return Err(CliError::Config {
                    path: "--regime".into(),
                    message: format!("unknown regime {name:?}"),
                })
            }
        },
    };
    let filters = Filters {
        epsilon: cli.epsilon,
        regime,
    };

    let pipeline = Pipeline::new(cfg, &cli.out, filters)?;
    println!("artifacts: {}", pipeline.root().display());

    let dispatch = |pipeline: &Pipeline| -> Result<(), CliError> {
        let report = |stage: &str, outcome: StageOutcome| {
            let verdict = match outcome {
                StageOutcome::Ran => "done",
                StageOutcome::UpToDate => "up to date",
            };
            println!("{stage}: {verdict}");
        };
        match cli.command {
            Command::GenData => report("gen-data", pipeline.gen_data()?),
            Command::Train => report("train", pipeline.train()?),
            Command::Attack => report("attack", pipeline.attack()?),
            Command::Eval => report("eval", pipeline.eval()?),
            Command::Transfer => report("transfer", pipeline.transfer()?),
            Command::Ensemble => report("ensemble", pipeline.ensemble()?),
            Command::ExportUap => report("export-uap", pipeline.export_uaps()?),
            Command::Repro => {
                for (stage, outcome) in pipeline.repro()? {
                    report(stage, outcome);
                }
            }
        }
        Ok(())
    };

    match cli.jobs {
        Some(n) if n >= 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config {
                    path: "--jobs".into(),
                    message: e.to_string(),
                })?;
            pool.install(|| dispatch(&pipeline))
        }
        Some(_) => Err(CliError::Config {
            path: "--jobs".into(),
            message: "must be >= 1".into(),
        }),
        None => dispatch(&pipeline),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
