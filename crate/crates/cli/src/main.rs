use clap::{Parser, Subcommand};
use mzimesh::dataset::Split;
use mzimesh_cli::{commands, CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mzimesh", version, about = "Model a thermo-optic MZI mesh from heater voltages to matrix weights")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a virtual chip and write chip.json.
    ChipNew,
    /// Measure the chip: sweep plus random records, split into train.csv and test.csv.
    DatasetGen,
    /// Fit the analytical model.
    FitAm,
    /// Train a surrogate network from scratch.
    TrainNn,
    /// Run the transfer pipeline: analytical model, synthetic data, pre-training, re-training.
    TrainTl,
    /// All model families over all training sizes and seeds.
    ExperimentScarcity,
    /// Simple and ridge-weighted ensembles for K = 1..K_max over repeated runs.
    ExperimentEnsemble,
    /// RMSE of a model file on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to one split (train, validation or test).
        #[arg(long)]
        split: Option<Split>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    let force = cli.force;
    match cli.command {
        Command::ChipNew => commands::chip_new(&cfg, force),
        Command::DatasetGen => commands::dataset_gen(&cfg, force),
        Command::FitAm => commands::fit_am(&cfg, force),
        Command::TrainNn => commands::train_nn(&cfg, force),
        Command::TrainTl => commands::train_tl(&cfg, force),
        Command::ExperimentScarcity => commands::experiment_scarcity(&cfg, force),
        Command::ExperimentEnsemble => commands::experiment_ensemble(&cfg, force),
        Command::Eval { model, dataset, split } => commands::eval(&model, &dataset, split).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
