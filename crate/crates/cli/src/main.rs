//! `densehmm`: train, score and sample dense and standard HMMs, compute
//! co-occurrence matrices, and run the factorization study and model
//! comparison experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Config(String),
    /// Unreadable or malformed data (exit 2).
    Data(String),
    /// Numerical failure (exit 3).
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<densehmm::Error> for CliError {
    fn from(e: densehmm::Error) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            CliError::Numeric(msg)
        } else if matches!(e, densehmm::Error::InvalidArgument(_)) {
            CliError::Config(msg)
        } else {
            CliError::Data(msg)
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "densehmm", version, about = "Dense-representation hidden Markov models")]
struct Cli {
    /// Only print warnings and errors on standard error.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on a line-format corpus.
    Fit(FitArgs),
    /// Print the normalized negative log-likelihood of a corpus.
    Score(ScoreArgs),
    /// Sample sequences from a saved model.
    Sample(SampleArgs),
    /// Compute a co-occurrence matrix from data or a model.
    Cooc(CoocArgs),
    /// Run the softmax vs. normAbsLin factorization study.
    FactorStudy(FactorArgs),
    /// Run a replicated model comparison over an (n, l) grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitModel {
    /// Baum-Welch on a standard HMM.
    Stand,
    /// EM with a gradient M-step on dense representations.
    DenseEm,
    /// Direct co-occurrence fitting of dense representations.
    DenseDirect,
}

impl FitModel {
    fn parse(s: &str) -> Result<Self, CliError> {
        <Self as ValueEnum>::from_str(s, true)
            .map_err(|_| CliError::Config(format!("unknown model {s:?}; expected stand, dense-em or dense-direct")))
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// TOML file with any of the options below (underscored keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to train.
    #[arg(long, value_enum)]
    model: Option<FitModel>,
    /// Training corpus, one sequence per line.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hidden states [default: 3].
    #[arg(long)]
    n: Option<usize>,
    /// Representation length of the dense models [default: n].
    #[arg(long)]
    l: Option<usize>,
    /// Keep only the first K sequences.
    #[arg(long)]
    limit: Option<usize>,
    /// Truncate sequences to this length.
    #[arg(long)]
    max_len: Option<usize>,
    /// Merge the rarest symbols holding this fraction of tokens.
    #[arg(long)]
    merge_threshold: Option<f64>,
    /// EM iterations [default: 100].
    #[arg(long)]
    max_em_iters: Option<usize>,
    /// Relative log-likelihood improvement that stops EM [default: 1e-6].
    #[arg(long)]
    em_tol: Option<f64>,
    /// Adam steps per dense M-step [default: 100].
    #[arg(long)]
    mstep_steps: Option<usize>,
    /// Adam learning rate of the dense M-step [default: 0.01].
    #[arg(long)]
    mstep_lr: Option<f64>,
    /// Adam steps of the direct trainer [default: 5000].
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate of the direct trainer [default: 0.05].
    #[arg(long)]
    lr: Option<f64>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// TOML file with any of the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Saved model (`hmm` or `reps`).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Test corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the value to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// TOML file with any of the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Saved model (`hmm` or `reps`).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Number of sequences [default: 10].
    #[arg(long)]
    count: Option<usize>,
    /// Length of every sequence [default: 200].
    #[arg(long)]
    length: Option<usize>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output corpus file [default: standard output].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoocArgs {
    /// TOML file with any of the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus to count adjacent pairs in.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Saved model; pairs are counted in sequences sampled from it.
    #[arg(long)]
    params: Option<PathBuf>,
    /// With --params, compute the matrix exactly (requires stationary π).
    #[arg(long)]
    analytic: bool,
    /// Sampled sequences for a model estimate [default: 10].
    #[arg(long)]
    count: Option<usize>,
    /// Length of the sampled sequences [default: 200].
    #[arg(long)]
    length: Option<usize>,
    /// Random seed of the model estimate [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Print the mean absolute deviation from this matrix CSV.
    #[arg(long)]
    mad: Option<PathBuf>,
    /// Output CSV [default: standard output].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FactorArgs {
    /// TOML file (grid, replicas, alpha, steps, lr, seed, out).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replicas per cell [default: 10].
    #[arg(long)]
    replicas: Option<usize>,
    /// Dirichlet concentration of the ground truths [default: 0.1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Adam steps per fit [default: 10000].
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate [default: 0.05].
    #[arg(long)]
    lr: Option<f64>,
    /// Base seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for records.csv and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML file (see configs/ for the schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset label in the CSVs.
    #[arg(long)]
    name: Option<String>,
    /// Replicas per cell [default: 10].
    #[arg(long)]
    replicas: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for the result CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // clap's own failure status (2) would collide with the data-error code
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let outcome = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Score(a) => commands::score(a),
        Command::Sample(a) => commands::sample(a),
        Command::Cooc(a) => commands::cooc(a),
        Command::FactorStudy(a) => commands::factor_study(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
