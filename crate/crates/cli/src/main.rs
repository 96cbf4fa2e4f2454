mod artifact;
mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Scenario trees, learned policies and out-of-sample selection.
#[derive(Debug, Parser)]
#[command(name = "stochtree", version)]
pub struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, env = "STOCHTREE_OUT", default_value = "stochtree-out")]
    pub out: PathBuf,

    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal quantizer of the standard normal distribution.
    Quantize {
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = stochtree::process::DEFAULT_QUANTIZER_TOL)]
        tol: f64,
    },
    /// Build a scenario tree.
    Tree {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        tree: TreeArgs,
    },
    /// Solve the deterministic equivalent on a tree.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        tree: TreeArgs,
        /// Read the tree from a `tree` artifact instead of building it.
        #[arg(long)]
        tree_file: Option<PathBuf>,
        /// Also write the program in LP format.
        #[arg(long)]
        lp: Option<PathBuf>,
    },
    /// Fit policies to a solved tree.
    Learn {
        /// A `solve` artifact.
        #[arg(long)]
        solution: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Keep the Cholesky factors in the artifact.
        #[arg(long)]
        keep_factor: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate policies out of sample.
    Simulate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        source: PolicySource,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, value_enum, default_value_t = SeedClassArg::Test)]
        class: SeedClassArg,
    },
    /// Rank policies on a common validation sample.
    Select {
        /// `learn` artifacts; every policy record is a candidate.
        #[arg(long = "policies", required = true, num_args = 1..)]
        policies: Vec<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
        /// Re-estimate the winner on this many fresh scenarios.
        #[arg(long)]
        test_n: Option<usize>,
        #[arg(long)]
        test_seed: Option<u64>,
    },
    /// Generate, solve, learn, validate and select in one run.
    Pipeline(PipelineArgs),
    /// Charts and CSV tables from artifacts.
    Plot {
        /// Artifact or CSV files; each file is one series.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Dotted path of the x value inside each record payload.
        #[arg(long, default_value = "branching")]
        x: String,
        #[arg(long, default_value = "objective")]
        y: String,
        /// Base name of the chart and CSV files.
        #[arg(long, default_value = "chart")]
        name: String,
    },
    /// Number of random trees needed to find a good one.
    PlanTrees {
        /// Probability that one tree is good.
        #[arg(long)]
        g: f64,
        /// Required confidence.
        #[arg(long)]
        delta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    Assembly,
    #[value(name = "assembly2stage")]
    Assembly2Stage,
    Swing,
}

#[derive(Clone, Debug, Args)]
pub struct ProblemArgs {
    #[arg(long, value_enum, default_value_t = ProblemArg::Assembly)]
    pub problem: ProblemArg,
    /// Risk aversion of the swing problem.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Exercise budget of the swing problem.
    #[arg(long, default_value_t = 2.0)]
    pub eta: f64,
    /// Number of exercise dates of the swing problem.
    #[arg(long, default_value_t = 52)]
    pub horizon: usize,
}

#[derive(Clone, Debug, Args)]
pub struct TreeArgs {
    /// Uniform branching factor.
    #[arg(long, conflicts_with = "random_n")]
    pub b: Option<usize>,
    /// Random branching with about this many scenarios.
    #[arg(long)]
    pub random_n: Option<usize>,
    /// Master seed; tree `index` uses the same seeds as in a pipeline run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Identity,
    Phi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RestorerArg {
    Projection,
    Heuristic,
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = KernelArg::Phi)]
    pub kernel: KernelArg,
    /// Bandwidths; one model per value (default: the built-in grid).
    #[arg(long, value_delimiter = ',')]
    pub theta: Vec<f64>,
    #[arg(long, default_value_t = stochtree::learn::DEFAULT_NOISE_VARIANCE)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = RestorerArg::Projection)]
    pub restorer: RestorerArg,
    /// Random priority orders of the heuristic restorer.
    #[arg(long, default_value_t = 5)]
    pub orders: usize,
    /// Learn the last assembly stage instead of using its closed form.
    #[arg(long)]
    pub learn_last: bool,
}

#[derive(Clone, Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PolicySource {
    /// A `learn` or `pipeline` policy artifact.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// The threshold rule of the swing problem.
    #[arg(long)]
    pub bang_bang: bool,
    /// Shrinking-horizon benchmark with this branching factor.
    #[arg(long)]
    pub shrinking_horizon: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub sample_seed: u64,
    #[arg(long, default_value_t = stochtree::evaluate::DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SeedClassArg {
    Validation,
    Test,
}

#[derive(Clone, Debug, Args)]
pub struct PipelineArgs {
    /// A JSON run configuration; overrides all other run flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, conflicts_with = "random_n")]
    pub b: Option<usize>,
    #[arg(long)]
    pub random_n: Option<usize>,
    /// Number of trees.
    #[arg(long, default_value_t = 1)]
    pub trees: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    pub validation_n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub test_n: usize,
    #[arg(long, default_value_t = stochtree::evaluate::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory (default: `<out>/run-<seed>`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
