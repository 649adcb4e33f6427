use std::path::PathBuf;

use allocrisk::allocator::SearchMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::input::OutputFormat;

#[derive(Debug, Parser)]
#[command(name = "allocrisk", version, about = "Bayes-risk treatment/control allocation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the risk-minimizing allocation of a covariate file.
    Allocate(AllocateArgs),
    /// Risk of a given allocation, optionally cross-checked.
    Risk(RiskArgs),
    /// Test the equal-split sufficient condition.
    Check(CheckArgs),
    /// Drive a session directory without the HTTP server.
    Session(SessionArgs),
    /// Run the formula-versus-oracle sweeps.
    Selftest(SelftestArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Covariate CSV, one unit per row.
    pub covariates: PathBuf,
    /// Treat the first line as a header.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// RunConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prior JSON; overrides the prior in --config.
    #[arg(long, conflicts_with = "flat")]
    pub prior: Option<PathBuf>,
    /// Use the flat conditional prior.
    #[arg(long)]
    pub flat: bool,
    /// Override E[sigma^2].
    #[arg(long = "e-sigma2")]
    pub e_sigma2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exhaustive,
    LocalSearch,
    BestOfK,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exhaustive => SearchMode::Exhaustive,
            ModeArg::LocalSearch => SearchMode::LocalSearch,
            ModeArg::BestOfK => SearchMode::BestOfK,
        }
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Draws for best-of-k.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub exhaustive_limit: Option<usize>,
    #[arg(long, env = "ALLOCRISK_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Restrict to equal arms and report the equal-split condition.
    #[arg(long, conflicts_with = "arms")]
    pub equal_split: bool,
    /// Fixed arm sizes as `n_C,n_T`.
    #[arg(long)]
    pub arms: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Allocation as comma-separated 0/1, one per row.
    #[arg(long)]
    pub w: String,
    /// Cross-check against the direct inversion and the pseudo-sample form.
    #[arg(long)]
    pub verify: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub exhaustive_limit: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, env = "ALLOCRISK_SEED")]
    pub seed: Option<u64>,
    /// Skip the exhaustive check of whether the optimum is an equal split.
    #[arg(long)]
    pub no_optimum: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, env = "ALLOCRISK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Instances per sweep; the default sizes are 100, 50, 50 and 50.
    #[arg(long)]
    pub instances: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "ALLOCRISK_DATA_DIR", default_value = "sessions")]
    pub data_dir: PathBuf,
    /// Directory of static assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long, env = "ALLOCRISK_DATA_DIR", default_value = "sessions")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub op: SessionOp,
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SessionOp {
    Create {
        #[arg(long)]
        p: usize,
        #[arg(long, conflicts_with = "flat")]
        prior: Option<PathBuf>,
        #[arg(long)]
        flat: bool,
    },
    Batch {
        id: String,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        expected_revision: u64,
        /// Arm quota as `m_C,m_T`.
        #[arg(long)]
        quota: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        dry_run: bool,
    },
    Outcomes {
        id: String,
        #[arg(long)]
        batch: usize,
        /// Outcomes as comma-separated numbers.
        #[arg(long, allow_hyphen_values = true)]
        y: String,
        #[arg(long)]
        expected_revision: u64,
    },
    Show {
        id: String,
    },
}
