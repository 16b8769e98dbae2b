//! `kbq` command-line driver.
//!
//! Every subcommand writes a [`RunManifest`] next to its outputs; `kbq replay`
//! re-executes a manifest and checks the output hashes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

pub use manifest::RunManifest;

/// Environment variable holding the default `--jobs` value.
pub const JOBS_ENV: &str = "KBQ_JOBS";

/// Failure classes and their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// Bad flags or configuration values.
    Usage = 2,
    /// Incompatible checkpoint or model state.
    State = 3,
    /// Unreadable or inconsistent input data.
    Data = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::Usage,
            error: e.into(),
        }
    }

    pub fn state(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::State,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::Data,
            error: e.into(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "kbq", version, about = "Weakly supervised KB query induction")]
pub struct Cli {
    /// Worker threads for per-dialog parallel work (0 = all cores).
    #[arg(long, global = true, env = JOBS_ENV, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic KB and dialog corpus.
    Synth(SynthArgs),
    /// Train a query predictor (and optionally a position classifier).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Dump systematic exploration results per dialog.
    Explore(ExploreArgs),
    /// Write heuristic query positions into a copy of a corpus.
    LabelPositions(LabelArgs),
    /// Re-run a recorded manifest and verify its outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth(_) => "synth",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Explore(_) => "explore",
            Self::LabelPositions(_) => "label-positions",
            Self::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON benchmark config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Share of each cuisine's rows carrying its correlated price.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub rows: Option<usize>,
    /// Training dialogs.
    #[arg(long)]
    pub dialogs: Option<usize>,
    #[arg(long)]
    pub val_dialogs: Option<usize>,
    #[arg(long)]
    pub test_dialogs: Option<usize>,
    #[arg(long)]
    pub heuristic_match: Option<f64>,
    #[arg(long)]
    pub overconstrained: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Positions {
    Gold,
    Heuristic,
    Predicted,
}

impl From<Positions> for kbq_core::PositionMode {
    fn from(p: Positions) -> Self {
        match p {
            Positions::Gold => Self::Gold,
            Positions::Heuristic => Self::Heuristic,
            Positions::Predicted => Self::Predicted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    Reinforce,
    Bs,
    Rbs,
    Mapo,
    Mbmapo,
    Sl,
    Slrl,
}

impl From<Estimator> for kbq_core::EstimatorKind {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Reinforce => Self::Reinforce,
            Estimator::Bs => Self::Bs,
            Estimator::Rbs => Self::Rbs,
            Estimator::Mapo => Self::Mapo,
            Estimator::Mbmapo => Self::Mbmapo,
            Estimator::Sl => Self::Sl,
            Estimator::Slrl => Self::Slrl,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Training corpus.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation corpus for early stopping.
    #[arg(long)]
    pub val: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub estimator: Option<Estimator>,
    #[arg(long, value_enum, default_value = "gold")]
    pub positions: Positions,
    /// Position classifier used with `--positions predicted`.
    #[arg(long)]
    pub position_model: Option<PathBuf>,
    /// Also fit a position classifier on heuristic labels.
    #[arg(long)]
    pub train_position: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha_h: Option<f64>,
    #[arg(long)]
    pub alpha_o: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// On-policy samples per context.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_clauses: Option<usize>,
    #[arg(long)]
    pub hash_bits: Option<u32>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "gold")]
    pub positions: Positions,
    /// Position classifier; required for `--positions predicted`, and
    /// enables position metrics when the corpus has gold positions.
    #[arg(long)]
    pub position_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "gold")]
    pub positions: Positions,
    #[arg(long, default_value_t = kbq_core::explore::DEFAULT_MAX_CLAUSES)]
    pub max_clauses: usize,
    /// Dump file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Labeled corpus copy.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Where a command's manifest goes: inside an output directory, or beside
/// an output file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

/// Runs a parsed command line; `argv` is recorded in the manifest.
pub fn run(cli: Cli, argv: Vec<String>) -> CmdResult {
    if cli.jobs > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let name = cli.command.name();
    match cli.command {
        Command::Replay(a) => manifest::replay(&a.manifest),
        cmd => {
            let started = std::time::Instant::now();
            let record = commands::execute(cmd)?;
            let m = RunManifest::new(name, argv, record, started.elapsed());
            m.write()
        }
    }
}

/// Parses `args` (including the program name), runs, and maps the outcome
/// to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Usage as u8 } else { 0 });
        }
    };
    match run(cli, args.into_iter().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit as u8)
        }
    }
}
