//! The `pato` command-line tool: every pipeline stage as a subcommand, driven
//! by a JSON config and a seed, writing a self-describing output directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod config;
mod dataset_io;
mod commands;
pub mod output;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("bad input: {0}")]
    Data(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Solver(_) => 6,
        }
    }
}

impl From<pato_core::Error> for CliError {
    fn from(e: pato_core::Error) -> Self {
        use pato_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidGrid(_) | E::InvalidParameter(_) => CliError::Config(msg),
            E::SizeMismatch { .. } | E::NonFinite { .. } | E::Checkpoint(_) | E::Format(_) => CliError::Data(msg),
            E::NoConvergence { .. }
            | E::Build { .. }
            | E::Optimization { .. }
            | E::Infeasible { .. }
            | E::Diverged { .. } => CliError::Solver(msg),
            E::Io(_) => CliError::Io(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pato", version, about = "Producibility-aware topology optimization for powder bed fusion")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap on worker threads for every internal pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `output_dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run topology optimization variants to build a design dataset.
    GenData(Common),
    /// Pick a diverse subset of a dataset by affinity propagation and rank-k exemplars.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Label dataset samples with the low-resolution build simulation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the crack-index surrogate on a labelled dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict the crack-index field of a density field.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Plain compliance topology optimization.
    Topo(Common),
    /// Producibility-aware optimization with a trained surrogate.
    Pato(Common),
    /// PATO runs over volume targets and weights.
    Sweep(Common),
    /// Build-simulate a density field (the no-go coupon by default) and compute crack indices.
    CrackIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Convert a raw field file to VTK.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Select { .. } => "select",
            Command::Eval { .. } => "eval",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Topo(_) => "topo",
            Command::Pato(_) => "pato",
            Command::Sweep(_) => "sweep",
            Command::CrackIndex { .. } => "crack-index",
            Command::Export { .. } => "export",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Topo(c) | Command::Pato(c) | Command::Sweep(c) => c,
            Command::Select { common, .. }
            | Command::Eval { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::CrackIndex { common, .. }
            | Command::Export { common, .. } => common,
        }
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => Err(CliError::Config(format!("thread pool: {e}"))),
        },
        None => execute(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let ctx = commands::Context { cfg: &cfg, out: &out, name: cmd.name() };
    match cmd {
        Command::GenData(_) => commands::gen_data(ctx),
        Command::Select { data, .. } => commands::select(ctx, data),
        Command::Eval { data, .. } => commands::eval(ctx, data),
        Command::Train { data, .. } => commands::train(ctx, data),
        Command::Predict { model, input, .. } => commands::predict(ctx, model, input),
        Command::Topo(_) => commands::topo(ctx),
        Command::Pato(_) => commands::pato(ctx),
        Command::Sweep(_) => commands::sweep(ctx),
        Command::CrackIndex { input, .. } => commands::crack_index(ctx, input.as_deref()),
        Command::Export { input, .. } => commands::export(ctx, input),
    }
}
