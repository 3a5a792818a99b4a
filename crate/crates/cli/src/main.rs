//! `trustlang`: featurize corpora, train and apply trait models, evaluate them
//! and run differential language analysis.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    Core(trustlang::Error),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Internal(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl From<trustlang::Error> for CliError {
    fn from(e: trustlang::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use trustlang::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidArgument(_)) => 1,
            CliError::Core(E::Io { .. } | E::Parse { .. } | E::Data(_)) => 2,
            CliError::Core(E::Serialization(_) | E::Internal(_)) | CliError::Internal(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trustlang", version, about = "Language-based assessment of trustfulness")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Override one config value, e.g. `--set eval.folds=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted trait.
    Synth {
        /// Destination directory (default: <out>/corpus).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Print the tokens of each input line, tab-separated.
    Tokenize {
        /// Texts to tokenize; standard input is read when none are given.
        text: Vec<String>,
    },
    /// Build user-level feature matrices.
    Featurize {
        #[arg(long)]
        messages: Option<PathBuf>,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Lexicon CSV; repeatable. Replaces `paths.lexica` when given.
        #[arg(long = "lexicon")]
        lexica: Vec<PathBuf>,
    },
    /// Fit a trait model on the featurized corpus.
    Train,
    /// Score users with a trained model.
    Predict {
        /// Model file (default: <out>/model/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Feature directory (default: <out>/features).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Run the evaluation settings.
    Eval {
        /// Settings to run; replaces `eval.settings` when given.
        #[arg(long = "setting")]
        settings: Vec<trustlang::eval::Setting>,
    },
    /// Correlate individual features with the trait.
    Dla {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sign: Option<trustlang::dla::Sign>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.set)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.paths.out = out.clone();
    }
    if let Some(jobs) = g.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { dest } => commands::synth(&mut cfg, dest),
        Command::Tokenize { text } => commands::tokenize(&text),
        Command::Featurize {
            messages,
            responses,
            lexica,
        } => {
            if let Some(m) = messages {
                cfg.paths.messages = m;
            }
            if let Some(r) = responses {
                cfg.paths.responses = r;
            }
            if !lexica.is_empty() {
                cfg.paths.lexica = lexica;
            }
            commands::featurize(&cfg)
        }
        Command::Train => commands::train(&cfg),
        Command::Predict { model, features } => commands::predict(&cfg, model, features),
        Command::Eval { settings } => {
            if !settings.is_empty() {
                cfg.eval.settings = settings;
            }
            commands::eval(&cfg)
        }
        Command::Dla { alpha, k, sign } => {
            if let Some(a) = alpha {
                cfg.dla.alpha = a;
            }
            if let Some(k) = k {
                cfg.dla.k = k;
            }
            if let Some(s) = sign {
                cfg.dla.sign = s;
            }
            cfg.validate()?;
            commands::dla(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
