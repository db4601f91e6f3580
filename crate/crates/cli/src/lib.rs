//! Command-line orchestration for the polypgen pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error (including `--auto-mask` finding no proposal), 3 numerical failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use polypgen_core::{Error, Label};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    /// A core error raised while validating configuration.
    pub fn config(e: Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::Placement(_)
            | Error::Ingestion(_)
            | Error::State(_)
            | Error::Io { .. } => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "polypgen",
    version,
    about = "Lesion inpainting with retrieval-based mask proposals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Sectioned key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptArg {
    Polyp,
    Normal,
}

impl From<PromptArg> for Label {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::Polyp => Label::Polyp,
            PromptArg::Normal => Label::Normal,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the denoiser; writes a checkpoint and the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Convert every lesion image to a normal one and store its features.
    BuildDb {
        #[command(flatten)]
        common: Common,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Propose lesion regions for a query image.
    Propose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Defaults to `<output_dir>/<image id>.proposals.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inpaint an image under a mask, or under the top proposal.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Binary PGM; nonzero pixels are regenerated.
        #[arg(long, required_unless_present = "auto_mask", conflicts_with = "auto_mask")]
        mask: Option<PathBuf>,
        #[arg(long)]
        auto_mask: bool,
        #[arg(long, value_enum, default_value_t = PromptArg::Polyp)]
        prompt: PromptArg,
        #[arg(long)]
        k: Option<usize>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Defaults to `<output_dir>/<image id>.<prompt>.pgm`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated images (FID, IS) and detections (AP/P/R/F1).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/report.toml`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::Train { common, .. }
            | Command::BuildDb { common, .. }
            | Command::Propose { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

fn abs(cwd: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        cwd.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Loads the configuration and applies the flags that override it.
pub fn resolve_config(cmd: &Command, cwd: &Path) -> Result<RunConfig, CliError> {
    let common = cmd.common();
    let config_path = common.config.as_deref().map(|p| abs(cwd, p));
    let mut cfg = RunConfig::load(config_path.as_deref(), cwd)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    match cmd {
        Command::SynthData { count: Some(n), .. } => cfg.data.count = *n,
        Command::Train { steps: Some(s), .. } => cfg.train.steps = *s,
        Command::BuildDb { steps: Some(s), .. } => cfg.sampler.steps = *s,
        Command::Propose { k, .. } => {
            if let Some(k) = k {
                cfg.retrieval.k = *k;
            }
        }
        Command::Generate { k, steps, .. } => {
            if let Some(k) = k {
                cfg.retrieval.k = *k;
            }
            if let Some(s) = steps {
                cfg.sampler.steps = *s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and returns the path of its main output.
pub fn execute(cmd: &Command, cwd: &Path) -> Result<PathBuf, CliError> {
    let cfg = resolve_config(cmd, cwd)?;
    match cmd {
        Command::SynthData { .. } => commands::synth_data(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::BuildDb { .. } => commands::build_db(&cfg),
        Command::Propose { image, out, .. } => {
            commands::propose(&cfg, &abs(cwd, image), out.as_deref().map(|p| abs(cwd, p)).as_deref())
        }
        Command::Generate {
            image,
            mask,
            prompt,
            out,
            ..
        } => {
            let mask = match mask {
                Some(m) => commands::MaskSource::File(abs(cwd, m)),
                None => commands::MaskSource::Auto,
            };
            commands::generate(
                &cfg,
                &abs(cwd, image),
                &mask,
                (*prompt).into(),
                out.as_deref().map(|p| abs(cwd, p)).as_deref(),
            )
        }
        Command::Evaluate { report, .. } => {
            commands::evaluate(&cfg, report.as_deref().map(|p| abs(cwd, p)).as_deref()).map(|(p, _)| p)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout/stderr.
pub fn run<I, T>(args: I, cwd: &Path) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command, cwd) {
        Ok(out) => {
            println!("{}", out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("polypgen: {e}");
            e.code
        }
    }
}
