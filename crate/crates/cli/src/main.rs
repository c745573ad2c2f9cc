//! `cryorecon`: simulate datasets, reconstruct volumes, evaluate them.

mod commands;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use options::CliError;

const THREADS_ENV: &str = "CRYORECON_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cryorecon", version, about = "Ab initio cryo-EM reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const KEY_HELP: &str = "Any configuration key may be given as `--key value` (dashes and underscores are interchangeable); command-line values override the config file.";

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom and a synthetic particle dataset.
    #[command(after_help = KEY_HELP)]
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(allow_hyphen_values = true, num_args = 0.., trailing_var_arg = true, hide = true)]
        rest: Vec<String>,
    },
    /// Reconstruct a volume from a dataset manifest.
    #[command(after_help = KEY_HELP)]
    Reconstruct {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(allow_hyphen_values = true, num_args = 0.., trailing_var_arg = true, hide = true)]
        rest: Vec<String>,
    },
    /// Score a volume against held-out images.
    #[command(after_help = KEY_HELP)]
    Evaluate {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(allow_hyphen_values = true, num_args = 0.., trailing_var_arg = true, hide = true)]
        rest: Vec<String>,
    },
    /// Summarize a volume, stack or manifest.
    Info { path: PathBuf },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV}='{raw}' is not a worker count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Simulate { out, config, rest } => commands::simulate(out, config, &rest),
        Command::Reconstruct {
            manifest,
            out,
            config,
            resume,
            rest,
        } => commands::reconstruct(manifest, out, config, resume, &rest),
        Command::Evaluate {
            volume,
            manifest,
            out,
            config,
            rest,
        } => commands::evaluate(volume, manifest, out, config, &rest),
        Command::Info { path } => commands::info(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
