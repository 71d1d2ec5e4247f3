//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Command, RunConfig};
use crate::error::Error;
use crate::pipeline;

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while running a command.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "embednoise", version, about = "Train and apply a targeted adversarial noise decoder")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Self-supervised pre-training of the decoder.
    Pretrain(CommonArgs),
    /// Fine-tune a pre-trained decoder against a surrogate ensemble.
    Finetune(CommonArgs),
    /// Generate and export adversarial images.
    Attack(CommonArgs),
    /// Score exported images with retrieval and classification metrics.
    Eval(CommonArgs),
    /// Run the invariant suite (bundled toy config by default).
    Selftest(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, args) = match cli.command {
        Sub::Pretrain(a) => (Command::Pretrain, a),
        Sub::Finetune(a) => (Command::Finetune, a),
        Sub::Attack(a) => (Command::Attack, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::Selftest(a) => (Command::Selftest, a),
    };
    let config = match load_config(command, &args) {
        Ok(c) => c,
        Err(e) => {
            report_error(&e);
            return EXIT_USAGE;
        }
    };
    match pipeline::run(&config, command) {
        Ok((output, manifest)) => {
            println!("{}", output.summary);
            log::info!("manifest written to {}", manifest.display());
            0
        }
        Err(e) => {
            report_error(&e);
            EXIT_RUNTIME
        }
    }
}

fn load_config(command: Command, args: &CommonArgs) -> Result<RunConfig, Error> {
    let mut config = match (&args.config, command) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Command::Selftest) => RunConfig::toy(),
        (None, _) => return Err(Error::Config("--config <file> is required".into())),
    };
    config.command = Some(command);
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = std::env::current_dir()?.join(out);
    }
    Ok(config)
}

fn report_error(e: &Error) {
    eprintln!("error[{}]: {e}", e.category());
}
