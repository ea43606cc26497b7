use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use persidskii_cli::{execute, Command};

/// Delay-dependent ISS certification, observers, identification and PMSM
/// benchmark scenarios driven by a single TOML config.
#[derive(Debug, Parser)]
#[command(name = "persidskii", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML config file (never modified).
    config: PathBuf,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 2 } else { 0 };
            return ExitCode::from(code);
        }
    };
    let level = match (args.quiet, args.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match execute(args.command, &args.config, args.output_dir.as_deref(), args.seed) {
        Ok(out) => {
            if let Some(msg) = &out.domain_failure {
                eprintln!("error: {msg}");
            } else if !args.quiet {
                println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            }
            for f in &out.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
