//! `viable-mfg`: run the solvers and certificates from a JSON configuration.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};

mod commands;
mod config;
mod manifest;

use commands::{CliError, Outcome};
use config::ConfigError;
use manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    CheckInvariance,
    SolveHjb,
    SolveFp,
    SolveMfg,
    SimulateSde,
    Certify,
}

/// Exit codes: 0 ok, 2 configuration error, 3 solver error, 4 failed check or certificate.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    config: PathBuf,
    /// Overrides `output.dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var("MFG_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| ConfigError::Invalid {
        field: "MFG_THREADS".into(),
        message: format!("expected a positive integer, got {raw:?}"),
    })?;
    // Fails only if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let loaded = match config::load(&args.config) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cfg = &loaded.config;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let name = args.command.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    let mut manifest = Manifest::new(&name, &loaded.path, &loaded.raw, cfg.seed);
    let clock = Instant::now();
    let result = match args.command {
        Command::CheckInvariance => commands::check_invariance(cfg, &dir),
        Command::SolveHjb => commands::solve_hjb_cmd(cfg, &dir),
        Command::SolveFp => commands::solve_fp_cmd(cfg, &dir),
        Command::SolveMfg => commands::solve_mfg_cmd(cfg, &dir),
        Command::SimulateSde => commands::simulate_sde_cmd(cfg, &dir),
        Command::Certify => commands::certify(cfg, &dir),
    };
    manifest.wall_seconds = clock.elapsed().as_secs_f64();
    let code = match result {
        Ok(Outcome { passed, outputs }) => {
            manifest.outputs = outputs;
            if passed {
                0
            } else {
                eprintln!("{name}: check failed; see {}", dir.display());
                4
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    manifest.exit_code = code;
    if let Err(e) = manifest.write(&dir) {
        eprintln!("error: writing manifest: {e}");
        return ExitCode::from(CliError::Io(e).exit_code() as u8);
    }
    ExitCode::from(code as u8)
}
