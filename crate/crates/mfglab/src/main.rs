//! Thin command-line front end over the experiment runner.
//!
//! Exit status: 0 when the run succeeds and every check passes, 2 when the
//! run succeeds but a check fails, 1 on runtime failure, 64 on usage or
//! config errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfglab::config::{ExperimentConfig, ExperimentKind};
use mfglab::{experiment, Error};

#[derive(Parser)]
#[command(name = "mfglab", version, about = "Particle laboratory for potential mean field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config file.
    Run {
        /// Path to the config file.
        config: PathBuf,
        /// Output directory; overrides the config and the default
        /// `runs/<kind>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override; beats the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to MFGLAB_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List experiment kinds with their parameter keys and defaults.
    List,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors follow the sysexits convention.
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::List => {
            list();
            ExitCode::SUCCESS
        }
        Command::Run { config, out, seed, threads } => match run(config, out, seed, threads) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}

fn list() {
    println!("experiment kinds (config key \"kind\"):");
    for kind in ExperimentKind::ALL {
        println!("  {:<15} {}", kind.name(), kind.summary());
        println!("  {:<15} params: {}", "", kind.keys());
    }
    println!(
        "common blocks: model {{dimension, kinetic, potential}}, \
         data {{lambda, phi0, phi1, f_phi, f_phi1}}, output"
    );
}

fn resolve_threads(cli: Option<usize>) -> mfglab::Result<Option<usize>> {
    if cli.is_some() {
        return Ok(cli);
    }
    match std::env::var("MFGLAB_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| Error::config(format!("MFGLAB_THREADS must be an integer, got {raw:?}")))?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(
    path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> mfglab::Result<ExitCode> {
    if let Some(n) = resolve_threads(threads)? {
        if n == 0 {
            return Err(Error::config("thread count must be >= 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let config = ExperimentConfig::from_path(&path)?;
    let out_dir = config.output_dir(out.as_deref());
    let effective_seed = config.seed(seed);
    let manifest = experiment::run(&config, &out_dir, effective_seed)?;
    for c in &manifest.checks {
        println!("[{}] {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "{}: {} artifacts in {} ({:.2}s, seed {})",
        manifest.kind,
        manifest.artifacts.len(),
        out_dir.display(),
        manifest.wall_time_s,
        manifest.seed,
    );
    Ok(ExitCode::from(manifest.exit_code() as u8))
}
