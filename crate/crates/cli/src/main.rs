//! `svr`: simulate motion-corrupted stacks, reconstruct them, evaluate the
//! result and run the built-in oracles.
//!
//! Failures print `{"error": {"code": ..., "message": ...}}` on stderr. Usage
//! errors exit with 2, everything else with 1.

mod manifest;
mod verbs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svr_core::pipeline::Mode;

/// Thread count for the data-parallel loops.
pub const THREADS_ENV: &str = "SVR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "svr", version, about = "Slice-to-volume reconstruction")]
struct Cli {
    /// Run every loop sequentially in a fixed order so repeated runs are
    /// bitwise identical.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Sample stacks from a phantom under random rigid motion.
    Simulate {
        /// Volume file, or one of ellipsoids, checker, shell.
        #[arg(long, default_value = "ellipsoids")]
        phantom: String,
        /// JSON simulation config, or `default` / `still`.
        #[arg(long, default_value = "default")]
        motion: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a volume from a directory of stacks.
    Reconstruct {
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "refine+svr")]
        mode: Mode,
        /// JSON reconstruction config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output volume path; poses, fields and the manifest go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction with the ground truth of a simulation.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a known-answer check, or `all`.
    Oracle {
        #[arg(long)]
        case: String,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: svr_core::Error| e.to_string())
}

fn error_json(code: &str, message: &str) -> String {
    serde_json::json!({ "error": { "code": code, "message": message } }).to_string()
}

fn configure_threads() -> Result<(), svr_core::Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| svr_core::Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| svr_core::Error::InvalidArgument(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let run = configure_threads().and_then(|()| {
        let exec = if cli.deterministic {
            svr_core::Exec::Sequential
        } else {
            svr_core::Exec::Parallel
        };
        let ctx = verbs::Context {
            args,
            deterministic: cli.deterministic,
            exec,
        };
        match cli.verb {
            Verb::Simulate { phantom, motion, seed, out } => verbs::simulate(&ctx, &phantom, &motion, seed, &out),
            Verb::Reconstruct { stacks, mode, config, out } => {
                verbs::reconstruct(&ctx, &stacks, mode, config.as_deref(), &out)
            }
            Verb::Evaluate { result, truth, out } => verbs::evaluate(&ctx, &result, &truth, &out),
            Verb::Oracle { case } => verbs::oracle(&case),
        }
    });
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(e.code(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
