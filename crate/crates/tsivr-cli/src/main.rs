//! Command-line front end for the experiment harness.
//!
//! `tsivr run <config.toml>` executes the experiment a config file describes
//! and prints a one-line summary per artifact group. Exit codes: 0 on
//! success, 2 for configuration problems (unreadable or invalid config,
//! unknown environment, inconsistent sections), 3 for runtime failures
//! (diverging runs, degenerate slope data, I/O errors while writing).

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use tsivr::harness::{self, Algorithm, Outcome};

#[derive(Parser)]
#[command(name = "tsivr", version, about = "Policy optimization for general utilities of the occupancy measure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of independently seeded runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the output directory (takes precedence over the
        /// TSIVR_OUT_DIR environment variable and the config file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the algorithm: tsivr_pg or reinforce.
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match cli.command {
        Command::Run { config, seed, runs, out, algorithm } => {
            run(&config, seed, runs, out.as_deref(), algorithm)
        }
    });
}

fn run(
    config: &std::path::Path,
    seed: Option<u64>,
    runs: Option<usize>,
    out: Option<&std::path::Path>,
    algorithm: Option<Algorithm>,
) -> i32 {
    let mut cfg = match harness::load_config(config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        if r == 0 {
            eprintln!("error: --runs must be positive");
            return 2;
        }
        cfg.runs = r;
    }
    if let Some(a) = algorithm {
        cfg.algorithm = a;
    }
    cfg.out_dir = harness::resolve_out_dir(out, &cfg.out_dir);

    match harness::execute(&cfg) {
        Ok(Outcome::Run(outcome)) => {
            for (i, result) in outcome.results.iter().enumerate() {
                if let Some(last) = result.trace.rows.last() {
                    match last.util_exact {
                        Some(exact) => println!(
                            "run {i}: {} episodes, final utility estimate {:.6} (exact {exact:.6})",
                            last.episodes, last.util_est
                        ),
                        None => println!(
                            "run {i}: {} episodes, final utility estimate {:.6}",
                            last.episodes, last.util_est
                        ),
                    }
                }
            }
            println!("wrote {} file(s) to {}", outcome.files.len(), outcome.out_dir.display());
            0
        }
        Ok(Outcome::Slope(result)) => {
            for p in &result.points {
                println!(
                    "n = {}: mean return {:.6}, gap {:.6}{}",
                    p.n,
                    p.mean_return,
                    p.gap,
                    if p.used { "" } else { " (excluded)" }
                );
            }
            println!(
                "slope {:.4} over {} point(s); wrote {} file(s) to {}",
                result.slope,
                result.points.iter().filter(|p| p.used).count(),
                result.files.len(),
                result.out_dir.display()
            );
            0
        }
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            3
        }
    }
}
