use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use normdyn::experiment::{generate_to_dir, parse_config, run_experiment, run_theorem_suite, write_outputs};

#[derive(Parser)]
#[command(name = "normdyn", version, about = "Norm-dynamics experiments for scale-invariant tensor models")]
struct Cli {
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the theorem-check suite over all shipped model families.
    Suite {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Write the synthetic data described by a config file as DTF1.
    Gen { config: PathBuf },
}

const DEFAULT_OUT: &str = "normdyn-out";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn execute(cli: Cli) -> normdyn::Result<bool> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.or(cfg.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
            let outcome = run_experiment(&cfg, Some(&out))?;
            emit(&format!("{}outputs written to {}\n", outcome.summary(), out.display()));
            Ok(outcome.passed())
        }
        Command::Suite { seeds } => {
            let out = cli.out.unwrap_or_else(|| DEFAULT_OUT.into());
            let outcome = run_theorem_suite(cli.seed.unwrap_or(0), seeds)?.into_outcome();
            std::fs::create_dir_all(&out)?;
            write_outputs(&outcome, &out)?;
            emit(&format!("{}outputs written to {}\n", outcome.summary(), out.display()));
            Ok(outcome.passed())
        }
        Command::Gen { config } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.or(cfg.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
            let files = generate_to_dir(&cfg, &out)?;
            let mut text = format!(
                "target: {}\nclean:  {}\nmask:   {}\n",
                files.target.display(),
                files.clean.display(),
                files.mask.display()
            );
            for c in &files.cores {
                text.push_str(&format!("core:   {}\n", c.display()));
            }
            emit(&text);
            Ok(true)
        }
    }
}
