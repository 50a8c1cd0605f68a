use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdcgen_cli::commands;
use cdcgen_cli::{Direction, RunConfig, Suite};

/// Cross-domain conditional generation with aligned normalizing flows.
#[derive(Parser)]
#[command(name = "cdcgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated source/target pair and the target eval labels.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<run dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Phase 1: train both flows, critics and the domain classifier.
    TrainAlign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Phase 2: train the condition encoder against frozen flows.
    TrainCond {
        #[arg(long)]
        config: PathBuf,
        /// Alignment checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Map samples across domains.
    Translate {
        #[arg(long)]
        from: PathBuf,
        /// s2t or t2s.
        #[arg(long)]
        direction: Direction,
        /// CSV points or IDX images.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Draw target-domain samples of one class.
    Synthesize {
        /// Conditional checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint and write eval.csv / eval.txt.
    Eval {
        #[arg(long)]
        from: PathBuf,
        /// align, cond or all.
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Defaults to the config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<checkpoint dir>/eval_<suite>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Central-difference audit of every primitive and loss.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> cdcgen::Result<bool> {
    match cli.command {
        Command::GenData {
            config,
            out,
            overwrite,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = commands::gen_data(&cfg, out.as_deref(), overwrite)?;
            println!("wrote {}", dir.display());
        }
        Command::TrainAlign { config, overwrite } => {
            let cfg = RunConfig::load(&config)?;
            let ck = commands::train_align(&cfg, overwrite)?;
            println!("wrote {}", ck.display());
        }
        Command::TrainCond {
            config,
            from,
            overwrite,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ck = commands::train_cond(&cfg, &from, overwrite)?;
            println!("wrote {}", ck.display());
        }
        Command::Translate {
            from,
            direction,
            input,
            out,
            overwrite,
        } => {
            let p = commands::translate(&from, direction, &input, &out, overwrite)?;
            println!("wrote {}", p.display());
        }
        Command::Synthesize {
            from,
            class,
            n,
            seed,
            out,
            overwrite,
        } => {
            let p = commands::synthesize(&from, class, n, seed, &out, overwrite)?;
            println!("wrote {}", p.display());
        }
        Command::Eval {
            from,
            suite,
            config,
            out,
            overwrite,
        } => {
            let (report, dir) =
                commands::eval(&from, suite, config.as_deref(), out.as_deref(), overwrite)?;
            for (k, v) in &report.metrics {
                println!("{k:<30} {v:.6}");
            }
            println!("wrote {}", dir.display());
        }
        Command::GradCheck { seeds } => {
            let rows = commands::grad_check(seeds)?;
            let mut ok = true;
            for r in &rows {
                ok &= r.passed();
                println!(
                    "{:<4} {:<40} worst {:.3e} (seed {}, limit {:.0e})",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.name,
                    r.worst,
                    r.worst_seed,
                    r.kind.tolerance()
                );
            }
            println!(
                "{} of {} checks passed over {seeds} seeds",
                rows.iter().filter(|r| r.passed()).count(),
                rows.len()
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
