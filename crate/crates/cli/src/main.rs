//! `comln`: meta-training, gradient verification and benchmarks for
//! continuous-time meta-learning.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "comln", version, about = "Continuous-time meta-learning with constant-memory meta-gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key overrides, shared by the config-driven commands.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Memory,
    Runtime,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train and write metrics, checkpoint and resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Shorthand for `--set train.iterations=N`.
        #[arg(long)]
        iterations: Option<u64>,
        /// Shorthand for `--set train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare meta-gradients against finite differences and unrolled BPTT.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Flip the sign of one component before comparing.
        #[arg(long, hide = true, value_name = "COMPONENT")]
        inject_fault: Option<String>,
    },
    /// Peak tracked bytes and wall time across horizons.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "memory")]
        mode: BenchMode,
        /// Comma-separated `T=<t>` or `steps=<k>` tokens (100 steps per unit T).
        #[arg(long, default_value = "steps=10,steps=100,steps=1000,steps=10000")]
        horizons: String,
        /// BPTT runs predicted to exceed this many bytes are skipped.
        #[arg(long, default_value_t = 1 << 30)]
        budget_bytes: u64,
        /// Timed repetitions per row in runtime mode; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        repeats: u32,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward solve then backward reconstruction of a quadratic flow.
    AdjointDemo {
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        eigs: Vec<f64>,
        #[arg(long = "T", default_value_t = 5.0)]
        t: f64,
        #[arg(long, default_value_t = 1e-6)]
        rtol: f64,
        #[arg(long, default_value = "adjoint_trajectories.csv")]
        out: PathBuf,
    },
    /// Write synthetic episodes to an episode file.
    GenTasks {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set gen.count=N`.
        #[arg(long)]
        count: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { cfg, out, iterations, seed } => {
            let mut extra = Vec::new();
            if let Some(n) = iterations {
                extra.push(format!("train.iterations={n}"));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            commands::train(&cfg, &extra, &out)
        }
        Command::GradCheck { cfg, seeds, inject_fault } => commands::grad_check(&cfg, seeds, inject_fault.as_deref()),
        Command::Bench { cfg, mode, horizons, budget_bytes, repeats, out } => {
            commands::bench(&cfg, mode, &horizons, budget_bytes, repeats, out.as_deref())
        }
        Command::AdjointDemo { eigs, t, rtol, out } => commands::adjoint_demo(&eigs, t, rtol, &out),
        Command::GenTasks { cfg, out, count } => {
            let extra: Vec<String> = count.map(|c| format!("gen.count={c}")).into_iter().collect();
            commands::gen_tasks(&cfg, &extra, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
