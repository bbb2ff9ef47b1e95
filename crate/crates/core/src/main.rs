use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sparse_ekp::cli::{compare::cmd_compare, run::cmd_run, selfcheck::cmd_selfcheck};

/// Experiment runner for sparsity-promoting ensemble Kalman inversion.
#[derive(Parser)]
#[command(name = "sparse-ekp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of an experiment config and persist the results.
    Run {
        /// Path to a config JSON, or a bundled name
        /// (linear_fig1, transport_tables, elliptic_tables).
        #[arg(long)]
        config: String,
        /// Override config entries, e.g. --set solver.r=1.0
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Replace the replicate seed list, e.g. --seed-list 1,2,3
        #[arg(long)]
        seed_list: Option<String>,
        /// Output directory (defaults to the config's output.directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize two or more results.json files side by side.
    Compare {
        /// results.json files produced by `run` on the same problem.
        #[arg(required = true, num_args = 2..)]
        results: Vec<String>,
        /// Directory for compare.csv and compare.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast oracle suite and report pass/fail per check.
    Selfcheck,
}

fn main() {
    env_logger::init();
    if let Ok(threads) = std::env::var("SPARSE_EKP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("thread pool is configured once at startup");
            }
            _ => {
                eprintln!("error: SPARSE_EKP_THREADS must be a positive integer");
                std::process::exit(1);
            }
        }
    }
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, sets, seed_list, out } => {
            cmd_run(&config, &sets, seed_list.as_deref(), out.as_deref())
        }
        Command::Compare { results, out } => cmd_compare(&results, out.as_deref()),
        Command::Selfcheck => cmd_selfcheck(),
    };
    std::process::exit(code);
}
