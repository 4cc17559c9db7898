//! `fedpoison`: prepare datasets, run federated poisoning experiments and
//! sweeps, and evaluate backdoors against recommendation thresholds.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fedpoison", version, about)]
struct Cli {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; runs go to `<out>/<config name>`.
    #[arg(long, global = true, env = "FEDPOISON_OUT", default_value = "runs")]
    out: PathBuf,

    /// Worker threads for client computation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// -v for progress, -vv for per-round detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate or generate a dataset; writes normalized files, the id map
    /// and the split into `--out`.
    Prepare(PrepareArgs),
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run one experiment per value of an axis on a shared split.
    Sweep {
        config: PathBuf,
        /// attacker_fraction, pseudo_item_count or defense.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Success rates of a backdoored model against recommendation thresholds.
    ThresholdEval {
        clean_run: PathBuf,
        attacked_run: PathBuf,
        #[arg(long)]
        target_user: Option<usize>,
        /// Defaults to `<attacked_run>/threshold.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the lowest- or highest-ranked items of a clean run for one user,
    /// as an `[attack]` snippet.
    Targets {
        clean_run: PathBuf,
        #[arg(long)]
        target_user: usize,
        #[arg(long, default_value = "promote")]
        direction: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long, requires = "trust", conflicts_with = "synthetic")]
    ratings: Option<PathBuf>,
    #[arg(long, requires = "ratings")]
    trust: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    rating_min: f64,
    #[arg(long, default_value_t = 8.0)]
    rating_max: f64,
    /// Generator preset: filmtrust, small or default.
    #[arg(long)]
    synthetic: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(4);
        }
    }
    let result = match &cli.command {
        Command::Prepare(args) => commands::prepare(&cli, args),
        Command::Run { config } => commands::run(&cli, config),
        Command::Sweep { config, axis, values } => commands::sweep(&cli, config, axis, values),
        Command::ThresholdEval {
            clean_run,
            attacked_run,
            target_user,
            output,
        } => commands::threshold_eval(clean_run, attacked_run, *target_user, output.as_deref()),
        Command::Targets {
            clean_run,
            target_user,
            direction,
            count,
        } => commands::targets(clean_run, *target_user, direction, *count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
