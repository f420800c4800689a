//! `tailor` — optimize an instruction-tuning dataset with evolving agent
//! pairs.
//!
//! Exit codes: 0 success, 1 config/usage error, 2 resumable abort (a
//! checkpoint exists and `run --resume` will continue).

mod commands;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, LazyLock};

use clap::{Args, Parser, Subcommand};

static CANCEL_FLAG: LazyLock<Arc<AtomicBool>> =
    LazyLock::new(|| Arc::new(AtomicBool::new(false)));

extern "C" fn on_signal(_: libc::c_int) {
    CANCEL_FLAG.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    // Touch the flag before installing handlers so the handler only ever
    // performs an atomic store.
    LazyLock::force(&CANCEL_FLAG);
    unsafe {
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
    }
}

static OVERRIDE_HELP: LazyLock<String> = LazyLock::new(|| {
    let mut help = String::from(
        "Config override keys (use with --set key=value, or as environment \
         variables TAILOR_<KEY> with dots replaced by double underscores):\n",
    );
    for (key, description) in tailor_core::config::OVERRIDE_KEYS {
        help.push_str(&format!("  {key:32} {description}\n"));
    }
    help
});

#[derive(Parser)]
#[command(
    name = "tailor",
    version,
    about = "Optimize an instruction-tuning dataset with evolving agent pairs",
    after_long_help = &**OVERRIDE_HELP,
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a seed dataset.
    Run(RunArgs),
    /// Score an existing dataset with the dual-model difficulty metric.
    Score(ScoreArgs),
    /// Simulate the pair-evolution dynamics with synthetic agents.
    Simulate(SimulateArgs),
    /// Summarize a candidate log.
    Inspect(InspectArgs),
    /// Estimate total inference compute in MACs.
    EstimateCost(EstimateCostArgs),
    /// Report memory-bank statistics from a checkpoint.
    BankStats(BankStatsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key (repeatable); see --help for the key list.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for output artifacts; relative output paths are placed here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from the checkpoint written by an earlier run.
    #[arg(long)]
    resume: bool,
    /// Process at most this many seeds, then checkpoint and exit 2.
    #[arg(long)]
    max_seeds: Option<usize>,
    /// Override the master seed (same as --set master_seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Pipeline config naming the two scorer agents.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset to score (JSONL with id/instruction/response).
    #[arg(long)]
    input: PathBuf,
    /// Where to write the scored JSONL.
    #[arg(long)]
    output: PathBuf,
    /// Sort the output by descending dual-model diff.
    #[arg(long)]
    rank: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Synthetic profile set (TOML, repeatable for sweeps); defaults to
    /// one strong pair among nine weak ones.
    #[arg(long = "profiles")]
    profile_files: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    #[arg(long, default_value_t = 70_000)]
    iterations: u64,
    /// RNG seed (the effective seed is always printed).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations between trajectory rows.
    #[arg(long, default_value_t = 100)]
    stride: u64,
    /// Pairs drawn per iteration.
    #[arg(long, default_value_t = 1)]
    pairs_per_iteration: usize,
    /// Directory for trajectory.csv / sweep.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Run a sweep over --betas and --sweep-seeds instead of one run.
    #[arg(long)]
    sweep: bool,
    /// Comma-separated beta grid for --sweep.
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    /// Seeds per sweep cell.
    #[arg(long, default_value_t = 5)]
    sweep_seeds: u64,
}

#[derive(Args)]
struct InspectArgs {
    /// Candidate log to summarize.
    #[arg(long)]
    log: PathBuf,
    /// Re-derive winners from the log and compare with this output dataset.
    #[arg(long)]
    verify: Option<PathBuf>,
    /// Emit machine-readable JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EstimateCostArgs {
    /// MACs per sample: a number, or comma-separated `model=macs` entries.
    macs: String,
    /// Agent pairs invoked per sample.
    pairs: u64,
    /// Number of seed samples.
    samples: u64,
}

#[derive(Args)]
struct BankStatsArgs {
    /// Pipeline checkpoint holding the bank.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Emit machine-readable JSON.
    #[arg(long)]
    json: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    install_signal_handlers();
    let cancel = CANCEL_FLAG.clone();

    let code = match cli.command {
        Command::Run(args) => commands::run(args, cancel),
        Command::Score(args) => commands::score(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Inspect(args) => commands::inspect(args),
        Command::EstimateCost(args) => commands::estimate_cost(args),
        Command::BankStats(args) => commands::bank_stats(args),
    };
    std::process::exit(code);
}
