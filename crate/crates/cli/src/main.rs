//! `mma`: train, decode, evaluate and sweep monotonic multihead attention
//! models on synthetic tasks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "mma", version, about = "Monotonic multihead attention lab")]
struct Cli {
    /// Log progress (info level); `RUST_LOG` overrides.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configuration's step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Decode a token file with simultaneous greedy decoding.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sentence per line, space-separated token ids.
        #[arg(long)]
        input: PathBuf,
        /// Print the read/write action sequence of every sentence.
        #[arg(long)]
        stream: bool,
        /// Also write the delay traces to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Decode held-out pairs of the checkpoint's task and report quality and latency.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 512)]
        sentences: usize,
        /// Seed of the held-out set (defaults to the checkpoint's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-sentence delay traces to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a (lambda_avg x lambda_var) grid and write one CSV row per run.
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        lambda_avg: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        lambda_var: Vec<f64>,
    },
    /// Train a (decoder layers x heads) grid and write one CSV row per run.
    Ablate {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        heads: Vec<usize>,
        /// Defaults to the configuration's variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Compute AP, AL and DAL for every line of a delay-trace file.
    Metrics { trace: PathBuf },
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Explicit seed list, one run per seed and grid point.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["seed", "n_seeds"])]
    seeds: Option<Vec<u64>>,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    n_seeds: u64,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Held-out sentences decoded per run.
    #[arg(long, default_value_t = 200)]
    eval_sentences: usize,
    /// Keep only rows with DAL in `lo:hi` (inclusive).
    #[arg(long)]
    filter_dal: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train { config, out, seed, steps } => commands::train(&config, &out, seed, steps),
        Command::Decode { checkpoint, input, stream, trace } => {
            commands::decode(&checkpoint, &input, stream, trace.as_deref())
        }
        Command::Eval { checkpoint, sentences, seed, trace } => {
            commands::eval(&checkpoint, sentences, seed, trace.as_deref())
        }
        Command::Sweep { grid, lambda_avg, lambda_var } => grid_options(&grid).and_then(|opts| {
            let pairs: Vec<(f64, f64)> =
                lambda_avg.iter().flat_map(|&a| lambda_var.iter().map(move |&v| (a, v))).collect();
            commands::sweep(&opts, &pairs)
        }),
        Command::Ablate { grid, layers, heads, variant } => {
            grid_options(&grid).and_then(|opts| commands::ablate(&opts, &layers, &heads, variant.as_deref()))
        }
        Command::Metrics { trace } => commands::metrics(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn grid_options(g: &GridArgs) -> Result<commands::GridOptions, CliError> {
    let seeds = match &g.seeds {
        Some(s) if s.is_empty() => return Err(CliError::Usage("--seeds is empty".into())),
        Some(s) => s.clone(),
        None => (0..g.n_seeds.max(1)).map(|k| g.seed + k).collect(),
    };
    let filter_dal = match &g.filter_dal {
        None => None,
        Some(s) => {
            let (lo, hi) = s
                .split_once(':')
                .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)))
                .ok_or_else(|| CliError::Usage(format!("--filter-dal expects lo:hi, got {s:?}")))?;
            if lo > hi {
                return Err(CliError::Usage(format!("--filter-dal bounds reversed: {s}")));
            }
            Some((lo, hi))
        }
    };
    Ok(commands::GridOptions {
        config: g.config.clone(),
        out: g.out.clone(),
        seeds,
        jobs: g.jobs,
        eval_sentences: g.eval_sentences,
        filter_dal,
    })
}
