//! `nomad`: learn key codebooks, encode key dumps, score queries and
//! benchmark lookup-based attention against exact attention.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nomad_core::evalbench::{BackendKind, LatencyConfig};
use nomad_core::kernel::force_scalar_from_env;
use nomad_core::{detect_fast_path, KernelPath};

mod commands;
mod error;

use commands::{BenchArgs, EvalArgs, LearnArgs, ScoreArgs};
use error::{CliError, CliResult, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "nomad",
    version,
    about = "Lookup-table attention scores on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a 16-centroid product-quantization codebook from a key dump.
    Learn {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long, default_value_t = 1)]
        d_sub: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Layer label stored in the codebook header.
        #[arg(long)]
        layer: Option<u32>,
        /// Head label stored in the codebook header.
        #[arg(long)]
        head: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a key dump into a blocked 4-bit code cache.
    Encode {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every query against every cached key; writes one CSV row per query.
    Score {
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value = "nomad", value_parser = parse_backend)]
        backend: BackendKind,
        /// Codebook file (nomad backend).
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Code cache file (nomad backend).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Float key dump (exact and pq8 backends).
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Seed for the pq8 codebook.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write scaled logits instead of softmax scores.
        #[arg(long)]
        logits: bool,
        /// Write per-query table step and logit error bound (nomad backend).
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        force_scalar: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time score computation and key caching per backend and context length.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        d_sub: usize,
        #[arg(long, value_delimiter = ',', default_value = "exact,pq8,nomad", value_parser = parse_backend)]
        backends: Vec<BackendKind>,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        reps: u64,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Independent heads timed concurrently, one per thread.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        threads: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Time each backend back to back instead of alternating per repetition.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        force_scalar: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare lookup scores with exact attention on a held-out key split.
    Eval {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1)]
        d_sub: usize,
        #[arg(long, default_value_t = 0.5, value_parser = parse_fraction)]
        learn_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force_scalar: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
        .map_err(|_| format!("unknown backend {s:?} (expected exact, pq8 or nomad)"))
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(format!("{f} is outside (0, 1)"))
    }
}

fn kernel_path(force_scalar: bool) -> KernelPath {
    detect_fast_path(force_scalar || force_scalar_from_env())
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Learn {
            keys,
            d_sub,
            seed,
            layer,
            head,
            out,
        } => commands::learn(&LearnArgs {
            keys,
            sub_dim: d_sub,
            seed,
            layer,
            head,
            out,
        }),
        Command::Encode {
            keys,
            codebook,
            out,
        } => commands::encode(&keys, &codebook, &out),
        Command::Score {
            query,
            backend,
            codebook,
            cache,
            keys,
            seed,
            logits,
            bounds,
            force_scalar,
            out,
        } => commands::score(&ScoreArgs {
            query,
            backend,
            codebook,
            cache,
            keys,
            seed,
            logits,
            bounds,
            path: kernel_path(force_scalar),
            out,
        }),
        Command::Bench {
            lengths,
            d,
            d_sub,
            backends,
            reps,
            warmup,
            threads,
            seed,
            sequential,
            force_scalar,
            out,
            json,
        } => {
            if lengths.contains(&0) {
                return Err(CliError::Usage("context lengths must be positive".into()));
            }
            let mut config = LatencyConfig::new(lengths, d, d_sub, kernel_path(force_scalar));
            config.backends = backends;
            config.repetitions = reps as usize;
            config.warmup = warmup;
            config.threads = threads as usize;
            config.seed = seed;
            config.interleave = !sequential;
            commands::bench(&BenchArgs { config, out, json })
        }
        Command::Eval {
            keys,
            queries,
            d_sub,
            learn_frac,
            seed,
            force_scalar,
            out,
        } => commands::eval(&EvalArgs {
            keys,
            queries,
            sub_dim: d_sub,
            learn_frac,
            seed,
            path: kernel_path(force_scalar),
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
