//! `sphereflow` — train a hypersphere flow density model, score embeddings
//! with negative log-likelihood uncertainty, and evaluate/curate with it.
//!
//! Commands: `train`, `score`, `eval`, `synth`, `curate`. Progress goes to
//! stderr; data goes to files. Exit codes: 0 success, 2 input errors,
//! 3 numeric failures, 4 internal errors — always with a single
//! machine-parsable `error: <category>: <message>` line on stderr.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sphereflow", version, about = "Density-based uncertainty for unit-sphere embeddings")]
struct Cli {
    /// Worker threads (0 = all cores); SPHEREFLOW_THREADS is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a conditioned vector field on an image/text pair file.
    Train {
        /// Key-value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Paired embeddings ("SFL1", optionally .gz).
        #[arg(long)]
        pairs: PathBuf,
        /// Output directory for checkpoint, metrics, and manifest.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        geometry: Option<String>,
        #[arg(long)]
        metrics_every: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Score embeddings with epistemic uncertainty.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled embeddings ("SFLE", optionally .gz); labels are ignored.
        #[arg(long)]
        embeddings: PathBuf,
        /// image, text, 0, or 1.
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
        /// Reverse-integration Euler steps.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Hutchinson probes per step.
        #[arg(long, default_value_t = 1)]
        probes: usize,
        /// hutchinson or exact.
        #[arg(long, default_value = "hutchinson")]
        divergence: String,
        /// gaussian or rademacher.
        #[arg(long, default_value = "gaussian")]
        probe_dist: String,
        /// riemannian, euclidean_uniform_base, or euclidean_gaussian_base;
        /// must match the training geometry.
        #[arg(long, default_value = "riemannian")]
        geometry: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute selective-classification or OOD metrics from a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Labeled embeddings aligned row-for-row with the score file.
        #[arg(long)]
        labels: PathBuf,
        /// selective or ood.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Rejection-grid step (selective mode).
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
    },
    /// Generate a synthetic labeled embedding file from a spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
        /// Emit an image/text pair file ("SFL1") instead of a labeled set.
        #[arg(long, default_value_t = false)]
        as_pairs: bool,
    },
    /// Rank sample ids by descending uncertainty.
    Curate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Fraction of samples to keep (ceil(fraction * n) ids).
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// CLI failure with its exit-code category.
pub struct CliError {
    pub category: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(category: &'static str, code: i32, message: impl Into<String>) -> Self {
        CliError {
            category,
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError::new("validation", 2, message)
    }
}

impl From<sphereflow_core::Error> for CliError {
    fn from(e: sphereflow_core::Error) -> Self {
        use sphereflow_core::Error as E;
        match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::new("input-not-found", 2, e.to_string())
            }
            E::Io(_) => CliError::new("io", 2, e.to_string()),
            E::Format { .. } => CliError::new("format", 2, e.to_string()),
            E::DimensionMismatch { .. } => CliError::new("shape-mismatch", 2, e.to_string()),
            E::NonFinite { .. } | E::BatchFailures { .. } => {
                CliError::new("numeric-failure", 3, e.to_string())
            }
            _ => CliError::new("validation", 2, e.to_string()),
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("SPHEREFLOW_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn dispatch(cli: Cli, threads: usize) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            pairs,
            out_dir,
            seed,
            total_steps,
            batch_size,
            learning_rate,
            geometry,
            metrics_every,
            checkpoint_every,
        } => commands::cmd_train(commands::TrainArgs {
            config,
            pairs,
            out_dir,
            seed,
            total_steps,
            batch_size,
            learning_rate,
            geometry,
            metrics_every,
            checkpoint_every,
            threads,
        }),
        Command::Score {
            checkpoint,
            embeddings,
            modality,
            out,
            steps,
            probes,
            divergence,
            probe_dist,
            geometry,
            seed,
        } => commands::cmd_score(commands::ScoreArgs {
            checkpoint,
            embeddings,
            modality,
            out,
            steps,
            probes,
            divergence,
            probe_dist,
            geometry,
            seed,
            threads,
        }),
        Command::Eval {
            scores,
            labels,
            mode,
            out_dir,
            grid_step,
        } => commands::cmd_eval(scores, labels, mode, out_dir, grid_step, threads),
        Command::Synth {
            spec,
            out,
            seed,
            as_pairs,
        } => commands::cmd_synth(spec, out, seed, as_pairs, threads),
        Command::Curate {
            scores,
            top_k,
            fraction,
            out,
        } => commands::cmd_curate(scores, top_k, fraction, out, threads),
    }
}

fn main() {
    let cli = Cli::parse();
    let threads = resolve_threads(cli.threads);

    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        if threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| CliError::new("internal", 4, format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli, threads))
        } else {
            dispatch(cli, threads)
        }
    }));

    match result {
        Ok(Ok(())) => {}
        Ok(Err(e)) => {
            eprintln!("error: {}: {}", e.category, e.message);
            std::process::exit(e.code);
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            eprintln!("error: internal: {msg}");
            std::process::exit(4);
        }
    }
}
