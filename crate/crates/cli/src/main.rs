//! `seqdn` — train and probe a two-stage denoising recommender on interaction
//! logs: data preparation, item-vector management, synthetic benchmarks with
//! planted noise, training, evaluation, artifact reports, and gate-threshold
//! sweeps. Exit codes: 0 success, 2 input error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    cmd_embed, cmd_eval, cmd_prepare, cmd_report, cmd_sweep, cmd_synth, cmd_train, EmbedArgs,
    EvalArgs, PrepareArgs, ReportArgs, SweepArgs, SynthArgs,
};
use config::{resolve_seed, RunConfig};
use seqdn_core::trainer::TrainError;

#[derive(Parser)]
#[command(
    name = "seqdn",
    version,
    about = "Denoising sequential recommender laboratory",
    propagate_version = true
)]
struct Cli {
    /// TOML run config; every key has a default, unknown keys are rejected
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter an interaction log, build the split, and write a data manifest
    Prepare {
        /// Interaction log to ingest [default: [data].input from the config]
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Log layout: tsv or movielens [default: [data].format, tsv]
        #[arg(long, value_name = "NAME")]
        format: Option<String>,
        /// Output directory for filtered.tsv, split.csv, stats.txt
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Iterative user/item degree floor [default: [data].k_core, 5]
        #[arg(long, value_name = "K")]
        k_core: Option<usize>,
        /// Window length kept per user [default: [data].max_len, 32]
        #[arg(long, value_name = "N")]
        max_len: Option<usize>,
    },
    /// Generate pseudo-random item vectors or import an existing SEMB file
    Embed {
        /// Interaction log defining the item catalog
        #[arg(long, value_name = "FILE")]
        catalog: PathBuf,
        /// pseudo (deterministic random vectors) or import (validate a SEMB file)
        #[arg(long, value_name = "MODE", default_value = "pseudo")]
        mode: String,
        /// Vector dimension [default: [semantic].dim, 16]
        #[arg(long, value_name = "D")]
        dim: Option<usize>,
        /// Seed for pseudo mode [default: [semantic].pseudo_seed, 7]
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Source SEMB file (import mode only)
        #[arg(long, value_name = "FILE")]
        emb: Option<PathBuf>,
        /// Output SEMB file (text layout)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Generate the synthetic benchmark: clustered interactions with planted noise
    Synth {
        /// Output directory for interactions.tsv, labels.tsv, semantic.semb
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of users [default: [synth].n_users, 500]
        #[arg(long, value_name = "N")]
        users: Option<usize>,
        /// Number of items [default: [synth].n_items, 300]
        #[arg(long, value_name = "N")]
        items: Option<usize>,
        /// Number of interest clusters [default: [synth].n_clusters, 5]
        #[arg(long, value_name = "N")]
        clusters: Option<usize>,
        /// Shortest sequence [default: [synth].len_min, 20]
        #[arg(long, value_name = "N")]
        len_min: Option<usize>,
        /// Longest sequence [default: [synth].len_max, 40]
        #[arg(long, value_name = "N")]
        len_max: Option<usize>,
        /// Fraction of positions replaced by cross-cluster noise [default: [synth].noise_rate, 0.2]
        #[arg(long, value_name = "RHO")]
        noise_rate: Option<f64>,
        /// Item-vector dimension [default: [synth].sem_dim, 16]
        #[arg(long, value_name = "D")]
        sem_dim: Option<usize>,
        /// Perturbation around cluster centroids [default: [synth].sem_noise, 0.1]
        #[arg(long, value_name = "S")]
        sem_noise: Option<f64>,
        /// Generator seed [default: [synth].seed, 42]
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
    },
    /// Train on the configured data and write checkpoint, history, and masks
    Train {
        /// Output directory for model.ckpt, history.csv, masks.csv, run.txt
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Seed override; falls back to [train].seed, then $SEQDN_SEED, then 42
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the test split and write a metrics report
    Eval {
        /// Checkpoint written by `seqdn train`
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Interaction log to evaluate on [default: [data].input from the config]
        #[arg(long, value_name = "FILE")]
        split: Option<PathBuf>,
        /// SEMB item vectors [default: [semantic].emb, else pseudo-random]
        #[arg(long, value_name = "FILE")]
        emb: Option<PathBuf>,
        /// Write the report here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Summarize run artifacts: history overview and noise-recovery table
    Report {
        /// history.csv from a training run
        #[arg(long, value_name = "FILE")]
        history: Option<PathBuf>,
        /// masks.csv from a training run (requires --labels)
        #[arg(long, value_name = "FILE")]
        masks: Option<PathBuf>,
        /// Ground-truth noise labels (labels.tsv from `seqdn synth`)
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Write the report here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train across gate thresholds {-0.9,-0.5,-0.1,0.3,0.7,0.9} and write a CSV
    Sweep {
        /// Output CSV of (theta, HR@5, NDCG@5)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Comma-separated training seeds [default: 1,2,3]
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// Epoch cap override for the sweep arms [default: [train].max_epochs]
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Prepare { input, format, out, k_core, max_len } => {
            cmd_prepare(cfg, PrepareArgs { input, format, out, k_core, max_len })
        }
        Cmd::Embed { catalog, mode, dim, seed, emb, out } => {
            cmd_embed(cfg, EmbedArgs { catalog, mode, dim, seed, emb, out })
        }
        Cmd::Synth {
            out,
            users,
            items,
            clusters,
            len_min,
            len_max,
            noise_rate,
            sem_dim,
            sem_noise,
            seed,
        } => cmd_synth(
            cfg,
            SynthArgs {
                out,
                users,
                items,
                clusters,
                len_min,
                len_max,
                noise_rate,
                sem_dim,
                sem_noise,
                seed,
            },
        ),
        Cmd::Train { out_dir, seed } => {
            let seed = resolve_seed(seed, &cfg)?;
            cmd_train(cfg, out_dir, seed)
        }
        Cmd::Eval { checkpoint, split, emb, out } => {
            cmd_eval(cfg, EvalArgs { checkpoint, split, emb, out })
        }
        Cmd::Report { history, masks, labels, out } => {
            cmd_report(ReportArgs { history, masks, labels, out })
        }
        Cmd::Sweep { out, seeds, epochs } => cmd_sweep(cfg, SweepArgs { out, seeds, epochs }),
    }
}

/// Numerical failures (non-finite losses) exit 3; everything else is an
/// input/environment problem and exits 2.
fn classify(err: &anyhow::Error) -> u8 {
    let diverged = err
        .chain()
        .any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. })));
    if diverged {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}
