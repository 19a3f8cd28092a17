//! Run configuration: a TOML file mirroring the library's config structs.
//! Every key has a default, unknown keys are rejected, and a SHA-256 hash of
//! the canonically re-serialized config is recorded in run artifacts so any
//! output can be traced back to the exact settings that produced it.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqdn_core::alignment::AlignConfig;
use seqdn_core::dataio::{LogFormat, PreprocessConfig};
use seqdn_core::denoiser::GateConfig;
use seqdn_core::encoder::EncoderDims;
use seqdn_core::eval::SyntheticSpec;
use seqdn_core::trainer::TrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub semantic: SemanticSection,
    pub align: AlignSection,
    pub gate: GateSection,
    pub train: TrainSection,
    pub synth: SynthSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Interaction log path; empty means "must be given on the command line".
    pub input: String,
    /// `tsv` (user<TAB>item<TAB>timestamp) or `movielens` (u.data layout).
    pub format: String,
    pub k_core: usize,
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { input: String::new(), format: "tsv".into(), k_core: 5, max_len: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticSection {
    /// SEMB file with item vectors; empty selects pseudo-random embeddings.
    pub emb: String,
    /// Dimension used when generating pseudo-random embeddings.
    pub dim: usize,
    pub pseudo_seed: u64,
}

impl Default for SemanticSection {
    fn default() -> Self {
        SemanticSection { emb: String::new(), dim: 16, pseudo_seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub tau: f64,
}

impl Default for AlignSection {
    fn default() -> Self {
        AlignSection { tau: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub theta: f64,
    pub tau_gumbel: f64,
    pub hard: bool,
    pub warmup_epochs: usize,
    pub tau_anneal_to: Option<f64>,
}

impl Default for GateSection {
    fn default() -> Self {
        let g = GateConfig::<f64>::default();
        GateSection {
            theta: g.theta,
            tau_gumbel: g.tau_gumbel,
            hard: g.hard,
            warmup_epochs: g.warmup_epochs,
            tau_anneal_to: g.tau_anneal_to,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Explicit seed; when absent the CLI falls back to `--seed`, then the
    /// `SEQDN_SEED` environment variable, then 42.
    pub seed: Option<u64>,
    pub max_len: usize,
    pub w_ce: f64,
    pub w_info: f64,
    pub w_recon: f64,
    pub disable_info: bool,
    pub disable_recon: bool,
    pub long_only: bool,
    pub short_only: bool,
    pub d_item: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::<f64>::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: None,
            max_len: t.max_len,
            w_ce: t.w_ce,
            w_info: t.w_info,
            w_recon: t.w_recon,
            disable_info: t.disable_info,
            disable_recon: t.disable_recon,
            long_only: t.long_only,
            short_only: t.short_only,
            d_item: t.dims.d_item,
            d_hidden: t.dims.d_hidden,
            n_layers: t.dims.n_layers,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise_rate: f64,
    pub sem_dim: usize,
    pub sem_noise: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SynthSection {
            n_users: s.n_users,
            n_items: s.n_items,
            n_clusters: s.n_clusters,
            len_min: s.len_min,
            len_max: s.len_max,
            noise_rate: s.noise_rate,
            sem_dim: s.sem_dim,
            sem_noise: s.sem_noise,
            seed: s.seed,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; `None` yields pure defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Canonical serialization: the hash input, independent of formatting or
    /// key order in the source file.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig { k_core: self.data.k_core, max_len: self.data.max_len }
    }

    pub fn log_format(&self) -> Result<LogFormat> {
        parse_format(&self.data.format)
    }

    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_users: self.synth.n_users,
            n_items: self.synth.n_items,
            n_clusters: self.synth.n_clusters,
            len_min: self.synth.len_min,
            len_max: self.synth.len_max,
            noise_rate: self.synth.noise_rate,
            sem_dim: self.synth.sem_dim,
            sem_noise: self.synth.sem_noise,
            seed: self.synth.seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig<f64> {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            max_epochs: self.train.max_epochs,
            seed,
            max_len: self.train.max_len,
            w_ce: self.train.w_ce,
            w_info: self.train.w_info,
            w_recon: self.train.w_recon,
            disable_info: self.train.disable_info,
            disable_recon: self.train.disable_recon,
            long_only: self.train.long_only,
            short_only: self.train.short_only,
            dims: EncoderDims {
                d_item: self.train.d_item,
                d_hidden: self.train.d_hidden,
                n_layers: self.train.n_layers,
            },
            gate: GateConfig {
                theta: self.gate.theta,
                tau_gumbel: self.gate.tau_gumbel,
                hard: self.gate.hard,
                warmup_epochs: self.gate.warmup_epochs,
                tau_anneal_to: self.gate.tau_anneal_to,
                ..GateConfig::default()
            },
            align: AlignConfig { tau: self.align.tau },
        }
    }
}

pub fn parse_format(s: &str) -> Result<LogFormat> {
    match s.to_ascii_lowercase().as_str() {
        "tsv" => Ok(LogFormat::Tsv),
        "movielens" => Ok(LogFormat::MovieLens),
        other => bail!("unknown log format {other:?}; expected tsv or movielens"),
    }
}

/// Seed precedence: command-line flag, then config, then `SEQDN_SEED`, then 42.
pub fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = cfg.train.seed {
        return Ok(s);
    }
    match std::env::var("SEQDN_SEED") {
        Ok(v) => v.parse().with_context(|| format!("SEQDN_SEED is set but not an integer: {v:?}")),
        Err(_) => Ok(42),
    }
}
