//! Leave-one-out ranking metrics over the full catalog, popularity-bucket
//! breakdowns, a labeled synthetic noise benchmark, and noise-recovery
//! scoring of keep/drop masks.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::alignment::InterestBundle;
use crate::dataio::{Catalog, Interaction, SplitUser};
use crate::denoiser::{combined_score, item_scores, user_gate, GateConfig, ScoreMode};
use crate::encoder::{gru_forward, gru_forward_batch, score_items};
use crate::graph::{Graph, Var};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::semantic::{prefix_embedding, project, PrefixProvider, SemanticError, SemanticTable};
use crate::tensor::Tensor;
use crate::trainer::ModelParams;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("popularity buckets need at least {need} distinct items, found {have}")]
    TooFewItems { have: usize, need: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

/// One leave-one-out evaluation case: rank `target` given `prefix`.
#[derive(Clone, Debug)]
pub struct EvalExample {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Anything that can score the whole catalog for a user: index j of the
/// returned vector is the score of item j+1.
pub trait Scorer<F: Scalar> {
    fn scores(&mut self, user: usize, prefix: &[usize]) -> Result<Vec<F>, EvalError>;
}

/// Deterministic reduction: pairwise (tree) summation in input order keeps
/// averages bit-stable regardless of how callers later parallelize scoring.
pub fn pairwise_sum<F: Scalar>(xs: &[F]) -> F {
    match xs.len() {
        0 => F::zero(),
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    pairwise_sum(xs) / F::from_f64_lit(xs.len() as f64)
}

/// 1-based rank of the target among all items; ties broken by ascending item
/// index (an equal-scoring item with a smaller index ranks ahead).
pub fn rank_of<F: Scalar>(scores: &[F], target: usize) -> usize {
    assert!(target >= 1, "rank_of: padding target is not rankable");
    let ti = target - 1;
    assert!(ti < scores.len(), "rank_of: target {target} beyond catalog of {}", scores.len());
    let ts = scores[ti];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && j < ti) {
            rank += 1;
        }
    }
    rank
}

pub fn hr_at<F: Scalar>(rank: usize, k: usize) -> F {
    if rank <= k {
        F::one()
    } else {
        F::zero()
    }
}

/// Single-relevant-item form: 1/log2(rank+1) inside the cutoff, else 0.
pub fn ndcg_at<F: Scalar>(rank: usize, k: usize) -> F {
    if rank <= k {
        F::one() / F::from_f64_lit((rank as f64 + 1.0).log2())
    } else {
        F::zero()
    }
}

/// Item index (1-based) → popularity bucket (0 = hottest).
pub struct BucketMap {
    pub bucket_of: Vec<usize>,
    pub n_buckets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BucketMode {
    /// Buckets hold (as nearly as possible) equal numbers of items.
    Items,
    /// Buckets hold (as nearly as possible) equal training interaction mass.
    Interactions,
}

/// Splits items by descending training frequency (ties: ascending index)
/// into `n_buckets` groups. `counts` is indexed by item index; slot 0 is the
/// padding slot and is ignored.
pub fn popularity_buckets(
    counts: &[u64],
    n_buckets: usize,
    mode: BucketMode,
) -> Result<BucketMap, EvalError> {
    let n_items = counts.len().saturating_sub(1);
    if n_items < n_buckets {
        return Err(EvalError::TooFewItems { have: n_items, need: n_buckets });
    }
    let mut order: Vec<usize> = (1..=n_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let mut bucket_of = vec![usize::MAX; n_items + 1];
    let total: u64 = order.iter().map(|&i| counts[i]).sum();
    if mode == BucketMode::Items || total == 0 {
        // base size n/b with the remainder going to the hottest buckets
        let base = n_items / n_buckets;
        let rem = n_items % n_buckets;
        let mut pos = 0;
        for b in 0..n_buckets {
            let size = base + usize::from(b < rem);
            for &i in &order[pos..pos + size] {
                bucket_of[i] = b;
            }
            pos += size;
        }
    } else {
        // greedy mass fill: advance to the next bucket once the running
        // mass crosses the bucket's share, never leaving a bucket empty
        let mut b = 0usize;
        let mut cum = 0u64;
        for (k, &i) in order.iter().enumerate() {
            bucket_of[i] = b;
            cum += counts[i];
            let boundary = (b as u64 + 1) * total;
            let remaining_items = n_items - k - 1;
            let remaining_buckets = n_buckets - b - 1;
            if b + 1 < n_buckets
                && cum * n_buckets as u64 >= boundary
                && remaining_items >= remaining_buckets
            {
                b += 1;
            }
        }
    }
    Ok(BucketMap { bucket_of, n_buckets })
}

/// Item occurrence counts over training sequences only.
pub fn train_counts(split: &[SplitUser], n_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_items + 1];
    for s in split {
        for &it in &s.train {
            counts[it] += 1;
        }
    }
    counts
}

/// Precision/recall/F1 of flagged-as-noise versus ground truth; any ratio
/// with a zero denominator is undefined (None), never silently 0.
#[derive(Clone, Copy, Debug)]
pub struct NoiseRecovery<F: Scalar> {
    pub precision: Option<F>,
    pub recall: Option<F>,
    pub f1: Option<F>,
    pub n_flagged: usize,
    pub n_noise: usize,
    pub n_hits: usize,
}

pub fn noise_recovery<F: Scalar>(flagged: &[bool], noise: &[bool]) -> NoiseRecovery<F> {
    assert_eq!(flagged.len(), noise.len(), "noise_recovery: {} flags vs {} labels", flagged.len(), noise.len());
    let n_flagged = flagged.iter().filter(|&&f| f).count();
    let n_noise = noise.iter().filter(|&&f| f).count();
    let n_hits = flagged.iter().zip(noise).filter(|(&f, &n)| f && n).count();
    let ratio = |num: usize, den: usize| -> Option<F> {
        (den > 0).then(|| F::from_f64_lit(num as f64 / den as f64))
    };
    let precision = ratio(n_hits, n_flagged);
    let recall = ratio(n_hits, n_noise);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > F::zero() => {
            Some(F::from_f64_lit(2.0) * p * r / (p + r))
        }
        _ => None,
    };
    NoiseRecovery { precision, recall, f1, n_flagged, n_noise, n_hits }
}

#[derive(Clone, Debug)]
pub struct MetricsReport<F: Scalar> {
    pub n_users: usize,
    /// HR at K = 5, 10, 20.
    pub hr: (F, F, F),
    /// NDCG at K = 5, 10, 20.
    pub ndcg: (F, F, F),
    /// Mean NDCG@5 of users whose target falls in each bucket; None when a
    /// bucket saw no test user.
    pub bucket_ndcg5: Vec<Option<F>>,
    pub bucket_counts: Vec<usize>,
    pub denoise_ratio: Option<F>,
    pub noise: Option<NoiseRecovery<F>>,
}

fn fmt_opt<F: Scalar>(v: Option<F>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

impl<F: Scalar> MetricsReport<F> {
    /// Flat `key value` text block, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_users {}\n", self.n_users));
        s.push_str(&format!("HR@5 {}\nHR@10 {}\nHR@20 {}\n", self.hr.0, self.hr.1, self.hr.2));
        s.push_str(&format!(
            "NDCG@5 {}\nNDCG@10 {}\nNDCG@20 {}\n",
            self.ndcg.0, self.ndcg.1, self.ndcg.2
        ));
        for (b, (v, c)) in self.bucket_ndcg5.iter().zip(&self.bucket_counts).enumerate() {
            s.push_str(&format!("bucket{}_NDCG@5 {}\n", b + 1, fmt_opt(*v)));
            s.push_str(&format!("bucket{}_count {}\n", b + 1, c));
        }
        if let Some(r) = self.denoise_ratio {
            s.push_str(&format!("denoise_ratio {r}\n"));
        }
        if let Some(n) = &self.noise {
            s.push_str(&format!("noise_precision {}\n", fmt_opt(n.precision)));
            s.push_str(&format!("noise_recall {}\n", fmt_opt(n.recall)));
            s.push_str(&format!("noise_f1 {}\n", fmt_opt(n.f1)));
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "n_users,HR@5,HR@10,HR@20,NDCG@5,NDCG@10,NDCG@20,denoise_ratio,noise_precision,noise_recall,noise_f1"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.n_users,
            self.hr.0,
            self.hr.1,
            self.hr.2,
            self.ndcg.0,
            self.ndcg.1,
            self.ndcg.2,
            fmt_opt(self.denoise_ratio),
            fmt_opt(self.noise.as_ref().and_then(|n| n.precision)),
            fmt_opt(self.noise.as_ref().and_then(|n| n.recall)),
            fmt_opt(self.noise.as_ref().and_then(|n| n.f1)),
        )
    }

    /// Per-bucket CSV: `bucket,count,NDCG@5`.
    pub fn bucket_csv(&self) -> String {
        let mut s = String::from("bucket,count,NDCG@5\n");
        for (b, (v, c)) in self.bucket_ndcg5.iter().zip(&self.bucket_counts).enumerate() {
            s.push_str(&format!("{},{},{}\n", b + 1, c, fmt_opt(*v)));
        }
        s
    }
}

/// Ranks every example over the full catalog; metrics averaged in user order
/// with pairwise summation. Optional buckets split NDCG@5 by target bucket.
pub fn evaluate_full<F: Scalar, S: Scorer<F>>(
    scorer: &mut S,
    examples: &[EvalExample],
    n_items: usize,
    buckets: Option<&BucketMap>,
) -> Result<MetricsReport<F>, EvalError> {
    let nb = buckets.map_or(0, |b| b.n_buckets);
    let mut hr5 = Vec::with_capacity(examples.len());
    let mut hr10 = Vec::with_capacity(examples.len());
    let mut hr20 = Vec::with_capacity(examples.len());
    let mut nd5 = Vec::with_capacity(examples.len());
    let mut nd10 = Vec::with_capacity(examples.len());
    let mut nd20 = Vec::with_capacity(examples.len());
    let mut per_bucket: Vec<Vec<F>> = vec![Vec::new(); nb];

    for e in examples {
        let scores = scorer.scores(e.user, &e.prefix)?;
        assert_eq!(scores.len(), n_items, "scorer returned {} scores for {n_items} items", scores.len());
        let rank = rank_of(&scores, e.target);
        hr5.push(hr_at(rank, 5));
        hr10.push(hr_at(rank, 10));
        hr20.push(hr_at(rank, 20));
        nd5.push(ndcg_at(rank, 5));
        nd10.push(ndcg_at(rank, 10));
        nd20.push(ndcg_at(rank, 20));
        if let Some(map) = buckets {
            let b = map.bucket_of[e.target];
            per_bucket[b].push(ndcg_at(rank, 5));
        }
    }

    let bucket_counts: Vec<usize> = per_bucket.iter().map(Vec::len).collect();
    let bucket_ndcg5: Vec<Option<F>> = per_bucket
        .iter()
        .map(|v| (!v.is_empty()).then(|| mean(v)))
        .collect();

    Ok(MetricsReport {
        n_users: examples.len(),
        hr: (mean(&hr5), mean(&hr10), mean(&hr20)),
        ndcg: (mean(&nd5), mean(&nd10), mean(&nd20)),
        bucket_ndcg5,
        bucket_counts,
        denoise_ratio: None,
        noise: None,
    })
}

pub fn evaluate<F: Scalar, S: Scorer<F>>(
    scorer: &mut S,
    examples: &[EvalExample],
    n_items: usize,
) -> Result<MetricsReport<F>, EvalError> {
    evaluate_full(scorer, examples, n_items, None)
}

/// Scores users with the trained model. When `denoise` is set, gated users
/// get the noise-free mask (no Gumbel noise, keep iff score > 0) applied to
/// their input before a second encoding pass — evaluation stays rng-free.
pub struct ModelScorer<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub params: &'a ModelParams,
    pub table: &'a SemanticTable<F>,
    pub provider: &'a PrefixProvider<F>,
    pub catalog: &'a Catalog,
    pub gate: GateConfig<F>,
    pub mode: ScoreMode,
    pub denoise: bool,
}

/// GRU + semantic forward for one user window; returns the interest bundle
/// whose h list aliases the encoder states.
fn user_bundle<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &ModelParams,
    table: &SemanticTable<F>,
    provider: &PrefixProvider<F>,
    catalog: &Catalog,
    user: usize,
    window: &[usize],
) -> Result<InterestBundle, EvalError> {
    let out = gru_forward(g, store, &params.enc, window, None);
    let user_id = catalog.user_id(user);
    let mut flat = Vec::with_capacity(window.len() * params.sem_dim);
    for t in 1..=window.len() {
        flat.extend(prefix_embedding(provider, user_id, &window[..t], table)?);
    }
    let raw = g.constant(Tensor::matrix(window.len(), params.sem_dim, flat));
    let sem_w = g.param(store, params.sem_w);
    let sem_b = g.param(store, params.sem_b);
    let proj = project(g, raw, sem_w, sem_b);
    let l: Vec<Var> = (0..window.len()).map(|t| g.slice_rows(proj, t, 1)).collect();
    let e1 = l[window.len() - 1];
    Ok(InterestBundle { e1, e2: out.e2, l, h: out.h })
}

/// Evaluation-time mask: all-ones unless the user passes the gate, in which
/// case position t keeps iff score(t) > 0 (the g = 0 limit of the sampler);
/// the final position is always kept.
fn mask_bits<F: Scalar>(
    g: &mut Graph<F>,
    bundle: &InterestBundle,
    gate: &GateConfig<F>,
    mode: ScoreMode,
) -> Vec<u8> {
    let len = bundle.h.len();
    if len < 2 {
        return vec![1; len];
    }
    let e1v = g.value(bundle.e1).data().to_vec();
    let e2v = g.value(bundle.e2).data().to_vec();
    if !user_gate(&e1v, &e2v, gate.theta) {
        return vec![1; len];
    }
    let scores = item_scores(g, bundle);
    let mut bits: Vec<u8> = scores
        .iter()
        .take(len - 1)
        .map(|s| {
            let sc = combined_score(g, s, mode);
            u8::from(g.value(sc).item() > F::zero())
        })
        .collect();
    bits.push(1);
    bits
}

/// Noise-free keep mask for one user window from the current parameters.
pub fn noise_free_mask<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    table: &SemanticTable<F>,
    provider: &PrefixProvider<F>,
    catalog: &Catalog,
    user: usize,
    window: &[usize],
    gate: &GateConfig<F>,
    mode: ScoreMode,
) -> Result<Vec<u8>, EvalError> {
    let mut g = Graph::<F>::new();
    let bundle = user_bundle(&mut g, store, params, table, provider, catalog, user, window)?;
    Ok(mask_bits(&mut g, &bundle, gate, mode))
}

impl<F: Scalar> Scorer<F> for ModelScorer<'_, F> {
    fn scores(&mut self, user: usize, prefix: &[usize]) -> Result<Vec<F>, EvalError> {
        assert!(!prefix.is_empty(), "cannot score an empty prefix");
        let mut g = Graph::<F>::new();
        let bundle =
            user_bundle(&mut g, self.store, self.params, self.table, self.provider, self.catalog, user, prefix)?;
        let mut e2 = bundle.e2;
        if self.denoise {
            let bits = mask_bits(&mut g, &bundle, &self.gate, self.mode);
            if bits.iter().any(|&b| b == 0) {
                let emb = self.store.value(self.params.enc.item_emb);
                let d = emb.cols();
                let inputs: Vec<Var> = prefix
                    .iter()
                    .zip(&bits)
                    .map(|(&it, &bit)| {
                        let f = F::from_f64_lit(f64::from(bit));
                        let row: Vec<F> = emb.row_slice(it).iter().map(|&x| x * f).collect();
                        g.constant(Tensor::matrix(1, d, row))
                    })
                    .collect();
                let (_, e2b) = gru_forward_batch(&mut g, self.store, &self.params.enc, &inputs, None);
                e2 = e2b;
            }
        }
        let logits = score_items(&mut g, self.store, &self.params.enc, e2);
        Ok(g.value(logits).data().to_vec())
    }
}

/// Synthetic benchmark: clustered preferences with uniformly injected
/// out-of-cluster noise, plus cluster-correlated semantic vectors so the
/// semantic pathway genuinely separates noise from signal.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise_rate: f64,
    pub sem_dim: usize,
    /// Perturbation scale around the cluster centroid.
    pub sem_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 500,
            n_items: 300,
            n_clusters: 5,
            len_min: 20,
            len_max: 40,
            noise_rate: 0.2,
            sem_dim: 16,
            sem_noise: 0.1,
            seed: 42,
        }
    }
}

pub struct SyntheticDataset<F: Scalar> {
    pub interactions: Vec<Interaction>,
    /// Per user (in generation order): id and 0/1 noise flag per position.
    pub labels: Vec<(String, Vec<u8>)>,
    /// Item id → semantic vector, ready for a SEMB file or table.
    pub semantic_rows: Vec<(String, Vec<F>)>,
    /// Item index (1-based within this spec's id scheme) → cluster.
    pub item_cluster: Vec<usize>,
}

fn unit_normal<F: Scalar>(rng: &mut ChaCha8Rng, dim: usize) -> Vec<F> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter().map(|&x| F::from_f64_lit(x / n)).collect()
}

pub fn generate_synthetic<F: Scalar>(spec: &SyntheticSpec) -> SyntheticDataset<F> {
    assert!(spec.noise_rate < 1.0, "noise rate must be below 1");
    assert!(spec.n_clusters >= 2, "need at least 2 clusters");
    assert!(spec.n_items >= spec.n_clusters, "need at least one item per cluster");
    assert!(spec.len_min >= 3 && spec.len_min <= spec.len_max, "bad sequence length range");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // contiguous item blocks per cluster; index 0 is the padding slot
    let cluster_of = |item: usize| ((item - 1) * spec.n_clusters) / spec.n_items;
    let mut item_cluster = vec![usize::MAX; spec.n_items + 1];
    for i in 1..=spec.n_items {
        item_cluster[i] = cluster_of(i);
    }
    let members: Vec<Vec<usize>> = (0..spec.n_clusters)
        .map(|c| (1..=spec.n_items).filter(|&i| item_cluster[i] == c).collect())
        .collect();

    let centroids: Vec<Vec<f64>> =
        (0..spec.n_clusters).map(|_| unit_normal::<f64>(&mut rng, spec.sem_dim)).collect();
    let mut semantic_rows = Vec::with_capacity(spec.n_items);
    for i in 1..=spec.n_items {
        let c = &centroids[item_cluster[i]];
        let mut v: Vec<f64> = c
            .iter()
            .map(|&x| x + spec.sem_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for x in &mut v {
            *x /= n;
        }
        semantic_rows.push((format!("i{i:04}"), v.iter().map(|&x| F::from_f64_lit(x)).collect()));
    }

    let mut interactions = Vec::new();
    let mut labels = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let user_id = format!("u{u:04}");
        let home = u % spec.n_clusters;
        let len = rng.gen_range(spec.len_min..=spec.len_max);
        let mut flags = Vec::with_capacity(len);
        for pos in 0..len {
            let is_noise = rng.gen::<f64>() < spec.noise_rate;
            let item = if is_noise {
                loop {
                    let j = rng.gen_range(1..=spec.n_items);
                    if item_cluster[j] != home {
                        break j;
                    }
                }
            } else {
                members[home][rng.gen_range(0..members[home].len())]
            };
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: format!("i{item:04}"),
                timestamp: pos as i64,
            });
            flags.push(u8::from(is_noise));
        }
        labels.push((user_id, flags));
    }

    SyntheticDataset { interactions, labels, semantic_rows, item_cluster }
}

/// Sidecar label file: `user_id<TAB>position<TAB>flag` in generation order.
pub fn write_noise_labels(path: &Path, labels: &[(String, Vec<u8>)]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (user, flags) in labels {
        for (pos, f) in flags.iter().enumerate() {
            writeln!(w, "{user}\t{pos}\t{f}")?;
        }
    }
    w.flush()
}

pub fn read_noise_labels(path: &Path) -> Result<Vec<(String, Vec<u8>)>, EvalError> {
    let disp = path.display().to_string();
    let io_err = |e: std::io::Error| EvalError::Io { path: disp.clone(), source: e };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io { path: disp.clone(), source: e })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let bad = |reason: &str| EvalError::Malformed {
            path: disp.clone(),
            line: ln + 1,
            reason: reason.to_string(),
        };
        let user = parts.next().ok_or_else(|| bad("missing user id"))?;
        let pos: usize = parts
            .next()
            .ok_or_else(|| bad("missing position"))?
            .parse()
            .map_err(|_| bad("position is not an integer"))?;
        let flag: u8 = match parts.next() {
            Some("0") => 0,
            Some("1") => 1,
            _ => return Err(bad("flag must be 0 or 1")),
        };
        if parts.next().is_some() {
            return Err(bad("expected exactly 3 fields"));
        }
        let idx = *index.entry(user.to_string()).or_insert_with(|| {
            out.push((user.to_string(), Vec::new()));
            out.len() - 1
        });
        if out[idx].1.len() != pos {
            return Err(bad("positions must be consecutive per user"));
        }
        out[idx].1.push(flag);
    }
    Ok(out)
}
