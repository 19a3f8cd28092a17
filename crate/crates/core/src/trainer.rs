//! Joint training loop: progressive masked inputs anchored to the original
//! sequence, cross-modal alignment, Gumbel-masked reconstruction, Adam, and
//! early stopping on validation NDCG@10.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{alignment_loss, AlignConfig, InterestBundle};
use crate::dataio::{newest, Catalog, SplitUser};
use crate::denoiser::{combined_score, gumbel_sigmoid, item_scores, user_gate, GateConfig, ScoreMode};
use crate::encoder::{
    embed_sequence, gru_forward_batch, left_pad, register_encoder_params, score_items, xavier,
    zero_padding_grad, EncoderDims, EncoderParams,
};
use crate::eval::{evaluate, EvalExample, ModelScorer};
use crate::graph::{Graph, Var};
use crate::optim::{AdamConfig, AdamState, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::semantic::{prefix_embedding, project, PrefixProvider, SemanticError, SemanticTable};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { term: &'static str, epoch: usize },
    #[error("no user has enough training interactions to form an example")]
    EmptyTrainingSet,
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct TrainConfig<F: Scalar> {
    pub lr: F,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Encoder input window; training windows and eval prefixes keep the
    /// `max_len` most recent items.
    pub max_len: usize,
    pub w_ce: F,
    pub w_info: F,
    pub w_recon: F,
    pub disable_info: bool,
    pub disable_recon: bool,
    /// Keeps only long-term signals: drops c3 from the score and L_short
    /// from the alignment loss.
    pub long_only: bool,
    /// Keeps only short-term signals: drops c1 and c2 from the score and
    /// L_long from the alignment loss.
    pub short_only: bool,
    pub dims: EncoderDims,
    pub gate: GateConfig<F>,
    pub align: AlignConfig<F>,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            lr: F::from_f64_lit(1e-4),
            batch_size: 32,
            patience: 10,
            max_epochs: 100,
            seed: 42,
            max_len: 32,
            w_ce: F::one(),
            w_info: F::one(),
            w_recon: F::one(),
            disable_info: false,
            disable_recon: false,
            long_only: false,
            short_only: false,
            dims: EncoderDims::default(),
            gate: GateConfig::default(),
            align: AlignConfig::default(),
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn score_mode(&self) -> ScoreMode {
        match (self.long_only, self.short_only) {
            (true, false) => ScoreMode::LongOnly,
            (false, true) => ScoreMode::ShortOnly,
            _ => ScoreMode::Full,
        }
    }

    fn validate(&self) {
        assert!(self.w_ce >= F::zero(), "loss weights must be non-negative");
        assert!(self.w_info >= F::zero(), "loss weights must be non-negative");
        assert!(self.w_recon >= F::zero(), "loss weights must be non-negative");
        assert!(self.patience >= 1, "patience must be at least 1");
        assert!(self.batch_size >= 1, "batch size must be at least 1");
        assert!(self.max_epochs >= 1, "max_epochs must be at least 1");
        assert!(self.max_len >= 1, "max_len must be at least 1");
        // θ above 1 is allowed deliberately: it gates nobody and degenerates
        // the loop to plain next-item training.
        assert!(self.gate.theta >= -F::one(), "theta below -1 can never gate anyone out");
        assert!(!(self.long_only && self.short_only), "long_only and short_only are exclusive");
    }
}

/// Every trainable tensor of the full model: encoder, semantic projection,
/// and reconstruction decoder.
pub struct ModelParams {
    pub enc: EncoderParams,
    pub sem_w: ParamId,
    pub sem_b: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub sem_dim: usize,
}

/// Registration order is fixed (encoder, projection, decoder) so parameter
/// iteration, checkpoints, and rng consumption are reproducible.
pub fn register_model_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    n_items: usize,
    dims: EncoderDims,
    sem_dim: usize,
) -> ModelParams {
    let enc = register_encoder_params(store, rng, n_items, dims);
    let sem_w = store.register("sem_proj.W", xavier(rng, sem_dim, dims.d_hidden));
    let sem_b = store.register("sem_proj.b", Tensor::zeros(vec![dims.d_hidden]));
    let dec_w = store.register("decoder.W", xavier(rng, dims.d_hidden, dims.d_item));
    let dec_b = store.register("decoder.b", Tensor::zeros(vec![dims.d_item]));
    ModelParams { enc, sem_w, sem_b, dec_w, dec_b, sem_dim }
}

/// Keep/drop masks committed at the end of the previous epoch. Before any
/// commit (epoch 0) every user reads as all-ones.
#[derive(Debug, Default)]
pub struct EpochMaskStore {
    committed: Option<HashMap<usize, Vec<u8>>>,
}

impl EpochMaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// K^(e−1) for a user with `len` window positions.
    pub fn previous(&self, user: usize, len: usize) -> Vec<u8> {
        match &self.committed {
            None => vec![1; len],
            Some(m) => match m.get(&user) {
                Some(bits) => {
                    assert_eq!(bits.len(), len, "stored mask length for user {user}");
                    bits.clone()
                }
                None => {
                    log::warn!("no stored mask for user {user}; treating as all-ones");
                    vec![1; len]
                }
            },
        }
    }

    pub fn commit(&mut self, masks: HashMap<usize, Vec<u8>>) {
        self.committed = Some(masks);
    }
}

/// X^(e) = X^original ∘ K^(e−1): the original window's embedding rows, each
/// scaled by the previous epoch's keep bit. Always rebuilt from the original
/// embeddings, never from an earlier masked tensor.
pub fn masked_input<F: Scalar>(
    store: &EpochMaskStore,
    user: usize,
    window: &[usize],
    embeddings: &Tensor<F>,
) -> Tensor<F> {
    let k = store.previous(user, window.len());
    let d = embeddings.cols();
    let mut data = Vec::with_capacity(window.len() * d);
    for (t, &it) in window.iter().enumerate() {
        let f = F::from_f64_lit(k[t] as f64);
        data.extend(embeddings.row_slice(it).iter().map(|&x| x * f));
    }
    Tensor::matrix(window.len(), d, data)
}

/// One training example: the most recent window of the user's training items
/// predicting the item that follows it.
#[derive(Clone, Debug)]
pub struct Example {
    pub user: usize,
    pub window: Vec<usize>,
    pub target: usize,
    /// Window start within the user's full chronological sequence; aligns
    /// mask bits with dataset positions.
    pub offset: usize,
}

/// Users whose training split is a single item cannot form an (input, next)
/// pair and are skipped for training (they still evaluate).
pub fn build_examples(split: &[SplitUser], max_len: usize) -> Vec<Example> {
    split
        .iter()
        .filter_map(|s| {
            let n = s.train.len();
            if n < 2 {
                log::debug!("user {} has {} training items; skipped for training", s.user, n);
                return None;
            }
            let window = newest(&s.train[..n - 1], max_len);
            let offset = (n - 1) - window.len();
            Some(Example { user: s.user, window: window.clone(), target: s.train[n - 1], offset })
        })
        .collect()
}

/// Deterministic keep mask from the current parameters (no Gumbel noise):
/// m_t = 1[score_t > 0], final position always kept. Users failing the gate
/// read as all-ones.
pub struct UserMask {
    pub user: usize,
    pub offset: usize,
    pub bits: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct EpochRow<F: Scalar> {
    pub epoch: usize,
    pub l_ce: F,
    pub l_long: F,
    pub l_short: F,
    pub l_recon: F,
    pub l_total: F,
    pub valid_hr10: F,
    pub valid_ndcg10: F,
    pub denoise_ratio: F,
}

pub const HISTORY_HEADER: &str =
    "epoch,L_CE,L_long,L_short,L_recon,L_total,valid_HR@10,valid_NDCG@10,denoise_ratio";

pub fn write_history<F: Scalar>(path: &Path, rows: &[EpochRow<F>]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.l_ce,
            r.l_long,
            r.l_short,
            r.l_recon,
            r.l_total,
            r.valid_hr10,
            r.valid_ndcg10,
            r.denoise_ratio
        )?;
    }
    w.flush()
}

pub struct TrainOutcome<F: Scalar> {
    pub store: ParamStore<F>,
    pub params: ModelParams,
    pub history: Vec<EpochRow<F>>,
    pub best_epoch: usize,
    pub best_valid_ndcg10: F,
    pub best_valid_hr10: F,
    /// Training-time hard masks per user per epoch, as dump rows
    /// (user id, epoch, 0/1 string), users sorted within each epoch.
    pub mask_dump: Vec<(String, usize, String)>,
    /// Noise-free masks recomputed from the restored best parameters.
    pub final_masks: Vec<UserMask>,
}

struct BatchStats<F: Scalar> {
    users: usize,
    l_ce: F,
    l_long: F,
    l_short: F,
    l_recon: F,
    l_total: F,
    gated: usize,
    mask_zeros: usize,
    mask_positions: usize,
}

/// Full training loop. Deterministic under a fixed seed: shuffling and mask
/// noise come from per-epoch ChaCha streams, parameters from the
/// registration-time stream.
pub fn train<F: Scalar>(
    split: &[SplitUser],
    catalog: &Catalog,
    table: &SemanticTable<F>,
    provider: &PrefixProvider<F>,
    cfg: &TrainConfig<F>,
) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate();
    if matches!(provider, PrefixProvider::MeanPool) {
        table.ensure_covers(catalog)?;
    }

    let examples = build_examples(split, cfg.max_len);
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let valid_set: Vec<EvalExample> = split
        .iter()
        .map(|s| EvalExample {
            user: s.user,
            prefix: newest(&s.valid_prefix, cfg.max_len),
            target: s.valid_target,
        })
        .collect();

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sem_dim = provider.dim(table);
    let params = register_model_params(&mut store, &mut init_rng, catalog.n_items(), cfg.dims, sem_dim);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &store);

    let mut mask_store = EpochMaskStore::new();
    let mut history: Vec<EpochRow<F>> = Vec::new();
    let mut mask_dump: Vec<(String, usize, String)> = Vec::new();
    let mut best_ndcg = F::neg_infinity();
    let mut best_hr = F::zero();
    let mut best_epoch = 0usize;
    let mut best_snapshot: Option<Vec<Tensor<F>>> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2 * epoch as u64 + 1);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_rng.set_stream(2 * epoch as u64 + 2);

        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let gate_now = GateConfig {
            tau_gumbel: cfg.gate.tau_at(epoch, cfg.max_epochs),
            ..cfg.gate
        };
        let in_warmup = epoch < cfg.gate.warmup_epochs;

        let mut new_masks: HashMap<usize, Vec<u8>> = HashMap::new();
        let mut sums = BatchStats {
            users: 0,
            l_ce: F::zero(),
            l_long: F::zero(),
            l_short: F::zero(),
            l_recon: F::zero(),
            l_total: F::zero(),
            gated: 0,
            mask_zeros: 0,
            mask_positions: 0,
        };

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let stats = train_batch(
                &mut store,
                &params,
                &mut adam,
                &batch,
                catalog,
                table,
                provider,
                cfg,
                &gate_now,
                in_warmup,
                epoch,
                &mask_store,
                &mut new_masks,
                &mut mask_rng,
            )?;
            sums.users += stats.users;
            sums.l_ce += stats.l_ce * F::from_f64_lit(stats.users as f64);
            sums.l_long += stats.l_long * F::from_f64_lit(stats.users as f64);
            sums.l_short += stats.l_short * F::from_f64_lit(stats.users as f64);
            sums.l_recon += stats.l_recon * F::from_f64_lit(stats.users as f64);
            sums.l_total += stats.l_total * F::from_f64_lit(stats.users as f64);
            sums.gated += stats.gated;
            sums.mask_zeros += stats.mask_zeros;
            sums.mask_positions += stats.mask_positions;
        }

        let denom = F::from_f64_lit(sums.users as f64);
        let denoise_ratio = if sums.mask_positions == 0 {
            F::zero()
        } else {
            F::from_f64_lit(sums.mask_zeros as f64 / sums.mask_positions as f64)
        };

        let mut dump_users: Vec<usize> = new_masks.keys().copied().collect();
        dump_users.sort_unstable();
        for u in dump_users {
            let bits: String = new_masks[&u].iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
            mask_dump.push((catalog.user_id(u).to_string(), epoch, bits));
        }
        mask_store.commit(new_masks);

        let mut scorer = ModelScorer {
            store: &store,
            params: &params,
            table,
            provider,
            catalog,
            gate: cfg.gate,
            mode: cfg.score_mode(),
            denoise: !in_warmup,
        };
        let report = evaluate(&mut scorer, &valid_set, catalog.n_items())?;
        let (hr10, ndcg10) = (report.hr.1, report.ndcg.1);

        history.push(EpochRow {
            epoch,
            l_ce: sums.l_ce / denom,
            l_long: sums.l_long / denom,
            l_short: sums.l_short / denom,
            l_recon: sums.l_recon / denom,
            l_total: sums.l_total / denom,
            valid_hr10: hr10,
            valid_ndcg10: ndcg10,
            denoise_ratio,
        });

        if ndcg10 > best_ndcg {
            best_ndcg = ndcg10;
            best_hr = hr10;
            best_epoch = epoch;
            best_snapshot = Some(store.snapshot());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }

    if let Some(snap) = &best_snapshot {
        store.restore(snap);
    }

    let final_masks = deterministic_masks(&store, &params, table, provider, catalog, &examples, cfg)?;

    Ok(TrainOutcome {
        store,
        params,
        history,
        best_epoch,
        best_valid_ndcg10: best_ndcg,
        best_valid_hr10: best_hr,
        mask_dump,
        final_masks,
    })
}

/// Builds one batch graph, assembles the weighted loss, and applies a
/// parameter step. Returns the batch's loss parts and mask counts.
#[allow(clippy::too_many_arguments)]
fn train_batch<F: Scalar>(
    store: &mut ParamStore<F>,
    params: &ModelParams,
    adam: &mut AdamState<F>,
    batch: &[&Example],
    catalog: &Catalog,
    table: &SemanticTable<F>,
    provider: &PrefixProvider<F>,
    cfg: &TrainConfig<F>,
    gate_now: &GateConfig<F>,
    in_warmup: bool,
    epoch: usize,
    mask_store: &EpochMaskStore,
    new_masks: &mut HashMap<usize, Vec<u8>>,
    mask_rng: &mut ChaCha8Rng,
) -> Result<BatchStats<F>, TrainError> {
    let b = batch.len();
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.window.as_slice()).collect();
    let padded = left_pad::<F>(&seqs);
    let t_steps = padded.n_steps;
    let prev: Vec<Vec<u8>> = batch
        .iter()
        .map(|e| mask_store.previous(e.user, e.window.len()))
        .collect();

    let mut g = Graph::<F>::new();

    // inputs: original embeddings scaled by the previous epoch's keep bits
    let mut inputs = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let emb = embed_sequence(&mut g, store, &params.enc, &padded.idx[t]);
        let mut factors = vec![F::one(); b];
        let mut any_zero = false;
        for (row, e) in batch.iter().enumerate() {
            let start = t_steps - e.window.len();
            if t >= start && prev[row][t - start] == 0 {
                factors[row] = F::zero();
                any_zero = true;
            }
        }
        if any_zero {
            let col = g.constant(Tensor::new(vec![b], factors));
            inputs.push(g.scale_rows(emb, col));
        } else {
            inputs.push(emb);
        }
    }

    let (states, e2) = gru_forward_batch(&mut g, store, &params.enc, &inputs, Some(&padded.keep));

    // next-item cross-entropy over the batch
    let logits = score_items(&mut g, store, &params.enc, e2);
    let targets: Vec<usize> = batch.iter().map(|e| e.target - 1).collect();
    let per_row = g.softmax_xent(logits, &targets);
    let l_ce = g.mean(per_row);

    // semantic pathway: one projected prefix matrix per user
    let sem_w = g.param(store, params.sem_w);
    let sem_b = g.param(store, params.sem_b);
    let mut bundles = Vec::with_capacity(b);
    for (row, e) in batch.iter().enumerate() {
        let len = e.window.len();
        let user_id = catalog.user_id(e.user);
        let mut flat = Vec::with_capacity(len * params.sem_dim);
        for t in 1..=len {
            flat.extend(prefix_embedding(provider, user_id, &e.window[..t], table)?);
        }
        let raw = g.constant(Tensor::matrix(len, params.sem_dim, flat));
        let proj = project(&mut g, raw, sem_w, sem_b);
        let l: Vec<Var> = (0..len).map(|t| g.slice_rows(proj, t, 1)).collect();
        let start = t_steps - len;
        let h: Vec<Var> = (0..len).map(|t| g.slice_rows(states[start + t], row, 1)).collect();
        let e1 = l[len - 1];
        let e2_u = g.slice_rows(e2, row, 1);
        bundles.push(InterestBundle { e1, e2: e2_u, l, h });
    }

    // alignment loss (ablatable)
    let use_info = !cfg.disable_info && cfg.w_info > F::zero();
    let (l_long, l_short, l_info) = if use_info {
        let (lo, sh, _) = alignment_loss(&mut g, &bundles, &cfg.align);
        let info = match cfg.score_mode() {
            ScoreMode::Full => g.add(lo, sh),
            ScoreMode::LongOnly => lo,
            ScoreMode::ShortOnly => sh,
        };
        (lo, sh, info)
    } else {
        let z = g.scalar_const(F::zero());
        (z, z, z)
    };

    // gate, score, and sample this epoch's masks
    let use_recon = !cfg.disable_recon && cfg.w_recon > F::zero();
    let mode = cfg.score_mode();
    let mut recon_terms: Vec<Var> = Vec::new();
    let mut gated_count = 0usize;
    let mut mask_zeros = 0usize;
    let mut mask_positions = 0usize;

    for (row, e) in batch.iter().enumerate() {
        let len = e.window.len();
        let bundle = &bundles[row];
        let gated = !in_warmup && {
            let e1v = g.value(bundle.e1).data().to_vec();
            let e2v = g.value(bundle.e2).data().to_vec();
            user_gate(&e1v, &e2v, cfg.gate.theta)
        };
        if !gated {
            new_masks.insert(e.user, vec![1u8; len]);
            continue;
        }
        gated_count += 1;

        let scores = item_scores(&mut g, bundle);
        let mut bits = Vec::with_capacity(len);
        let mut mask_vars = Vec::with_capacity(len);
        for s in scores.iter().take(len - 1) {
            let sc = combined_score(&mut g, s, mode);
            let sample = gumbel_sigmoid(&mut g, sc, gate_now, mask_rng);
            bits.push(u8::from(sample.keep));
            mask_vars.push(sample.m);
            mask_positions += 1;
            if !sample.keep {
                mask_zeros += 1;
            }
        }
        bits.push(1);
        let one = g.scalar_const(F::one());
        mask_vars.push(one);
        new_masks.insert(e.user, bits);

        if use_recon {
            let h_mat = g.concat_rows(&bundle.h);
            let mask_col = g.stack_scalars(&mask_vars);
            let hk = g.scale_rows(h_mat, mask_col);
            let dec_w = g.param(store, params.dec_w);
            let dec_b = g.param(store, params.dec_b);
            let dec = g.matmul(hk, dec_w);
            let xhat = g.add_row(dec, dec_b);
            // reconstruction target: the original embedding rows, detached
            let emb_vals = store.value(params.enc.item_emb);
            let d_c = emb_vals.cols();
            let mut tgt = Vec::with_capacity(len * d_c);
            for &it in &e.window {
                tgt.extend_from_slice(emb_vals.row_slice(it));
            }
            let target = g.constant(Tensor::matrix(len, d_c, tgt));
            let diff = g.sub(xhat, target);
            let sq = g.mul(diff, diff);
            recon_terms.push(g.sum(sq));
        }
    }

    let l_recon = if use_recon {
        if recon_terms.is_empty() {
            if in_warmup {
                log::debug!("warmup epoch {epoch}: reconstruction skipped");
            } else {
                log::warn!("no user passed the gate this batch; L_recon defined as 0");
            }
            g.scalar_const(F::zero())
        } else {
            let mut acc = recon_terms[0];
            for &t in &recon_terms[1..] {
                acc = g.add(acc, t);
            }
            g.scale(acc, F::one() / F::from_f64_lit(recon_terms.len() as f64))
        }
    } else {
        g.scalar_const(F::zero())
    };

    // weighted total; zero-weight terms are skipped so the degenerate
    // configuration reduces bit-exactly to the plain CE loss
    let mut l_total = if cfg.w_ce == F::one() { l_ce } else { g.scale(l_ce, cfg.w_ce) };
    if use_info {
        let term = if cfg.w_info == F::one() { l_info } else { g.scale(l_info, cfg.w_info) };
        l_total = g.add(l_total, term);
    }
    if use_recon {
        let term = if cfg.w_recon == F::one() { l_recon } else { g.scale(l_recon, cfg.w_recon) };
        l_total = g.add(l_total, term);
    }

    let stats = BatchStats {
        users: b,
        l_ce: g.value(l_ce).item(),
        l_long: g.value(l_long).item(),
        l_short: g.value(l_short).item(),
        l_recon: g.value(l_recon).item(),
        l_total: g.value(l_total).item(),
        gated: gated_count,
        mask_zeros,
        mask_positions,
    };
    for (term, v) in [
        ("L_CE", stats.l_ce),
        ("L_Info", stats.l_long + stats.l_short),
        ("L_recon", stats.l_recon),
        ("L_total", stats.l_total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::Diverged { term, epoch });
        }
    }

    g.backward(l_total);
    g.accumulate_param_grads(store);
    zero_padding_grad(store, &params.enc);
    store.fill_missing_grads_zero();
    adam.adam_step(store);

    Ok(stats)
}

/// Noise-free masks for every trainable user from the current parameters:
/// the evaluation-time rule (no Gumbel noise, keep iff score > 0).
pub fn deterministic_masks<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    table: &SemanticTable<F>,
    provider: &PrefixProvider<F>,
    catalog: &Catalog,
    examples: &[Example],
    cfg: &TrainConfig<F>,
) -> Result<Vec<UserMask>, crate::eval::EvalError> {
    let mode = cfg.score_mode();
    examples
        .iter()
        .map(|e| {
            let bits = crate::eval::noise_free_mask(
                store,
                params,
                table,
                provider,
                catalog,
                e.user,
                &e.window,
                &cfg.gate,
                mode,
            )?;
            Ok(UserMask { user: e.user, offset: e.offset, bits })
        })
        .collect()
}
