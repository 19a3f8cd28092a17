//! Collaborative backbone: item-ID embedding table plus a stacked GRU.
//!
//! Gate convention per layer (single bias per gate):
//!   z = σ(xWz + hUz + bz)
//!   r = σ(xWr + hUr + br)
//!   n = tanh(xWh + r ∘ (hUh) + bh)
//!   h' = (1 − z) ∘ n + z ∘ h
//! A keep-mask of 0 at a step holds the previous state (used both for
//! left-padding inside batches and for the explicit state-hold mask option).
//! The long-term interest e2 is the top-layer state at the final step, which
//! under state-hold equals the state at the last kept position.

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct EncoderDims {
    pub d_item: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims { d_item: 64, d_hidden: 128, n_layers: 2 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruLayerIds {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wh: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub uh: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bh: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub item_emb: ParamId,
    pub layers: Vec<GruLayerIds>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub dims: EncoderDims,
    pub n_items: usize,
}

/// Uniform Glorot initialization over ±sqrt(6/(fan_in+fan_out)).
pub fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| F::from_f64_lit(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, data)
}

/// Registers the embedding table, GRU stack, and prediction head under their
/// checkpoint names, drawing initial values from `rng` in a fixed order.
/// Row 0 of the embedding table (padding) starts and stays at zero.
pub fn register_encoder_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    n_items: usize,
    dims: EncoderDims,
) -> EncoderParams {
    let emb_dist = Uniform::new_inclusive(-0.1, 0.1);
    let mut emb = Tensor::matrix(
        n_items + 1,
        dims.d_item,
        (0..(n_items + 1) * dims.d_item)
            .map(|_| F::from_f64_lit(emb_dist.sample(rng)))
            .collect(),
    );
    emb.data_mut()[..dims.d_item].fill(F::zero());
    let item_emb = store.register("item_emb", emb);

    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 1..=dims.n_layers {
        let d_in = if l == 1 { dims.d_item } else { dims.d_hidden };
        let d_h = dims.d_hidden;
        let name = |gate: &str| format!("gru.l{l}.{gate}");
        layers.push(GruLayerIds {
            wz: store.register(&name("Wz"), xavier(rng, d_in, d_h)),
            wr: store.register(&name("Wr"), xavier(rng, d_in, d_h)),
            wh: store.register(&name("Wh"), xavier(rng, d_in, d_h)),
            uz: store.register(&name("Uz"), xavier(rng, d_h, d_h)),
            ur: store.register(&name("Ur"), xavier(rng, d_h, d_h)),
            uh: store.register(&name("Uh"), xavier(rng, d_h, d_h)),
            bz: store.register(&name("bz"), Tensor::zeros(vec![d_h])),
            br: store.register(&name("br"), Tensor::zeros(vec![d_h])),
            bh: store.register(&name("bh"), Tensor::zeros(vec![d_h])),
        });
    }

    let head_w = store.register("head.W", xavier(rng, dims.d_hidden, dims.d_item));
    let head_b = store.register("head.b", Tensor::zeros(vec![dims.d_item]));

    EncoderParams { item_emb, layers, head_w, head_b, dims, n_items }
}

/// Clears the padding row's gradient so the optimizer never moves it.
pub fn zero_padding_grad<F: Scalar>(store: &mut ParamStore<F>, params: &EncoderParams) {
    let d = params.dims.d_item;
    if let Some(g) = store.grad_mut(params.item_emb) {
        g.data_mut()[..d].fill(F::zero());
    }
}

/// Row-gather of item embeddings; index 0 yields the zero padding row.
pub fn embed_sequence<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    items: &[usize],
) -> Var {
    let emb = g.param(store, params.item_emb);
    g.gather_rows(emb, items)
}

struct GruLayerVars {
    wz: Var,
    wr: Var,
    wh: Var,
    uz: Var,
    ur: Var,
    uh: Var,
    bz: Var,
    br: Var,
    bh: Var,
}

fn layer_vars<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, ids: &GruLayerIds) -> GruLayerVars {
    GruLayerVars {
        wz: g.param(store, ids.wz),
        wr: g.param(store, ids.wr),
        wh: g.param(store, ids.wh),
        uz: g.param(store, ids.uz),
        ur: g.param(store, ids.ur),
        uh: g.param(store, ids.uh),
        bz: g.param(store, ids.bz),
        br: g.param(store, ids.br),
        bh: g.param(store, ids.bh),
    }
}

fn gru_cell<F: Scalar>(g: &mut Graph<F>, p: &GruLayerVars, x: Var, h: Var) -> Var {
    let xw = g.matmul(x, p.wz);
    let hu = g.matmul(h, p.uz);
    let zs = g.add(xw, hu);
    let zs = g.add_row(zs, p.bz);
    let z = g.sigmoid(zs);

    let xw = g.matmul(x, p.wr);
    let hu = g.matmul(h, p.ur);
    let rs = g.add(xw, hu);
    let rs = g.add_row(rs, p.br);
    let r = g.sigmoid(rs);

    let xw = g.matmul(x, p.wh);
    let hu = g.matmul(h, p.uh);
    let rhu = g.mul(r, hu);
    let ns = g.add(xw, rhu);
    let ns = g.add_row(ns, p.bh);
    let n = g.tanh(ns);

    let one = g.scalar_const(F::one());
    let one_minus_z = g.sub(one, z);
    let a = g.mul(one_minus_z, n);
    let b = g.mul(z, h);
    g.add(a, b)
}

/// Runs the GRU stack over per-step inputs (each [B, d_in]). `keep[t]`
/// carries one 0/1 flag per batch row; 0 copies the previous state through
/// (state hold). Returns the top-layer state per step and e2 (final step).
pub fn gru_forward_batch<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    inputs: &[Var],
    keep: Option<&[Vec<F>]>,
) -> (Vec<Var>, Var) {
    assert!(!inputs.is_empty(), "gru_forward_batch: empty input");
    if let Some(k) = keep {
        assert_eq!(k.len(), inputs.len(), "keep-mask length {} for {} steps", k.len(), inputs.len());
    }
    let b = g.value(inputs[0]).rows();
    let d_h = params.dims.d_hidden;

    let keep_cols: Option<Vec<(Var, Var)>> = keep.map(|k| {
        k.iter()
            .map(|ks| {
                assert_eq!(ks.len(), b, "keep-mask width {} for batch of {b}", ks.len());
                let kc = g.constant(Tensor::new(vec![b], ks.clone()));
                let inv = g.constant(Tensor::new(
                    vec![b],
                    ks.iter().map(|&x| F::one() - x).collect(),
                ));
                (kc, inv)
            })
            .collect()
    });

    let mut current: Vec<Var> = inputs.to_vec();
    for ids in &params.layers {
        let p = layer_vars(g, store, ids);
        let mut h = g.constant(Tensor::zeros(vec![b, d_h]));
        let mut states = Vec::with_capacity(current.len());
        for (t, &x) in current.iter().enumerate() {
            let h_new = gru_cell(g, &p, x, h);
            h = match &keep_cols {
                Some(cols) => {
                    let (kc, inv) = cols[t];
                    let kept = g.scale_rows(h_new, kc);
                    let held = g.scale_rows(h, inv);
                    g.add(kept, held)
                }
                None => h_new,
            };
            states.push(h);
        }
        current = states;
    }
    let e2 = *current.last().expect("at least one step");
    (current, e2)
}

/// Per-step hidden states and the long-term collaborative interest for one
/// sequence.
pub struct EncoderOutput {
    pub h: Vec<Var>,
    pub e2: Var,
}

/// Single-sequence forward (batch of one). `mask` values of 0 hold the
/// previous state at that step.
pub fn gru_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    items: &[usize],
    mask: Option<&[F]>,
) -> EncoderOutput {
    assert!(!items.is_empty(), "gru_forward: empty sequence");
    let inputs: Vec<Var> = items
        .iter()
        .map(|&it| embed_sequence(g, store, params, &[it]))
        .collect();
    let keep: Option<Vec<Vec<F>>> = mask.map(|m| {
        assert_eq!(m.len(), items.len(), "mask length {} for {} items", m.len(), items.len());
        m.iter().map(|&x| vec![x]).collect()
    });
    let (h, e2) = gru_forward_batch(g, store, params, &inputs, keep.as_deref());
    EncoderOutput { h, e2 }
}

/// Logits over real items (idx 1..=n mapped to columns 0..n): the projected
/// state dotted with every non-padding embedding row. Padding never appears
/// as a class.
pub fn score_items<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    e2: Var,
) -> Var {
    let w = g.param(store, params.head_w);
    let bias = g.param(store, params.head_b);
    let proj = g.matmul(e2, w);
    let proj = g.add_row(proj, bias);
    let emb = g.param(store, params.item_emb);
    let real = g.slice_rows(emb, 1, params.n_items);
    let real_t = g.transpose(real);
    g.matmul(proj, real_t)
}

/// Left-padded index/keep matrices for a batch of sequences: every sequence
/// ends at the last step, shorter ones start later. Step-major layout.
pub struct PaddedBatch<F: Scalar> {
    pub idx: Vec<Vec<usize>>,
    pub keep: Vec<Vec<F>>,
    pub n_steps: usize,
    pub batch: usize,
}

pub fn left_pad<F: Scalar>(seqs: &[&[usize]]) -> PaddedBatch<F> {
    assert!(!seqs.is_empty(), "left_pad: empty batch");
    let n_steps = seqs.iter().map(|s| s.len()).max().expect("nonempty");
    assert!(n_steps > 0, "left_pad: all sequences empty");
    let batch = seqs.len();
    let mut idx = vec![vec![0usize; batch]; n_steps];
    let mut keep = vec![vec![F::zero(); batch]; n_steps];
    for (row, s) in seqs.iter().enumerate() {
        let start = n_steps - s.len();
        for (j, &it) in s.iter().enumerate() {
            idx[start + j][row] = it;
            keep[start + j][row] = F::one();
        }
    }
    PaddedBatch { idx, keep, n_steps, batch }
}
