//! Cross-modal InfoNCE: collaborative interests anchor against their
//! semantic counterparts with in-batch negatives, one-directional.

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AlignConfig<F: Scalar> {
    pub tau: F,
}

impl<F: Scalar> Default for AlignConfig<F> {
    fn default() -> Self {
        AlignConfig { tau: F::from_f64_lit(0.1) }
    }
}

/// −(1/N) Σ_i log softmax_i(cos(a_i, p_·)/τ). Anchors index rows of the
/// similarity matrix; positives sit on the diagonal. N = 1 gives exactly 0.
pub fn info_nce<F: Scalar>(g: &mut Graph<F>, anchors: Var, positives: Var, tau: F) -> Var {
    let (ar, pr) = (g.value(anchors).rows(), g.value(positives).rows());
    assert_eq!(ar, pr, "info_nce: {ar} anchors vs {pr} positives");
    assert!(tau > F::zero(), "info_nce: temperature must be positive");
    let a = g.normalize_rows(anchors);
    let p = g.normalize_rows(positives);
    let pt = g.transpose(p);
    let sims = g.matmul(a, pt);
    let logits = g.scale(sims, F::one() / tau);
    let targets: Vec<usize> = (0..ar).collect();
    let per_row = g.softmax_xent(logits, &targets);
    g.mean(per_row)
}

/// Per-user interest vectors, all living in the collaborative space
/// ([1, d_h] rows): e1/e2 long-term (semantic/collaborative), l/h short-term
/// per prefix position t = 1..n−1.
pub struct InterestBundle {
    pub e1: Var,
    pub e2: Var,
    pub l: Vec<Var>,
    pub h: Vec<Var>,
}

/// L_long anchors e2 per user; L_short anchors every h_t in the batch,
/// flattened across users (padding positions never enter). Empty inputs are
/// a degenerate batch: the affected term is 0 with a warning.
pub fn alignment_loss<F: Scalar>(
    g: &mut Graph<F>,
    bundles: &[InterestBundle],
    cfg: &AlignConfig<F>,
) -> (Var, Var, Var) {
    let l_long = if bundles.is_empty() {
        log::warn!("alignment over an empty batch; L_long defined as 0");
        g.scalar_const(F::zero())
    } else {
        let e2s: Vec<Var> = bundles.iter().map(|b| b.e2).collect();
        let e1s: Vec<Var> = bundles.iter().map(|b| b.e1).collect();
        let anchors = g.concat_rows(&e2s);
        let positives = g.concat_rows(&e1s);
        info_nce(g, anchors, positives, cfg.tau)
    };

    let hs: Vec<Var> = bundles.iter().flat_map(|b| b.h.iter().copied()).collect();
    let ls: Vec<Var> = bundles.iter().flat_map(|b| b.l.iter().copied()).collect();
    assert_eq!(hs.len(), ls.len(), "short-term lists disagree: {} vs {}", hs.len(), ls.len());
    let l_short = if hs.is_empty() {
        log::warn!("no short-term prefixes in batch; L_short defined as 0");
        g.scalar_const(F::zero())
    } else {
        let anchors = g.concat_rows(&hs);
        let positives = g.concat_rows(&ls);
        info_nce(g, anchors, positives, cfg.tau)
    };

    let l_info = g.add(l_long, l_short);
    (l_long, l_short, l_info)
}
