//! Noise detection: user-level gating on long-term cosine agreement,
//! per-position similarity scores, Gumbel-Sigmoid keep/drop sampling with a
//! straight-through gradient, and mask application.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::InterestBundle;
use crate::graph::{cosine_eps, Graph, Var};
use crate::scalar::Scalar;
#[cfg(test)]
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GateConfig<F: Scalar> {
    /// Users whose long-term cosine falls below this skip noise detection.
    pub theta: F,
    pub tau_gumbel: F,
    /// Hard mode emits binary masks with straight-through gradients; soft
    /// mode emits the relaxation itself.
    pub hard: bool,
    /// Stabilizer inside the Gumbel transform.
    pub eps: F,
    /// Epochs to hold every mask at all-ones before detection starts.
    pub warmup_epochs: usize,
    /// Linear temperature target reached at the final epoch, if set.
    pub tau_anneal_to: Option<F>,
}

impl<F: Scalar> Default for GateConfig<F> {
    fn default() -> Self {
        GateConfig {
            theta: F::from_f64_lit(-0.9),
            tau_gumbel: F::one(),
            hard: true,
            eps: F::from_f64_lit(1e-10),
            warmup_epochs: 0,
            tau_anneal_to: None,
        }
    }
}

impl<F: Scalar> GateConfig<F> {
    /// Gumbel temperature for an epoch under the optional linear schedule.
    pub fn tau_at(&self, epoch: usize, max_epochs: usize) -> F {
        match self.tau_anneal_to {
            Some(target) if max_epochs > 1 => {
                let f = F::from_f64_lit(epoch.min(max_epochs - 1) as f64 / (max_epochs - 1) as f64);
                self.tau_gumbel + (target - self.tau_gumbel) * f
            }
            _ => self.tau_gumbel,
        }
    }
}

fn cosine_value<F: Scalar>(a: &[F], b: &[F]) -> F {
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<F>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<F>().sqrt();
    dot / (na * nb + cosine_eps::<F>())
}

/// True iff cos(e1, e2) ≥ θ. A zero vector makes the cosine undefined: the
/// user is treated as unqualified, with a warning.
pub fn user_gate<F: Scalar>(e1: &[F], e2: &[F], theta: F) -> bool {
    assert_eq!(e1.len(), e2.len(), "user_gate: {} vs {} dims", e1.len(), e2.len());
    let zero = |v: &[F]| v.iter().all(|&x| x == F::zero());
    if zero(e1) || zero(e2) {
        log::warn!("user gate saw a zero interest vector; treating user as unqualified");
        return false;
    }
    cosine_value(e1, e2) >= theta
}

/// Per-position noise indicator, kept in-graph so mask gradients reach the
/// encoder and the projection.
pub struct ItemScore {
    pub score: Var,
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
}

/// score(t) = cos(e1, h_t) + cos(e2, l_t) + cos(h_t, l_t). Any cosine whose
/// operand is exactly zero contributes 0 (warned); the in-graph cosine is
/// already 0 with zero gradient there.
pub fn item_scores<F: Scalar>(g: &mut Graph<F>, bundle: &InterestBundle) -> Vec<ItemScore> {
    assert_eq!(bundle.h.len(), bundle.l.len(), "bundle prefix lists disagree");
    assert!(!bundle.h.is_empty(), "item_scores: empty prefix lists");
    let mut out = Vec::with_capacity(bundle.h.len());
    for (t, (&h, &l)) in bundle.h.iter().zip(&bundle.l).enumerate() {
        for (name, v) in [("e1", bundle.e1), ("e2", bundle.e2), ("h_t", h), ("l_t", l)] {
            if g.value(v).data().iter().all(|&x| x == F::zero()) {
                log::warn!("zero {name} vector at step {}; affected cosines contribute 0", t + 1);
            }
        }
        let c1 = g.cosine(bundle.e1, h);
        let c2 = g.cosine(bundle.e2, l);
        let c3 = g.cosine(h, l);
        let c12 = g.add(c1, c2);
        let score = g.add(c12, c3);
        out.push(ItemScore { score, c1, c2, c3 });
    }
    out
}

/// Which cosine components feed the noise score. The ablations cut the
/// short-term pair (keeping c1 + c2) or the long-term pair (keeping c3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Full,
    LongOnly,
    ShortOnly,
}

/// Combines an [`ItemScore`]'s components per the active mode.
pub fn combined_score<F: Scalar>(g: &mut Graph<F>, s: &ItemScore, mode: ScoreMode) -> Var {
    match mode {
        ScoreMode::Full => s.score,
        ScoreMode::LongOnly => g.add(s.c1, s.c2),
        ScoreMode::ShortOnly => s.c3,
    }
}

/// g = −log(−log(U + ε) + ε), the stabilized Gumbel transform.
pub fn gumbel_noise<F: Scalar>(u: F, eps: F) -> F {
    let inner = -(u + eps).ln() + eps;
    // guard against cancellation when U sits within ε of 1
    let inner = inner.max(F::min_positive_value());
    -inner.ln()
}

/// A sampled keep decision: `m` is what downstream consumes (binary in hard
/// mode, the relaxation in soft mode); `y` is the soft value.
pub struct MaskSample {
    pub m: Var,
    pub y: Var,
    pub keep: bool,
}

/// Deterministic core: y = σ((score + noise)/τ); hard m = 1[y > 0.5] with
/// the straight-through gradient dm/dscore := dy/dscore, realized as
/// m = const(m − y) + y.
pub fn gumbel_sigmoid_with_noise<F: Scalar>(
    g: &mut Graph<F>,
    score: Var,
    noise: F,
    cfg: &GateConfig<F>,
) -> MaskSample {
    assert!(cfg.tau_gumbel > F::zero(), "gumbel temperature must be positive");
    let n = g.scalar_const(noise);
    let shifted = g.add(score, n);
    let scaled = g.scale(shifted, F::one() / cfg.tau_gumbel);
    let y = g.sigmoid(scaled);
    let y_val = g.value(y).item();
    if !cfg.hard {
        return MaskSample { m: y, y, keep: y_val > F::from_f64_lit(0.5) };
    }
    let keep = y_val > F::from_f64_lit(0.5);
    let m_val = if keep { F::one() } else { F::zero() };
    let offset = g.scalar_const(m_val - y_val);
    let m = g.add(offset, y);
    MaskSample { m, y, keep }
}

/// Samples U ~ Uniform(0,1) from `rng` and applies the transform above. One
/// rng draw per call, unconditionally, so mask streams are reproducible.
pub fn gumbel_sigmoid<F: Scalar>(
    g: &mut Graph<F>,
    score: Var,
    cfg: &GateConfig<F>,
    rng: &mut ChaCha8Rng,
) -> MaskSample {
    let u: f64 = rng.gen();
    gumbel_sigmoid_with_noise(g, score, gumbel_noise(F::from_f64_lit(u), cfg.eps), cfg)
}

/// Keeps items whose mask is 1, preserving order. An all-zero mask keeps the
/// most recent item so the sequence never empties.
pub fn apply_mask(seq: &[usize], mask: &[u8]) -> Vec<usize> {
    assert_eq!(seq.len(), mask.len(), "apply_mask: {} items vs {} bits", seq.len(), mask.len());
    let kept: Vec<usize> = seq
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&it, _)| it)
        .collect();
    if kept.is_empty() {
        match seq.last() {
            Some(&last) => vec![last],
            None => Vec::new(),
        }
    } else {
        kept
    }
}

/// Diagnostic dump rows: `<user_id> <epoch> <0/1 string>`.
pub fn write_mask_dump(
    path: &std::path::Path,
    rows: &[(String, usize, String)],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (user, epoch, bits) in rows {
        writeln!(w, "{user} {epoch} {bits}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> GateConfig<f64> {
        GateConfig::default()
    }

    #[test]
    fn gate_examples() {
        let v = [0.3, -0.2, 0.9];
        assert!(user_gate(&v, &v, -0.9));
        assert!(!user_gate(&[1.0, 0.0], &[0.0, 1.0], 0.5));
        // θ = −1 admits every nonzero pair
        assert!(user_gate(&[1.0, 0.0], &[-1.0, 0.0], -1.0));
        assert!(!user_gate(&[0.0, 0.0], &v[..2], -1.0));
    }

    #[test]
    fn identical_families_score_three_orthogonal_score_zero() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::matrix(1, 2, vec![0.6, 0.8]));
        let bundle = InterestBundle { e1: v, e2: v, l: vec![v, v], h: vec![v, v] };
        for s in item_scores(&mut g, &bundle) {
            assert!((g.value(s.score).item() - 3.0).abs() < 1e-9);
        }

        let ex = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]));
        let ey = g.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]));
        let ez = g.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]));
        // c1 = cos(e1, h) = cos(x, y) = 0; c2 = cos(e2, l) = cos(y, z)?
        // choose: e1 = x, e2 = y, h = y? need h ⟂ e1, l ⟂ e2, h ⟂ l
        let bundle = InterestBundle { e1: ex, e2: ey, l: vec![ex], h: vec![ey] };
        // c1 = cos(x, y) = 0; c2 = cos(y, x) = 0; c3 = cos(y, x) = 0
        let s = &item_scores(&mut g, &bundle)[0];
        assert_eq!(g.value(s.score).item(), 0.0);
        let _ = ez;
    }

    #[test]
    fn scores_match_direct_cosine_recomputation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (e1v, e2v) = (mk(&mut rng), mk(&mut rng));
        let hs: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
        let ls: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();

        let mut g = Graph::<f64>::new();
        let e1 = g.constant(Tensor::matrix(1, d, e1v.clone()));
        let e2 = g.constant(Tensor::matrix(1, d, e2v.clone()));
        let h: Vec<Var> = hs.iter().map(|v| g.constant(Tensor::matrix(1, d, v.clone()))).collect();
        let l: Vec<Var> = ls.iter().map(|v| g.constant(Tensor::matrix(1, d, v.clone()))).collect();
        let bundle = InterestBundle { e1, e2, l, h };
        let scores = item_scores(&mut g, &bundle);

        for (t, s) in scores.iter().enumerate() {
            let want =
                cosine_value(&e1v, &hs[t]) + cosine_value(&e2v, &ls[t]) + cosine_value(&hs[t], &ls[t]);
            assert!((g.value(s.score).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation_limits_are_deterministic() {
        for (s, want) in [(1e6, true), (-1e6, false)] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut g = Graph::<f64>::new();
                let score = g.constant(Tensor::scalar(s));
                let sample = gumbel_sigmoid(&mut g, score, &cfg(), &mut rng);
                assert_eq!(sample.keep, want);
                assert_eq!(g.value(sample.m).item(), if want { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn boundary_half_maps_to_drop_under_strict_greater() {
        // U = e^{−1} with ε → 0 gives g = −log(−log U) = −log 1 = 0 exactly
        let u = (-1.0f64).exp();
        let noise = gumbel_noise(u, 0.0);
        assert_eq!(noise, 0.0);
        let mut g = Graph::<f64>::new();
        let score = g.constant(Tensor::scalar(0.0));
        let sample = gumbel_sigmoid_with_noise(&mut g, score, noise, &cfg());
        assert_eq!(g.value(sample.y).item(), 0.5);
        assert!(!sample.keep);
        assert_eq!(g.value(sample.m).item(), 0.0);
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let mut g = Graph::<f64>::new();
        let score = g.leaf(Tensor::scalar(0.7));
        let sample = gumbel_sigmoid_with_noise(&mut g, score, 0.3, &cfg());
        g.backward(sample.m);
        let got = g.grad(score).unwrap().item();
        // dy/dscore = y(1−y)/τ
        let y = g.value(sample.y).item();
        assert!((got - y * (1.0 - y)).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_reproduces_masks_bit_exactly() {
        let run = |seed: u64| -> Vec<bool> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            (0..64)
                .map(|i| {
                    let score = g.constant(Tensor::scalar((i as f64 / 8.0) - 1.5));
                    gumbel_sigmoid(&mut g, score, &cfg(), &mut rng).keep
                })
                .collect()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43), "different seeds should differ somewhere");
    }

    #[test]
    fn raising_score_never_flips_keep_to_drop() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: f64 = rng.gen();
            let noise = gumbel_noise(u, 1e-10);
            let mut prev_keep = false;
            for step in 0..61 {
                let s = -3.0 + step as f64 * 0.1;
                let mut g = Graph::<f64>::new();
                let score = g.constant(Tensor::scalar(s));
                let sample = gumbel_sigmoid_with_noise(&mut g, score, noise, &cfg());
                assert!(
                    sample.keep || !prev_keep,
                    "keep flipped back to drop at score {s} (seed {seed})"
                );
                prev_keep = sample.keep;
            }
        }
    }

    #[test]
    fn hard_outputs_binary_soft_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        for i in 0..200 {
            let s = -3.0 + 6.0 * (i as f64 / 199.0);
            let score = g.constant(Tensor::scalar(s));
            let sample = gumbel_sigmoid(&mut g, score, &cfg(), &mut rng);
            let m = g.value(sample.m).item();
            let y = g.value(sample.y).item();
            assert!(m == 0.0 || m == 1.0);
            assert!(y > 0.0 && y < 1.0, "soft value {y} escaped (0,1)");
        }
    }

    #[test]
    fn soft_mode_returns_relaxation_directly() {
        let mut g = Graph::<f64>::new();
        let score = g.constant(Tensor::scalar(1.2));
        let soft_cfg = GateConfig { hard: false, ..cfg() };
        let sample = gumbel_sigmoid_with_noise(&mut g, score, 0.0, &soft_cfg);
        assert_eq!(g.value(sample.m).item(), g.value(sample.y).item());
    }

    #[test]
    fn apply_mask_examples() {
        assert_eq!(apply_mask(&[4, 5, 6], &[1, 1, 1]), vec![4, 5, 6]);
        assert_eq!(apply_mask(&[4, 5, 6], &[1, 0, 1]), vec![4, 6]);
        assert_eq!(apply_mask(&[4, 5, 6], &[0, 0, 0]), vec![6]);
    }

    #[test]
    fn tau_anneal_schedule_is_linear() {
        let c = GateConfig { tau_anneal_to: Some(0.5), ..cfg() };
        assert_eq!(c.tau_at(0, 11), 1.0);
        assert!((c.tau_at(5, 11) - 0.75).abs() < 1e-12);
        assert_eq!(c.tau_at(10, 11), 0.5);
        // no schedule: constant
        assert_eq!(cfg().tau_at(7, 11), 1.0);
    }
}
