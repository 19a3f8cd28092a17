//! Release gate for the workspace: nine checks covering gradient correctness,
//! loss identities, the stochastic mask contract, data anchoring, ranking
//! metrics, the synthetic noise-recovery benchmark, ablation ordering, the
//! gate-threshold sweep, and bit-level determinism.
//!
//! Each test prints one `acceptance N <name>: PASS|FAIL ...` line with the
//! measured numbers (visible with `--nocapture`, or in the failure report),
//! then asserts. Budgets: the gradient suite must finish in under 60 s and
//! the noise-recovery benchmark in under 15 min.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::distributions::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use seqdn_core::alignment::{alignment_loss, info_nce, AlignConfig, InterestBundle};
use seqdn_core::dataio::{
    build_sequences, dataset_stats, k_core_filter, leave_one_out_split, load_interactions, newest,
    Catalog, Interaction, LogFormat, PreprocessConfig, SplitUser,
};
use seqdn_core::denoiser::{gumbel_sigmoid, gumbel_sigmoid_with_noise, GateConfig};
use seqdn_core::encoder::{gru_forward, register_encoder_params, score_items, EncoderDims};
use seqdn_core::eval::{
    evaluate, generate_synthetic, noise_recovery, EvalError, EvalExample, ModelScorer, Scorer,
    SyntheticSpec,
};
use seqdn_core::semantic::{project, PrefixProvider, SemanticTable};
use seqdn_core::trainer::{train, write_history, TrainConfig};
use seqdn_core::{Graph, ParamStore, Tensor, Var};

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn rt(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let d = Uniform::new(lo, hi);
    Tensor::matrix(r, c, (0..r * c).map(|_| d.sample(rng)).collect())
}

fn mean_f64(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Everything deterministic built from one synthetic benchmark draw.
struct Bench {
    split: Vec<SplitUser>,
    catalog: Catalog,
    table: SemanticTable<f64>,
    provider: PrefixProvider<f64>,
    labels_by_user: HashMap<usize, Vec<u8>>,
}

fn build_bench(spec: &SyntheticSpec) -> Bench {
    let data = generate_synthetic::<f64>(spec);
    let pre = PreprocessConfig { k_core: 5, max_len: 32 };
    let rows = k_core_filter(&data.interactions, pre.k_core);
    let (catalog, seqs) = build_sequences(&rows, &pre);
    let split = leave_one_out_split(&seqs, &pre);
    let table =
        SemanticTable::from_memory(data.semantic_rows.clone(), spec.sem_dim, &catalog).unwrap();
    let labels_by_user = data
        .labels
        .iter()
        .filter_map(|(id, flags)| catalog.user_index(id).map(|u| (u, flags.clone())))
        .collect();
    Bench { split, catalog, table, provider: PrefixProvider::MeanPool, labels_by_user }
}

struct RunMetrics {
    ndcg10: f64,
    ndcg5: f64,
    hr5: f64,
    f1: Option<f64>,
    n_flagged: usize,
    /// Ground-truth noise labels over the positions the run could flag.
    noisy: Vec<bool>,
}

fn run_one(b: &Bench, cfg: &TrainConfig<f64>) -> RunMetrics {
    let out = train(&b.split, &b.catalog, &b.table, &b.provider, cfg).unwrap();
    let test: Vec<EvalExample> = b
        .split
        .iter()
        .map(|s| EvalExample {
            user: s.user,
            prefix: newest(&s.test_prefix, cfg.max_len),
            target: s.test_target,
        })
        .collect();
    let mut scorer = ModelScorer {
        store: &out.store,
        params: &out.params,
        table: &b.table,
        provider: &b.provider,
        catalog: &b.catalog,
        gate: cfg.gate,
        mode: cfg.score_mode(),
        denoise: true,
    };
    let report = evaluate(&mut scorer, &test, b.catalog.n_items()).unwrap();
    let mut flagged = Vec::new();
    let mut noisy = Vec::new();
    for m in &out.final_masks {
        let Some(labels) = b.labels_by_user.get(&m.user) else { continue };
        for (t, &bit) in m.bits.iter().enumerate() {
            flagged.push(bit == 0);
            noisy.push(labels[m.offset + t] == 1);
        }
    }
    let rec = noise_recovery::<f64>(&flagged, &noisy);
    RunMetrics {
        ndcg10: report.ndcg.1,
        ndcg5: report.ndcg.0,
        hr5: report.hr.0,
        f1: rec.f1,
        n_flagged: rec.n_flagged,
        noisy,
    }
}

/// Frozen benchmark training config used by the recovery and ablation gates.
fn frozen_cfg(seed: u64) -> TrainConfig<f64> {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        patience: 10,
        max_epochs: 20,
        seed,
        max_len: 32,
        dims: EncoderDims { d_item: 16, d_hidden: 24, n_layers: 2 },
        gate: GateConfig { theta: -0.9, ..GateConfig::default() },
        ..TrainConfig::default()
    }
}

/// The 20 training runs shared by the noise-recovery and ablation gates:
/// seeds 1-5 for the full model plus three ablation arms per seed.
struct Shared {
    full: Vec<RunMetrics>,
    baseline: Vec<f64>,
    long_arm: Vec<f64>,
    short_arm: Vec<f64>,
    secs: f64,
}

static SHARED: OnceLock<Shared> = OnceLock::new();

fn shared_runs() -> &'static Shared {
    SHARED.get_or_init(|| {
        let t0 = Instant::now();
        let bench = build_bench(&SyntheticSpec::default());
        let mut sh = Shared {
            full: Vec::new(),
            baseline: Vec::new(),
            long_arm: Vec::new(),
            short_arm: Vec::new(),
            secs: 0.0,
        };
        for seed in 1..=5u64 {
            let base = frozen_cfg(seed);
            sh.full.push(run_one(&bench, &base));
            // plain next-item training: alignment and reconstruction weights
            // zeroed, gate threshold above 1 so no user is ever masked
            let plain = TrainConfig {
                w_info: 0.0,
                w_recon: 0.0,
                gate: GateConfig { theta: 1.5, ..GateConfig::default() },
                ..base.clone()
            };
            sh.baseline.push(run_one(&bench, &plain).ndcg10);
            sh.long_arm
                .push(run_one(&bench, &TrainConfig { long_only: true, ..base.clone() }).ndcg10);
            sh.short_arm
                .push(run_one(&bench, &TrainConfig { short_only: true, ..base.clone() }).ndcg10);
        }
        sh.secs = t0.elapsed().as_secs_f64();
        sh
    })
}

// ---------------------------------------------------------------------------
// 1. finite-difference gradient checks
// ---------------------------------------------------------------------------

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn eval_case(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let v = g.value(loss);
    assert_eq!(v.data().len(), 1, "case loss must be scalar");
    v.item()
}

/// Central finite differences against reverse-mode gradients; returns the
/// worst relative error and the number of partials checked.
fn check_case(case: &Case) -> (f64, usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars);
    g.backward(loss);
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| {
            g.grad(v).map(|gr| gr.data().to_vec()).unwrap_or_else(|| vec![0.0; t.data().len()])
        })
        .collect();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut n = 0usize;
    for i in 0..case.inputs.len() {
        for j in 0..case.inputs[i].data().len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval_case(&case.build, &plus) - eval_case(&case.build, &minus)) / (2.0 * h);
            let an = grads[i][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            n += 1;
        }
    }
    (max_rel, n)
}

/// Builds a scalar loss by comparing the op output against a fixed target.
fn vs_target(k: Tensor, f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Build {
    Box::new(move |g, vs| {
        let out = f(g, vs);
        let kk = g.constant(k.clone());
        g.mse(out, kk)
    })
}

/// Gradient flow through the full encoder stack: perturbs every registered
/// parameter (embeddings, both GRU layers, prediction head) under a loss that
/// touches the hidden states and the item logits.
fn check_encoder_params() -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = EncoderDims { d_item: 3, d_hidden: 4, n_layers: 2 };
    let mut store = ParamStore::new();
    let params = register_encoder_params(&mut store, &mut rng, 5, dims);
    let ids: Vec<_> = store.ids().collect();
    let seq = [1usize, 3, 2, 4, 1];
    let target = rt(&mut rng, seq.len(), 4, -0.5, 0.5);

    let eval = |st: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = gru_forward(&mut g, st, &params, &seq, None);
        let scores = score_items(&mut g, st, &params, out.e2);
        let ce_vec = g.softmax_xent(scores, &[2]);
        let ce = g.mean(ce_vec);
        let hs = g.concat_rows(&out.h);
        let k = g.constant(target.clone());
        let fit = g.mse(hs, k);
        let loss = g.add(ce, fit);
        g.value(loss).item()
    };

    {
        let mut g = Graph::new();
        let out = gru_forward(&mut g, &store, &params, &seq, None);
        let scores = score_items(&mut g, &store, &params, out.e2);
        let ce_vec = g.softmax_xent(scores, &[2]);
        let ce = g.mean(ce_vec);
        let hs = g.concat_rows(&out.h);
        let k = g.constant(target.clone());
        let fit = g.mse(hs, k);
        let loss = g.add(ce, fit);
        g.backward(loss);
        g.accumulate_param_grads(&mut store);
    }
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            store
                .grad(id)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.value(id).data().len()])
        })
        .collect();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut n = 0usize;
    for (gi, &id) in ids.iter().enumerate() {
        for j in 0..store.value(id).data().len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&store);
            store.value_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&store);
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[gi][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            n += 1;
        }
    }
    (max_rel, n)
}

#[test]
fn acceptance_1_finite_difference_gradients() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cases: Vec<Case> = Vec::new();

    let a34 = rt(&mut rng, 3, 4, -2.0, 2.0);
    let b34 = rt(&mut rng, 3, 4, -2.0, 2.0);
    let k34 = rt(&mut rng, 3, 4, -1.0, 1.0);
    cases.push(Case {
        name: "add",
        inputs: vec![a34.clone(), b34.clone()],
        build: vs_target(k34.clone(), |g, v| g.add(v[0], v[1])),
    });
    cases.push(Case {
        name: "sub",
        inputs: vec![a34.clone(), b34.clone()],
        build: vs_target(k34.clone(), |g, v| g.sub(v[0], v[1])),
    });
    cases.push(Case {
        name: "mul",
        inputs: vec![a34.clone(), b34.clone()],
        build: vs_target(k34.clone(), |g, v| g.mul(v[0], v[1])),
    });
    cases.push(Case {
        name: "scale",
        inputs: vec![a34.clone()],
        build: vs_target(k34.clone(), |g, v| g.scale(v[0], 1.7)),
    });
    cases.push(Case {
        name: "matmul",
        inputs: vec![rt(&mut rng, 3, 4, -1.5, 1.5), rt(&mut rng, 4, 2, -1.5, 1.5)],
        build: vs_target(rt(&mut rng, 3, 2, -1.0, 1.0), |g, v| g.matmul(v[0], v[1])),
    });
    cases.push(Case {
        name: "transpose",
        inputs: vec![a34.clone()],
        build: vs_target(rt(&mut rng, 4, 3, -1.0, 1.0), |g, v| g.transpose(v[0])),
    });
    cases.push(Case {
        name: "concat_rows",
        inputs: vec![rt(&mut rng, 2, 3, -1.0, 1.0), rt(&mut rng, 3, 3, -1.0, 1.0)],
        build: vs_target(rt(&mut rng, 5, 3, -1.0, 1.0), |g, v| g.concat_rows(&[v[0], v[1]])),
    });
    cases.push(Case {
        name: "stack_scalars",
        inputs: vec![
            rt(&mut rng, 1, 1, -1.0, 1.0),
            rt(&mut rng, 1, 1, -1.0, 1.0),
            rt(&mut rng, 1, 1, -1.0, 1.0),
        ],
        build: Box::new(|g, v| {
            let s = g.stack_scalars(&[v[0], v[1], v[2]]);
            let sq = g.mul(s, s);
            g.mean(sq)
        }),
    });
    cases.push(Case {
        name: "gather_rows_with_repeats",
        inputs: vec![rt(&mut rng, 4, 3, -1.0, 1.0)],
        build: vs_target(rt(&mut rng, 5, 3, -1.0, 1.0), |g, v| {
            g.gather_rows(v[0], &[0, 2, 1, 2, 0])
        }),
    });
    cases.push(Case {
        name: "slice_rows",
        inputs: vec![rt(&mut rng, 5, 3, -1.0, 1.0)],
        build: vs_target(rt(&mut rng, 3, 3, -1.0, 1.0), |g, v| g.slice_rows(v[0], 1, 3)),
    });
    cases.push(Case {
        name: "reshape",
        inputs: vec![a34.clone()],
        build: vs_target(rt(&mut rng, 4, 3, -1.0, 1.0), |g, v| g.reshape(v[0], vec![4, 3])),
    });
    cases.push(Case {
        name: "sigmoid",
        inputs: vec![rt(&mut rng, 3, 4, -3.0, 3.0)],
        build: vs_target(k34.clone(), |g, v| g.sigmoid(v[0])),
    });
    cases.push(Case {
        name: "tanh",
        inputs: vec![rt(&mut rng, 3, 4, -3.0, 3.0)],
        build: vs_target(k34.clone(), |g, v| g.tanh(v[0])),
    });
    cases.push(Case {
        name: "exp",
        inputs: vec![rt(&mut rng, 3, 4, -1.5, 1.5)],
        build: vs_target(k34.clone(), |g, v| g.exp(v[0])),
    });
    cases.push(Case {
        name: "log",
        inputs: vec![rt(&mut rng, 3, 4, 0.3, 3.0)],
        build: vs_target(k34.clone(), |g, v| g.log(v[0])),
    });
    cases.push(Case {
        name: "mean_of_square",
        inputs: vec![a34.clone()],
        build: Box::new(|g, v| {
            let sq = g.mul(v[0], v[0]);
            g.mean(sq)
        }),
    });
    cases.push(Case {
        name: "sum_of_product",
        inputs: vec![a34.clone(), b34.clone()],
        build: Box::new(|g, v| {
            let p = g.mul(v[0], v[1]);
            g.sum(p)
        }),
    });
    cases.push(Case {
        name: "l2_norm",
        inputs: vec![rt(&mut rng, 1, 6, 0.5, 1.5)],
        build: Box::new(|g, v| g.l2_norm(v[0])),
    });
    cases.push(Case {
        name: "cosine",
        inputs: vec![rt(&mut rng, 1, 5, -1.5, 1.5), rt(&mut rng, 1, 5, -1.5, 1.5)],
        build: Box::new(|g, v| g.cosine(v[0], v[1])),
    });
    cases.push(Case {
        name: "normalize_rows",
        inputs: vec![rt(&mut rng, 3, 4, 0.4, 1.4)],
        build: vs_target(k34.clone(), |g, v| g.normalize_rows(v[0])),
    });
    cases.push(Case {
        name: "scale_rows",
        inputs: vec![a34.clone(), rt(&mut rng, 3, 1, 0.2, 1.2)],
        build: vs_target(k34.clone(), |g, v| g.scale_rows(v[0], v[1])),
    });
    cases.push(Case {
        name: "add_row",
        inputs: vec![a34.clone(), rt(&mut rng, 1, 4, -1.0, 1.0)],
        build: vs_target(k34.clone(), |g, v| g.add_row(v[0], v[1])),
    });
    cases.push(Case {
        name: "softmax_xent",
        inputs: vec![rt(&mut rng, 4, 7, -2.0, 2.0)],
        build: Box::new(|g, v| {
            let per_row = g.softmax_xent(v[0], &[3, 0, 6, 2]);
            g.mean(per_row)
        }),
    });
    cases.push(Case {
        name: "mse",
        inputs: vec![a34.clone(), b34.clone()],
        build: Box::new(|g, v| g.mse(v[0], v[1])),
    });
    cases.push(Case {
        name: "info_nce",
        inputs: vec![rt(&mut rng, 4, 6, -1.0, 1.0), rt(&mut rng, 4, 6, -1.0, 1.0)],
        build: Box::new(|g, v| info_nce(g, v[0], v[1], 0.1)),
    });
    cases.push(Case {
        name: "projection_affine",
        inputs: vec![
            rt(&mut rng, 5, 4, -1.0, 1.0),
            rt(&mut rng, 4, 3, -1.0, 1.0),
            rt(&mut rng, 1, 3, -0.5, 0.5),
        ],
        build: vs_target(rt(&mut rng, 5, 3, -1.0, 1.0), |g, v| project(g, v[0], v[1], v[2])),
    });
    cases.push(Case {
        name: "gumbel_sigmoid_soft",
        inputs: vec![rt(&mut rng, 1, 1, 0.5, 1.0)],
        build: Box::new(|g, v| {
            let cfg = GateConfig { hard: false, ..GateConfig::default() };
            gumbel_sigmoid_with_noise(g, v[0], 0.37, &cfg).m
        }),
    });
    // both alignment terms, over two users with two prefix steps each
    let align_inputs: Vec<Tensor> = (0..12).map(|_| rt(&mut rng, 1, 4, -1.0, 1.0)).collect();
    cases.push(Case {
        name: "alignment_loss",
        inputs: align_inputs,
        build: Box::new(|g, v| {
            let bundles = vec![
                InterestBundle { e1: v[0], e2: v[1], l: vec![v[2], v[3]], h: vec![v[4], v[5]] },
                InterestBundle { e1: v[6], e2: v[7], l: vec![v[8], v[9]], h: vec![v[10], v[11]] },
            ];
            let (l_long, l_short, _) = alignment_loss(g, &bundles, &AlignConfig::default());
            let ws = g.scale(l_short, 0.7);
            g.add(l_long, ws)
        }),
    });

    let mut worst = (0.0f64, "none");
    let mut total = 0usize;
    for case in &cases {
        let (rel, n) = check_case(case);
        total += n;
        if rel > worst.0 {
            worst = (rel, case.name);
        }
        assert!(rel < 1e-4, "gradient check failed for {}: max rel err {rel:.3e}", case.name);
    }
    let (enc_rel, enc_n) = check_encoder_params();
    total += enc_n;
    if enc_rel > worst.0 {
        worst = (enc_rel, "encoder_params");
    }
    assert!(enc_rel < 1e-4, "encoder parameter gradients: max rel err {enc_rel:.3e}");

    let secs = t0.elapsed().as_secs_f64();
    println!(
        "acceptance 1 finite-difference gradients: PASS — {} cases, {} partials, worst rel err {:.2e} ({}), {:.1}s",
        cases.len() + 1,
        total,
        worst.0,
        worst.1,
        secs
    );
    assert!(secs < 60.0, "gradient suite took {secs:.1}s, budget is 60s");
}

// ---------------------------------------------------------------------------
// 2. loss identities
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_loss_identities() {
    // single positive pair with no negatives: contrastive loss is exactly 0
    let mut g = Graph::new();
    let a = g.leaf(Tensor::matrix(1, 4, vec![0.3, -1.2, 0.7, 2.0]));
    let p = g.leaf(Tensor::matrix(1, 4, vec![1.0, 0.2, -0.5, 0.4]));
    let nce = info_nce(&mut g, a, p, 0.1);
    let nce_val = g.value(nce).item();
    assert_eq!(nce_val, 0.0, "single-pair contrastive loss must be exactly 0, got {nce_val}");

    // uniform logits: cross-entropy equals ln(n)
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::matrix(1, 7, vec![0.42; 7]));
    let ce = g.softmax_xent(logits, &[3]);
    let ce_val = g.value(ce).item();
    let expect = (7.0f64).ln();
    assert!(
        (ce_val - expect).abs() <= 1e-9,
        "uniform-logit cross-entropy {ce_val} vs ln(7) {expect}"
    );

    // perfect reconstruction: squared error is exactly 0
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 0.0, 1.5, -0.7]));
    let tgt = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 0.0, 1.5, -0.7]));
    let rec = g.mse(x, tgt);
    assert_eq!(g.value(rec).item(), 0.0, "perfect reconstruction must cost exactly 0");

    // weights (1, 0, 0): the recorded total bit-equals the prediction term
    let spec = SyntheticSpec {
        n_users: 120,
        n_items: 60,
        n_clusters: 4,
        len_min: 10,
        len_max: 18,
        noise_rate: 0.2,
        sem_dim: 8,
        sem_noise: 0.1,
        seed: 9,
    };
    let bench = build_bench(&spec);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        patience: 10,
        max_epochs: 3,
        seed: 3,
        max_len: 32,
        w_info: 0.0,
        w_recon: 0.0,
        dims: EncoderDims { d_item: 8, d_hidden: 10, n_layers: 1 },
        ..TrainConfig::default()
    };
    let out = train(&bench.split, &bench.catalog, &bench.table, &bench.provider, &cfg).unwrap();
    assert!(!out.history.is_empty());
    for row in &out.history {
        assert!(
            row.l_total == row.l_ce,
            "epoch {}: total {} != prediction term {} under weights (1,0,0)",
            row.epoch,
            row.l_total,
            row.l_ce
        );
    }

    println!(
        "acceptance 2 loss identities: PASS — single-pair nce 0, uniform ce ln(7) within 1e-9, perfect recon 0, total==ce bitwise over {} epochs",
        out.history.len()
    );
}

// ---------------------------------------------------------------------------
// 3. stochastic mask contract
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_mask_contract() {
    let cfg = GateConfig::<f64>::default();

    // hard outputs are exactly binary and consistent with the keep flag
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let dist = Uniform::new(-3.0, 3.0);
    for _ in 0..300 {
        let s = g.leaf(Tensor::scalar(dist.sample(&mut rng)));
        let sample = gumbel_sigmoid(&mut g, s, &cfg, &mut rng);
        let m = g.value(sample.m).item();
        let y = g.value(sample.y).item();
        assert!(m == 0.0 || m == 1.0, "hard mask value {m} is not binary");
        assert!(y > 0.0 && y < 1.0, "soft value {y} outside (0,1)");
        assert_eq!(sample.keep, m == 1.0);
        assert_eq!(sample.keep, y > 0.5);
    }

    // straight-through gradient equals the soft path's finite difference
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (score, noise) in [(-2.3, 0.37), (-0.6, 0.9), (0.4, 0.37), (1.7, 0.11)] {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::scalar(score));
        let sample = gumbel_sigmoid_with_noise(&mut g, s, noise, &cfg);
        g.backward(sample.m);
        let an = g.grad(s).unwrap().item();
        let soft_at = |x: f64| -> f64 {
            let mut g = Graph::new();
            let s = g.leaf(Tensor::scalar(x));
            let sample = gumbel_sigmoid_with_noise(&mut g, s, noise, &cfg);
            g.value(sample.y).item()
        };
        let fd = (soft_at(score + h) - soft_at(score - h)) / (2.0 * h);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "straight-through grad at score {score}: rel err {rel:.3e}");
    }

    // a fixed seed reproduces the mask stream bit-exactly
    let stream = |seed: u64| -> (Vec<bool>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut keeps = Vec::new();
        let mut ys = Vec::new();
        for i in 0..100 {
            let s = g.leaf(Tensor::scalar((i % 7) as f64 * 0.3 - 1.0));
            let sample = gumbel_sigmoid(&mut g, s, &cfg, &mut rng);
            keeps.push(sample.keep);
            ys.push(g.value(sample.y).item());
        }
        (keeps, ys)
    };
    let (k1, y1) = stream(123);
    let (k2, y2) = stream(123);
    assert_eq!(k1, k2, "keep stream changed under the same seed");
    assert_eq!(y1, y2, "soft values changed under the same seed");

    // saturated scores decide deterministically regardless of the noise draw
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut g = Graph::new();
    for _ in 0..200 {
        let hi = g.leaf(Tensor::scalar(1e6));
        assert!(gumbel_sigmoid(&mut g, hi, &cfg, &mut rng).keep, "score +1e6 must keep");
        let lo = g.leaf(Tensor::scalar(-1e6));
        assert!(!gumbel_sigmoid(&mut g, lo, &cfg, &mut rng).keep, "score -1e6 must drop");
    }

    println!(
        "acceptance 3 mask contract: PASS — 300 binary draws, straight-through worst rel err {worst:.2e}, seeded streams bit-identical, saturation deterministic over 200 draws"
    );
}

// ---------------------------------------------------------------------------
// 4. data anchoring
// ---------------------------------------------------------------------------

fn assert_kcore_fixpoint(events: &[Interaction], k: usize) -> usize {
    let filtered = k_core_filter(events, k);
    let mut user_deg: HashMap<&str, usize> = HashMap::new();
    let mut item_deg: HashMap<&str, usize> = HashMap::new();
    for e in &filtered {
        *user_deg.entry(e.user_id.as_str()).or_default() += 1;
        *item_deg.entry(e.item_id.as_str()).or_default() += 1;
    }
    for (u, d) in &user_deg {
        assert!(*d >= k, "user {u} kept with degree {d} < {k}");
    }
    for (i, d) in &item_deg {
        assert!(*d >= k, "item {i} kept with degree {d} < {k}");
    }
    let again = k_core_filter(&filtered, k);
    assert_eq!(again, filtered, "k-core output is not a fixpoint");
    filtered.len()
}

#[test]
fn acceptance_4_data_anchoring() {
    // fixpoint property on generated interactions (always runs)
    let data =
        generate_synthetic::<f64>(&SyntheticSpec { n_users: 200, ..SyntheticSpec::default() });
    let kept = assert_kcore_fixpoint(&data.interactions, 5);

    let path = std::env::var("SEQDN_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"));
    if path.is_file() {
        let rows = load_interactions(&path, LogFormat::MovieLens).unwrap();
        let pre = PreprocessConfig::default();
        let (catalog, seqs) = build_sequences(&rows, &pre);
        let stats = dataset_stats(&catalog, &seqs);
        assert_eq!(
            (stats.n_users, stats.n_items, stats.n_actions),
            (943, 1682, 100_000),
            "MovieLens-100K ingestion stats mismatch"
        );
        let kept_real = assert_kcore_fixpoint(&rows, 5);
        println!(
            "acceptance 4 data anchoring: PASS — ml-100k 943 users / 1682 items / 100000 actions; 5-core fixpoints verified ({kept_real} real rows, {kept} generated rows)"
        );
    } else {
        println!(
            "acceptance 4 data anchoring: PASS — 5-core fixpoint verified on {kept} generated rows; MovieLens-100K stats check SKIPPED (no file at {}; set SEQDN_ML100K to point at u.data)",
            path.display()
        );
    }
}

// ---------------------------------------------------------------------------
// 5. ranking-metric oracle
// ---------------------------------------------------------------------------

struct TableScorer {
    rows: Vec<Vec<f64>>,
}

impl Scorer<f64> for TableScorer {
    fn scores(&mut self, user: usize, _prefix: &[usize]) -> Result<Vec<f64>, EvalError> {
        Ok(self.rows[user].clone())
    }
}

/// Independent tree-halving mean (matches the evaluator's documented
/// pairwise-in-user-order reduction).
fn half_mean(xs: &[f64]) -> f64 {
    fn hs(x: &[f64]) -> f64 {
        match x.len() {
            0 => 0.0,
            1 => x[0],
            2 => x[0] + x[1],
            n => hs(&x[..n / 2]) + hs(&x[n / 2..]),
        }
    }
    hs(xs) / xs.len() as f64
}

#[test]
fn acceptance_5_ranking_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n_users, n_items) = (10usize, 37usize);
    let mut rows: Vec<Vec<f64>> =
        (0..n_users).map(|_| (0..n_items).map(|_| rng.gen::<f64>()).collect()).collect();
    // deliberate ties to exercise the ascending-index tie rule
    rows[2][9] = rows[2][5];
    rows[7][0] = rows[7][30];
    let mut targets: Vec<usize> = (0..n_users).map(|_| rng.gen_range(1..=n_items)).collect();
    targets[2] = 10; // the tied item: its twin at a lower index ranks ahead
    targets[7] = 31;

    let examples: Vec<EvalExample> = (0..n_users)
        .map(|u| EvalExample { user: u, prefix: vec![1], target: targets[u] })
        .collect();
    let report =
        evaluate(&mut TableScorer { rows: rows.clone() }, &examples, n_items).unwrap();

    // brute force: sort every item by (score desc, index asc), find the target
    let mut hr = vec![Vec::new(); 3];
    let mut nd = vec![Vec::new(); 3];
    for u in 0..n_users {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.sort_by(|&a, &b| rows[u][b].partial_cmp(&rows[u][a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == targets[u] - 1).unwrap() + 1;
        for (ki, &k) in [5usize, 10, 20].iter().enumerate() {
            hr[ki].push(if rank <= k { 1.0 } else { 0.0 });
            nd[ki].push(if rank <= k { 1.0 / ((rank as f64) + 1.0).log2() } else { 0.0 });
        }
    }
    let got = [report.hr.0, report.hr.1, report.hr.2, report.ndcg.0, report.ndcg.1, report.ndcg.2];
    let want = [
        half_mean(&hr[0]),
        half_mean(&hr[1]),
        half_mean(&hr[2]),
        half_mean(&nd[0]),
        half_mean(&nd[1]),
        half_mean(&nd[2]),
    ];
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(g, w, "metric {i} differs from brute force: {g} vs {w}");
    }

    // a target ranked exactly third scores 1/log2(4) = 0.5
    let rows3 = vec![vec![0.8, 0.5, 0.9, 0.1, 0.1, 0.1]];
    let ex3 = vec![EvalExample { user: 0, prefix: vec![1], target: 2 }];
    let rep3 = evaluate(&mut TableScorer { rows: rows3 }, &ex3, 6).unwrap();
    assert_eq!(rep3.ndcg.0, 0.5, "rank-3 case must score exactly 0.5");
    assert_eq!(rep3.hr.0, 1.0);

    println!(
        "acceptance 5 ranking-metric oracle: PASS — 6 metrics bit-equal to brute force over 10 users (HR@5 {:.4}, NDCG@10 {:.6}); rank-3 case = 0.5",
        report.hr.0, report.ndcg.1
    );
}

// ---------------------------------------------------------------------------
// 6. synthetic noise recovery
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_synthetic_noise_recovery() {
    let sh = shared_runs();
    assert!(sh.secs < 900.0, "benchmark block took {:.0}s, budget is 900s", sh.secs);

    // random-flagging baseline at the injected noise rate, same positions
    let universe = &sh.full[0].noisy;
    let mut random_f1 = Vec::new();
    for seed in 1..=5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let flags: Vec<bool> = universe.iter().map(|_| rng.gen::<f64>() < 0.2).collect();
        random_f1.push(noise_recovery::<f64>(&flags, universe).f1.unwrap_or(0.0));
    }
    let random_mean = mean_f64(&random_f1);
    let bar = 1.5 * random_mean;

    let model_f1: Vec<f64> = sh.full.iter().map(|r| r.f1.unwrap_or(0.0)).collect();
    let model_mean = mean_f64(&model_f1);
    let flags: Vec<usize> = sh.full.iter().map(|r| r.n_flagged).collect();

    let ok = model_mean >= bar;
    println!(
        "acceptance 6 synthetic noise recovery: {} — model mean F1 {:.4} (per-seed {:?}, flags {:?}) vs required {:.4} = 1.5 x random baseline {:.4}; block {:.0}s",
        if ok { "PASS" } else { "FAIL" },
        model_mean,
        model_f1.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
        flags,
        bar,
        random_mean,
        sh.secs
    );
    assert!(
        ok,
        "noise-flag F1 mean {model_mean:.4} is below {bar:.4} (1.5 x the random-flagging baseline {random_mean:.4}). \
         The trained alignment saturates every combined keep-score positive (the semantic projection has no \
         competing objective), so the fixed zero threshold almost never fires even though the scores do \
         separate noise from clean; see the testing notes in the README."
    );
}

// ---------------------------------------------------------------------------
// 7. denoising lift over ablations
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_denoising_lift() {
    let sh = shared_runs();
    let full: Vec<f64> = sh.full.iter().map(|r| r.ndcg10).collect();
    let (mf, mb, ml, ms) =
        (mean_f64(&full), mean_f64(&sh.baseline), mean_f64(&sh.long_arm), mean_f64(&sh.short_arm));
    let ok = mf > mb && mf > ml && mf > ms;
    println!(
        "acceptance 7 denoising lift: {} — mean test NDCG@10 over 5 seeds: full {:.4} vs plain {:.4} (+{:.4}), long-only {:.4} (+{:.4}), short-only {:.4} (+{:.4})",
        if ok { "PASS" } else { "FAIL" },
        mf,
        mb,
        mf - mb,
        ml,
        mf - ml,
        ms,
        mf - ms
    );
    assert!(mf > mb, "full model {mf:.4} does not beat the plain baseline {mb:.4}");
    assert!(mf > ml, "full model {mf:.4} does not beat long-only {ml:.4}");
    assert!(mf > ms, "full model {mf:.4} does not beat short-only {ms:.4}");
}

// ---------------------------------------------------------------------------
// 8. gate-threshold sweep
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_threshold_sweep() {
    let bench = build_bench(&SyntheticSpec::default());
    let thetas = [-0.9, -0.5, -0.1, 0.3, 0.7, 0.9];
    let seeds = [1u64, 2, 3];

    let mut csv = String::from("theta,HR@5,NDCG@5\n");
    let mut by_theta = Vec::new();
    for &theta in &thetas {
        let mut hr5 = Vec::new();
        let mut nd5 = Vec::new();
        for &seed in &seeds {
            let cfg = TrainConfig {
                max_epochs: 12,
                gate: GateConfig { theta, ..GateConfig::default() },
                ..frozen_cfg(seed)
            };
            let m = run_one(&bench, &cfg);
            hr5.push(m.hr5);
            nd5.push(m.ndcg5);
        }
        let (h, n) = (mean_f64(&hr5), mean_f64(&nd5));
        csv.push_str(&format!("{theta},{h},{n}\n"));
        by_theta.push((theta, h, n));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta_sweep.csv");
    std::fs::write(&path, &csv).unwrap();

    // read the numbers back out of the artifact the sweep produced
    let text = std::fs::read_to_string(&path).unwrap();
    let mut nd_low = None;
    let mut nd_high = None;
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let theta: f64 = parts.next().unwrap().parse().unwrap();
        let _hr: f64 = parts.next().unwrap().parse().unwrap();
        let nd: f64 = parts.next().unwrap().parse().unwrap();
        if theta == -0.9 {
            nd_low = Some(nd);
        }
        if theta == 0.9 {
            nd_high = Some(nd);
        }
    }
    let (nd_low, nd_high) = (nd_low.unwrap(), nd_high.unwrap());

    let ok = nd_high <= nd_low;
    let rows: Vec<String> =
        by_theta.iter().map(|(t, _, n)| format!("{t}:{n:.4}")).collect();
    println!(
        "acceptance 8 gate-threshold sweep: {} — mean NDCG@5 over 3 seeds by theta [{}]; 0.9 ({nd_high:.4}) <= -0.9 ({nd_low:.4})",
        if ok { "PASS" } else { "FAIL" },
        rows.join(", ")
    );
    assert!(
        ok,
        "NDCG@5 at theta 0.9 ({nd_high:.4}) exceeds theta -0.9 ({nd_low:.4}); high thresholds should not win"
    );
}

// ---------------------------------------------------------------------------
// 9. determinism
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_determinism() {
    let spec = SyntheticSpec {
        n_users: 150,
        n_items: 120,
        n_clusters: 4,
        len_min: 12,
        len_max: 24,
        noise_rate: 0.2,
        sem_dim: 12,
        sem_noise: 0.1,
        seed: 11,
    };
    let bench = build_bench(&spec);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        patience: 10,
        max_epochs: 4,
        seed: 5,
        max_len: 32,
        dims: EncoderDims { d_item: 8, d_hidden: 12, n_layers: 1 },
        ..TrainConfig::default()
    };

    let run = || -> (Vec<u8>, String, Vec<(String, usize, String)>) {
        let out =
            train(&bench.split, &bench.catalog, &bench.table, &bench.provider, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&path, &out.history).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let test: Vec<EvalExample> = bench
            .split
            .iter()
            .map(|s| EvalExample {
                user: s.user,
                prefix: newest(&s.test_prefix, cfg.max_len),
                target: s.test_target,
            })
            .collect();
        let mut scorer = ModelScorer {
            store: &out.store,
            params: &out.params,
            table: &bench.table,
            provider: &bench.provider,
            catalog: &bench.catalog,
            gate: cfg.gate,
            mode: cfg.score_mode(),
            denoise: true,
        };
        let report = evaluate(&mut scorer, &test, bench.catalog.n_items()).unwrap();
        (bytes, report.to_text(), out.mask_dump)
    };

    let (h1, r1, m1) = run();
    let (h2, r2, m2) = run();
    assert_eq!(h1, h2, "history CSVs differ between identical runs");
    assert_eq!(r1, r2, "metric reports differ between identical runs");
    assert_eq!(m1, m2, "mask dumps differ between identical runs");

    println!(
        "acceptance 9 determinism: PASS — {}-byte history, {}-char report, and {}-row mask dump byte-identical across reruns",
        h1.len(),
        r1.len(),
        m1.len()
    );
}
