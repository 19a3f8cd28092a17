//! Implementations of the seven subcommands. All artifacts are plain text or
//! CSV; every command is deterministic under a fixed seed and config.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use seqdn_core::dataio::{
    build_sequences, dataset_stats, k_core_filter, leave_one_out_split, load_interactions, newest,
    Catalog, SplitUser,
};
use seqdn_core::denoiser::{write_mask_dump, GateConfig, ScoreMode};
use seqdn_core::encoder::{EncoderDims, EncoderParams, GruLayerIds};
use seqdn_core::eval::{
    evaluate_full, generate_synthetic, noise_recovery, popularity_buckets, read_noise_labels,
    train_counts, BucketMode, EvalExample, MetricsReport, ModelScorer,
};
use seqdn_core::optim::{load_checkpoint, save_checkpoint, Checkpoint};
use seqdn_core::semantic::{
    load_semantic_table, pseudo_embed, write_semb_text, PrefixProvider, SemanticTable,
};
use seqdn_core::trainer::{train, write_history, ModelParams, TrainConfig, TrainOutcome};
use seqdn_core::ParamStore;

use crate::config::{parse_format, RunConfig};

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

pub struct DataBundle {
    pub catalog: Catalog,
    pub split: Vec<SplitUser>,
    pub table: SemanticTable<f64>,
    pub provider: PrefixProvider<f64>,
}

/// Loads interactions, applies k-core filtering, builds the leave-one-out
/// split, and attaches item vectors (from a SEMB file or pseudo-random).
pub fn load_bundle(
    cfg: &RunConfig,
    input_override: Option<&Path>,
    emb_override: Option<&Path>,
) -> Result<DataBundle> {
    let input = match input_override {
        Some(p) => p.to_path_buf(),
        None if !cfg.data.input.is_empty() => PathBuf::from(&cfg.data.input),
        None => bail!("no interaction log given (use --input/--split or set [data].input)"),
    };
    let format = cfg.log_format()?;
    let rows = load_interactions(&input, format)
        .with_context(|| format!("loading {}", input.display()))?;
    if rows.is_empty() {
        bail!("{} contains no interactions", input.display());
    }
    let pre = cfg.preprocess();
    let filtered = k_core_filter(&rows, pre.k_core);
    if filtered.is_empty() {
        bail!("{}-core filtering removed every interaction", pre.k_core);
    }
    let (catalog, seqs) = build_sequences(&filtered, &pre);
    let split = leave_one_out_split(&seqs, &pre);
    if split.is_empty() {
        bail!("no user has enough interactions for a train/valid/test split");
    }
    let table = match emb_override {
        Some(p) => load_semantic_table::<f64>(p, &catalog)
            .with_context(|| format!("loading item vectors from {}", p.display()))?,
        None if !cfg.semantic.emb.is_empty() => {
            let p = PathBuf::from(&cfg.semantic.emb);
            load_semantic_table::<f64>(&p, &catalog)
                .with_context(|| format!("loading item vectors from {}", p.display()))?
        }
        None => pseudo_embed(&catalog, cfg.semantic.dim, cfg.semantic.pseudo_seed),
    };
    table.ensure_covers(&catalog).context("item vectors do not cover the catalog")?;
    Ok(DataBundle { catalog, split, table, provider: PrefixProvider::MeanPool })
}

fn test_examples(bundle: &DataBundle, max_len: usize) -> Vec<EvalExample> {
    bundle
        .split
        .iter()
        .map(|s| EvalExample {
            user: s.user,
            prefix: newest(&s.test_prefix, max_len),
            target: s.test_target,
        })
        .collect()
}

/// Test-split metrics for a trained model, with denoised re-encoding and a
/// popularity-bucket breakdown when the catalog is large enough.
fn test_metrics(
    bundle: &DataBundle,
    tc: &TrainConfig<f64>,
    out: &TrainOutcome<f64>,
) -> Result<MetricsReport<f64>> {
    let examples = test_examples(bundle, tc.max_len);
    let counts = train_counts(&bundle.split, bundle.catalog.n_items());
    let buckets = match popularity_buckets(&counts, 5, BucketMode::Items) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("skipping popularity buckets: {e}");
            None
        }
    };
    let mut scorer = ModelScorer {
        store: &out.store,
        params: &out.params,
        table: &bundle.table,
        provider: &bundle.provider,
        catalog: &bundle.catalog,
        gate: tc.gate,
        mode: tc.score_mode(),
        denoise: true,
    };
    evaluate_full(&mut scorer, &examples, bundle.catalog.n_items(), buckets.as_ref())
        .map_err(Into::into)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `out` when given, otherwise prints to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

pub struct PrepareArgs {
    pub input: Option<PathBuf>,
    pub format: Option<String>,
    pub out: PathBuf,
    pub k_core: Option<usize>,
    pub max_len: Option<usize>,
}

pub fn cmd_prepare(mut cfg: RunConfig, args: PrepareArgs) -> Result<()> {
    if let Some(p) = &args.input {
        cfg.data.input = p.display().to_string();
    }
    if let Some(f) = args.format {
        cfg.data.format = f;
    }
    if let Some(k) = args.k_core {
        cfg.data.k_core = k;
    }
    if let Some(m) = args.max_len {
        cfg.data.max_len = m;
    }
    if cfg.data.input.is_empty() {
        bail!("no input path given (use --input or set [data].input)");
    }
    let input = PathBuf::from(&cfg.data.input);
    let format = parse_format(&cfg.data.format)?;
    let rows =
        load_interactions(&input, format).with_context(|| format!("loading {}", input.display()))?;
    if rows.is_empty() {
        bail!("{} contains no interactions", input.display());
    }

    // raw ingestion counts, before any filtering
    let raw_users: std::collections::HashSet<&str> =
        rows.iter().map(|r| r.user_id.as_str()).collect();
    let raw_items: std::collections::HashSet<&str> =
        rows.iter().map(|r| r.item_id.as_str()).collect();
    let raw = (raw_users.len(), raw_items.len(), rows.len());

    let pre = cfg.preprocess();
    let filtered = k_core_filter(&rows, pre.k_core);
    if filtered.is_empty() {
        bail!("{}-core filtering removed every interaction", pre.k_core);
    }
    let (catalog, seqs) = build_sequences(&filtered, &pre);
    let split = leave_one_out_split(&seqs, &pre);
    let stats = dataset_stats(&catalog, &seqs);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut tsv = String::new();
    for s in &seqs {
        let uid = catalog.user_id(s.user);
        for (it, ts) in s.items.iter().zip(&s.timestamps) {
            writeln!(tsv, "{uid}\t{}\t{ts}", catalog.item_id(*it)).unwrap();
        }
    }
    write_text(&args.out.join("filtered.tsv"), &tsv)?;

    let mut manifest = String::from("user,n_train,valid_target,test_target\n");
    for s in &split {
        writeln!(
            manifest,
            "{},{},{},{}",
            catalog.user_id(s.user),
            s.train.len(),
            catalog.item_id(s.valid_target),
            catalog.item_id(s.test_target)
        )
        .unwrap();
    }
    write_text(&args.out.join("split.csv"), &manifest)?;

    let stats_text = format!(
        "raw_users {}\nraw_items {}\nraw_actions {}\nusers {}\nitems {}\nactions {}\navg_len {}\nsparsity {}\nk_core {}\n",
        raw.0, raw.1, raw.2, stats.n_users, stats.n_items, stats.n_actions, stats.avg_len,
        stats.sparsity, pre.k_core
    );
    write_text(&args.out.join("stats.txt"), &stats_text)?;

    println!(
        "{} users, {} items, {} actions (raw); {}-core kept {} users, {} items, {} actions; avg len {:.2}; sparsity {:.6}",
        raw.0, raw.1, raw.2, pre.k_core, stats.n_users, stats.n_items, stats.n_actions,
        stats.avg_len, stats.sparsity
    );
    println!("wrote {}", args.out.join("filtered.tsv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

pub struct EmbedArgs {
    pub catalog: PathBuf,
    pub mode: String,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub emb: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_embed(cfg: RunConfig, args: EmbedArgs) -> Result<()> {
    let format = cfg.log_format()?;
    let rows = load_interactions(&args.catalog, format)
        .with_context(|| format!("loading {}", args.catalog.display()))?;
    if rows.is_empty() {
        bail!("{} contains no interactions", args.catalog.display());
    }
    let filtered = k_core_filter(&rows, cfg.data.k_core);
    let (catalog, _) = build_sequences(&filtered, &cfg.preprocess());

    let table: SemanticTable<f64> = match args.mode.as_str() {
        "pseudo" => {
            let dim = args.dim.unwrap_or(cfg.semantic.dim);
            let seed = args.seed.unwrap_or(cfg.semantic.pseudo_seed);
            pseudo_embed(&catalog, dim, seed)
        }
        "import" => {
            let src = args
                .emb
                .as_ref()
                .ok_or_else(|| anyhow!("--mode import requires --emb <file>"))?;
            let table = load_semantic_table::<f64>(src, &catalog)
                .with_context(|| format!("loading {}", src.display()))?;
            if let Some(d) = args.dim {
                if d != table.dim() {
                    bail!("dimension mismatch: {} has dim {}, --dim asked for {d}", src.display(), table.dim());
                }
            }
            table.ensure_covers(&catalog).context("imported vectors do not cover the catalog")?;
            table
        }
        other => bail!("unknown embed mode {other:?}; expected pseudo or import"),
    };

    let out_rows: Vec<(String, Vec<f64>)> =
        table.rows().map(|(id, v)| (id.to_string(), v.to_vec())).collect();
    write_semb_text(&args.out, table.dim(), &out_rows)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} item vectors of dim {} -> {}", out_rows.len(), table.dim(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub struct SynthArgs {
    pub out: PathBuf,
    pub users: Option<usize>,
    pub items: Option<usize>,
    pub clusters: Option<usize>,
    pub len_min: Option<usize>,
    pub len_max: Option<usize>,
    pub noise_rate: Option<f64>,
    pub sem_dim: Option<usize>,
    pub sem_noise: Option<f64>,
    pub seed: Option<u64>,
}

pub fn cmd_synth(cfg: RunConfig, args: SynthArgs) -> Result<()> {
    let mut spec = cfg.synth_spec();
    if let Some(v) = args.users {
        spec.n_users = v;
    }
    if let Some(v) = args.items {
        spec.n_items = v;
    }
    if let Some(v) = args.clusters {
        spec.n_clusters = v;
    }
    if let Some(v) = args.len_min {
        spec.len_min = v;
    }
    if let Some(v) = args.len_max {
        spec.len_max = v;
    }
    if let Some(v) = args.noise_rate {
        spec.noise_rate = v;
    }
    if let Some(v) = args.sem_dim {
        spec.sem_dim = v;
    }
    if let Some(v) = args.sem_noise {
        spec.sem_noise = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if spec.len_min < 3 || spec.len_min > spec.len_max {
        bail!("need 3 <= len_min <= len_max, got {}..{}", spec.len_min, spec.len_max);
    }
    if !(0.0..1.0).contains(&spec.noise_rate) {
        bail!("noise rate must lie in [0, 1), got {}", spec.noise_rate);
    }
    if spec.n_clusters == 0 || spec.n_items < spec.n_clusters {
        bail!("need at least one item per cluster ({} items, {} clusters)", spec.n_items, spec.n_clusters);
    }

    let data = generate_synthetic::<f64>(&spec);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut tsv = String::new();
    for e in &data.interactions {
        writeln!(tsv, "{}\t{}\t{}", e.user_id, e.item_id, e.timestamp).unwrap();
    }
    write_text(&args.out.join("interactions.tsv"), &tsv)?;
    seqdn_core::eval::write_noise_labels(&args.out.join("labels.tsv"), &data.labels)
        .context("writing noise labels")?;
    write_semb_text(&args.out.join("semantic.semb"), spec.sem_dim, &data.semantic_rows)
        .context("writing item vectors")?;

    let n_noisy: usize =
        data.labels.iter().map(|(_, f)| f.iter().filter(|&&b| b == 1).count()).sum();
    println!(
        "{} users, {} items, {} actions, {} injected-noise positions -> {}",
        spec.n_users,
        spec.n_items,
        data.interactions.len(),
        n_noisy,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn mode_name(mode: ScoreMode) -> &'static str {
    match mode {
        ScoreMode::Full => "full",
        ScoreMode::LongOnly => "long_only",
        ScoreMode::ShortOnly => "short_only",
    }
}

fn mode_from_name(name: &str) -> Result<ScoreMode> {
    match name {
        "full" => Ok(ScoreMode::Full),
        "long_only" => Ok(ScoreMode::LongOnly),
        "short_only" => Ok(ScoreMode::ShortOnly),
        other => bail!("unknown score mode {other:?} in checkpoint"),
    }
}

pub fn cmd_train(cfg: RunConfig, out_dir: PathBuf, seed: u64) -> Result<()> {
    let bundle = load_bundle(&cfg, None, None)?;
    let tc = cfg.train_config(seed);
    let outcome = train(&bundle.split, &bundle.catalog, &bundle.table, &bundle.provider, &tc)
        .map_err(anyhow::Error::new)?;

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_history(&out_dir.join("history.csv"), &outcome.history).context("writing history")?;
    write_mask_dump(&out_dir.join("masks.csv"), &outcome.mask_dump).context("writing masks")?;

    let hash = cfg.hash();
    let metadata: Vec<(String, String)> = vec![
        ("config_hash".into(), hash.clone()),
        ("seed".into(), seed.to_string()),
        ("best_epoch".into(), outcome.best_epoch.to_string()),
        ("valid_ndcg10".into(), format!("{}", outcome.best_valid_ndcg10)),
        ("valid_hr10".into(), format!("{}", outcome.best_valid_hr10)),
        ("n_items".into(), bundle.catalog.n_items().to_string()),
        ("d_item".into(), tc.dims.d_item.to_string()),
        ("d_hidden".into(), tc.dims.d_hidden.to_string()),
        ("n_layers".into(), tc.dims.n_layers.to_string()),
        ("sem_dim".into(), outcome.params.sem_dim.to_string()),
        ("theta".into(), format!("{}", tc.gate.theta)),
        ("score_mode".into(), mode_name(tc.score_mode()).into()),
    ];
    save_checkpoint(&out_dir.join("model.ckpt"), &outcome.store, &metadata)
        .context("writing checkpoint")?;

    let last_ratio =
        outcome.history.last().map(|r| format!("{}", r.denoise_ratio)).unwrap_or_default();
    let run_txt = format!(
        "config_hash {hash}\nseed {seed}\nepochs {}\nbest_epoch {}\nvalid_HR@10 {}\nvalid_NDCG@10 {}\ndenoise_ratio {last_ratio}\n",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_valid_hr10,
        outcome.best_valid_ndcg10
    );
    write_text(&out_dir.join("run.txt"), &run_txt)?;

    println!(
        "trained {} epochs (best {} | valid NDCG@10 {:.4}); artifacts in {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_valid_ndcg10,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: Option<PathBuf>,
    pub emb: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn meta_field<'c>(ck: &'c Checkpoint<f64>, key: &str) -> Result<&'c str> {
    ck.meta(key).ok_or_else(|| anyhow!("checkpoint metadata is missing {key:?}"))
}

fn meta_parse<T>(ck: &Checkpoint<f64>, key: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let raw = meta_field(ck, key)?;
    raw.parse().with_context(|| format!("checkpoint metadata {key} = {raw:?} failed to parse"))
}

fn params_from_checkpoint(
    store: &ParamStore,
    dims: EncoderDims,
    n_items: usize,
    sem_dim: usize,
) -> Result<ModelParams> {
    let id = |name: &str| {
        store.id(name).ok_or_else(|| anyhow!("checkpoint has no tensor named {name:?}"))
    };
    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 1..=dims.n_layers {
        let name = |gate: &str| format!("gru.l{l}.{gate}");
        layers.push(GruLayerIds {
            wz: id(&name("Wz"))?,
            wr: id(&name("Wr"))?,
            wh: id(&name("Wh"))?,
            uz: id(&name("Uz"))?,
            ur: id(&name("Ur"))?,
            uh: id(&name("Uh"))?,
            bz: id(&name("bz"))?,
            br: id(&name("br"))?,
            bh: id(&name("bh"))?,
        });
    }
    Ok(ModelParams {
        enc: EncoderParams {
            item_emb: id("item_emb")?,
            layers,
            head_w: id("head.W")?,
            head_b: id("head.b")?,
            dims,
            n_items,
        },
        sem_w: id("sem_proj.W")?,
        sem_b: id("sem_proj.b")?,
        dec_w: id("decoder.W")?,
        dec_b: id("decoder.b")?,
        sem_dim,
    })
}

pub fn cmd_eval(cfg: RunConfig, args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint::<f64>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dims = EncoderDims {
        d_item: meta_parse(&ck, "d_item")?,
        d_hidden: meta_parse(&ck, "d_hidden")?,
        n_layers: meta_parse(&ck, "n_layers")?,
    };
    let n_items: usize = meta_parse(&ck, "n_items")?;
    let sem_dim: usize = meta_parse(&ck, "sem_dim")?;
    let theta: f64 = meta_parse(&ck, "theta")?;
    let mode = mode_from_name(meta_field(&ck, "score_mode")?)?;
    let hash = meta_field(&ck, "config_hash")?.to_string();
    let store = ck.into_store();
    let params = params_from_checkpoint(&store, dims, n_items, sem_dim)?;

    let bundle = load_bundle(&cfg, args.split.as_deref(), args.emb.as_deref())?;
    if bundle.catalog.n_items() != n_items {
        bail!(
            "checkpoint was trained on {} items but the split has {}",
            n_items,
            bundle.catalog.n_items()
        );
    }
    if bundle.table.dim() != sem_dim {
        bail!(
            "checkpoint expects item vectors of dim {} but the table has dim {}",
            sem_dim,
            bundle.table.dim()
        );
    }

    let examples = test_examples(&bundle, cfg.data.max_len);
    let counts = train_counts(&bundle.split, bundle.catalog.n_items());
    let buckets = match popularity_buckets(&counts, 5, BucketMode::Items) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("skipping popularity buckets: {e}");
            None
        }
    };
    let mut scorer = ModelScorer {
        store: &store,
        params: &params,
        table: &bundle.table,
        provider: &bundle.provider,
        catalog: &bundle.catalog,
        gate: GateConfig { theta, ..GateConfig::default() },
        mode,
        denoise: true,
    };
    let report = evaluate_full(&mut scorer, &examples, bundle.catalog.n_items(), buckets.as_ref())
        .map_err(anyhow::Error::new)?;

    let mut text = format!("config_hash {hash}\n{}", report.to_text());
    if buckets.is_some() {
        text.push('\n');
        text.push_str(&report.bucket_csv());
    }
    emit(args.out.as_deref(), &text)?;
    if let Some(p) = &args.out {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub struct ReportArgs {
    pub history: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Noise-recovery table from a mask dump and a label file. Mask bits cover
/// the most recent training positions, which sit immediately before the two
/// held-out targets at the end of each labeled sequence.
fn recovery_table(masks_path: &Path, labels_path: &Path) -> Result<String> {
    let labels = read_noise_labels(labels_path).map_err(anyhow::Error::new)?;
    let by_user: HashMap<&str, &Vec<u8>> =
        labels.iter().map(|(u, f)| (u.as_str(), f)).collect();

    let text = std::fs::read_to_string(masks_path)
        .with_context(|| format!("reading {}", masks_path.display()))?;
    let mut per_epoch: HashMap<usize, (Vec<bool>, Vec<bool>)> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = || anyhow!("{}:{}: expected `user epoch bits`", masks_path.display(), ln + 1);
        let user = parts.next().ok_or_else(bad)?;
        let epoch: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let bits = parts.next().ok_or_else(bad)?;
        let flags = by_user.get(user).ok_or_else(|| {
            anyhow!("{}:{}: user {user:?} has no labels", masks_path.display(), ln + 1)
        })?;
        if bits.len() + 2 > flags.len() {
            bail!(
                "{}:{}: {} mask bits cannot align with {} labels for user {user:?}",
                masks_path.display(),
                ln + 1,
                bits.len(),
                flags.len()
            );
        }
        let start = flags.len() - 2 - bits.len();
        let (fl, no) = per_epoch.entry(epoch).or_default();
        for (i, b) in bits.chars().enumerate() {
            fl.push(b == '0');
            no.push(flags[start + i] == 1);
        }
    }
    if per_epoch.is_empty() {
        bail!("{} contains no mask rows", masks_path.display());
    }

    let mut epochs: Vec<usize> = per_epoch.keys().copied().collect();
    epochs.sort_unstable();
    let mut csv = String::from("epoch,n_flagged,n_noise,n_hits,precision,recall,f1\n");
    for e in epochs {
        let (fl, no) = &per_epoch[&e];
        let r = noise_recovery::<f64>(fl, no);
        writeln!(
            csv,
            "{e},{},{},{},{},{},{}",
            r.n_flagged,
            r.n_noise,
            r.n_hits,
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            fmt_opt(r.f1)
        )
        .unwrap();
    }
    Ok(csv)
}

fn history_summary(path: &Path) -> Result<String> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != seqdn_core::trainer::HISTORY_HEADER {
        bail!("{} does not look like a training history (unexpected header)", path.display());
    }
    let mut n = 0usize;
    let mut best: Option<(usize, f64)> = None;
    let mut last_ratio = String::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            bail!("{}: expected 9 columns, found {}", path.display(), cols.len());
        }
        let epoch: usize = cols[0].parse().context("epoch column")?;
        let ndcg: f64 = cols[7].parse().context("valid_NDCG@10 column")?;
        if best.map_or(true, |(_, b)| ndcg > b) {
            best = Some((epoch, ndcg));
        }
        last_ratio = cols[8].to_string();
        n += 1;
    }
    let (be, bv) = best.ok_or_else(|| anyhow!("{} has no epochs", path.display()))?;
    Ok(format!(
        "epochs {n}\nbest_epoch {be}\nbest_valid_NDCG@10 {bv}\nfinal_denoise_ratio {last_ratio}\n"
    ))
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    if args.history.is_none() && args.masks.is_none() {
        bail!("nothing to report: pass --history and/or --masks with --labels");
    }
    if args.masks.is_some() != args.labels.is_some() {
        bail!("--masks and --labels must be given together");
    }
    let mut out = String::new();
    if let Some(h) = &args.history {
        out.push_str(&history_summary(h)?);
    }
    if let (Some(m), Some(l)) = (&args.masks, &args.labels) {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&recovery_table(m, l)?);
    }
    emit(args.out.as_deref(), &out)?;
    if let Some(p) = &args.out {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub const SWEEP_THETAS: [f64; 6] = [-0.9, -0.5, -0.1, 0.3, 0.7, 0.9];

pub struct SweepArgs {
    pub out: PathBuf,
    pub seeds: Option<String>,
    pub epochs: Option<usize>,
}

pub fn cmd_sweep(cfg: RunConfig, args: SweepArgs) -> Result<()> {
    let seeds: Vec<u64> = match &args.seeds {
        None => vec![1, 2, 3],
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse().with_context(|| format!("bad seed {t:?}")))
            .collect::<Result<_>>()?,
    };
    if seeds.is_empty() {
        bail!("--seeds parsed to an empty list");
    }
    let bundle = load_bundle(&cfg, None, None)?;

    let mut csv = String::from("theta,HR@5,NDCG@5\n");
    for theta in SWEEP_THETAS {
        let mut hr5 = Vec::new();
        let mut nd5 = Vec::new();
        for &seed in &seeds {
            let mut tc = cfg.train_config(seed);
            tc.gate.theta = theta;
            if let Some(e) = args.epochs {
                tc.max_epochs = e;
            }
            let outcome =
                train(&bundle.split, &bundle.catalog, &bundle.table, &bundle.provider, &tc)
                    .map_err(anyhow::Error::new)?;
            let report = test_metrics(&bundle, &tc, &outcome)?;
            hr5.push(report.hr.0);
            nd5.push(report.ndcg.0);
        }
        let (h, n) = (mean(&hr5), mean(&nd5));
        println!("theta {theta}: HR@5 {h:.4} NDCG@5 {n:.4} ({} seeds)", seeds.len());
        writeln!(csv, "{theta},{h},{n}").unwrap();
    }
    write_text(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
