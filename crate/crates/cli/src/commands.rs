use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use figrot::analysis::{analyze, profile_columns, AnalysisConfig, DEFAULT_BINS};
use figrot::data::{QueryInputs, ResolvedRecord, Stores};
use figrot::embedstore::{
    clip_filter, dataset_stats, load_triplets, read_scored_pairs, read_store, write_scored_pairs, EmbeddingStore,
    TripletRecord, EMPTY_TEXT_ID,
};
use figrot::evalmetrics::{encode_queries, evaluate, EvalConfig, MetricReport};
use figrot::retrieval::{search_sharded, write_rankings};
use figrot::synthetic;
use figrot::trainer::{checkpoint_id, train, Checkpoint, TrainConfig, TrainLog};
use figrot::vagfem::{apply_mask, mask_cardinality, FusionConfig, Mode, VagfemModel};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;

pub const CHECKPOINT_FILE: &str = "checkpoint.fgck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const SWEEP_CAPS: &str = "1000,2000,5000,10000,all";

const DEFAULT_THRESHOLD: f64 = 0.9;
const DEFAULT_RETRIEVE_K: usize = 10;
const DEFAULT_SYNTHETIC_N: usize = 256;
const DEFAULT_SYNTHETIC_DIM: usize = 32;
const DEFAULT_SYNTHETIC_SEED: u64 = 7;

fn ensure_exists(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            bail!("input not found: {}", p.display());
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_line(value: &Value) {
    println!("{}", serde_json::to_string(value).expect("json value serializes"));
}

struct Loaded {
    images: EmbeddingStore,
    texts: EmbeddingStore,
    gallery: EmbeddingStore,
    triplets: Vec<TripletRecord>,
}

impl Loaded {
    fn read(data: &DataArgs) -> Result<Self> {
        let p = data.paths()?;
        ensure_exists(&[&p.images, &p.texts, &p.gallery, &p.triplets])?;
        Ok(Self {
            images: read_store(&p.images)?,
            texts: read_store(&p.texts)?,
            gallery: read_store(&p.gallery)?,
            triplets: load_triplets(&p.triplets)?,
        })
    }

    fn stores(&self) -> Result<Stores<'_>> {
        Ok(Stores::new(&self.images, &self.texts, &self.gallery)?)
    }
}

fn train_config(dim: usize, o: &TrainOverrides, mode: Option<Mode>, mask_ratio: Option<f64>) -> TrainConfig {
    let mut c = TrainConfig::new(dim);
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(o.lr => c.lr);
    set!(o.weight_decay => c.weight_decay);
    set!(o.batch_size => c.batch_size);
    set!(o.epochs => c.epochs);
    set!(o.seed => c.seed);
    set!(o.temperature => c.loss.temperature);
    set!(o.margin => c.loss.margin);
    set!(o.lambda => c.loss.lambda);
    set!(o.triplet => c.loss.triplet_enabled);
    set!(o.negative_source => c.loss.negative_source);
    set!(o.model_dim => c.fusion.model_dim);
    set!(o.layers => c.fusion.layers);
    set!(o.heads => c.fusion.heads);
    set!(o.head_dim => c.fusion.head_dim);
    set!(o.ffn_mult => c.fusion.ffn_mult);
    set!(mode => c.mode);
    set!(mask_ratio => c.fusion.mask_ratio);
    c.max_triplets = o.max_triplets;
    c
}

fn eval_config(mode: Mode, mask_ratio: Option<f64>, s: &SearchOverrides) -> EvalConfig {
    let d = EvalConfig::default();
    EvalConfig {
        mode,
        mask_ratio,
        self_exclusion: s.self_exclusion.unwrap_or(d.self_exclusion),
        batch_size: s.eval_batch_size.unwrap_or(d.batch_size),
        shards: s.shards.unwrap_or(d.shards),
        export_k: s.export_k.unwrap_or(d.export_k),
    }
}

fn log_epochs(log: &TrainLog) {
    for e in log.epoch_summaries() {
        eprintln!(
            "epoch {} steps {} infonce {:.6} triplet {:.6} total {:.6}",
            e.epoch, e.steps, e.mean.infonce, e.mean.triplet, e.mean.total
        );
    }
}

/// Writes a checkpoint, the step log and a run summary into `dir`.
fn save_run(dir: &Path, ckpt: &Checkpoint, log: &TrainLog, invocation: &Value) -> Result<String> {
    create_dir(dir)?;
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    log.write_jsonl(dir.join(TRAIN_LOG_FILE))?;
    let id = checkpoint_id(&path)?;
    write_json(
        &dir.join(RUN_FILE),
        &json!({
            "invocation": invocation,
            "train_config": ckpt.config,
            "checkpoint_id": id,
            "steps": ckpt.step,
            "records_available": log.records_available,
            "records_used": log.records_used,
            "epochs": log.epoch_summaries(),
        }),
    )?;
    Ok(id)
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    create_dir(dir)?;
    Ok(report.write(dir.join(METRICS_JSON), dir.join(METRICS_TSV))?)
}

pub fn filter(args: FilterArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let pairs_path = required(&a.pairs, "pairs")?;
    let out = required(&a.out, "out")?;
    ensure_exists(&[&pairs_path])?;
    let threshold = a.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let pairs = read_scored_pairs(&pairs_path)?;
    let kept = clip_filter(&pairs, threshold)?;
    write_scored_pairs(&out, &kept)?;
    print_line(&json!({
        "invocation": a,
        "threshold": threshold,
        "total": pairs.len(),
        "kept": kept.len(),
    }));
    Ok(())
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let data = DataArgs {
        data_dir: a.data_dir.clone(),
        triplets: a.triplets.clone(),
        ..DataArgs::default()
    };
    let path = data.triplets_path()?;
    ensure_exists(&[&path])?;
    let stats = dataset_stats(&load_triplets(&path)?);
    print!("{}", stats.render_table());
    if let Some(out) = &a.out {
        write_json(out, &json!({ "invocation": a, "stats": stats }))?;
    }
    Ok(())
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let out = required(&a.out_dir, "out-dir")?;
    let data = Loaded::read(&a.data)?;
    let config = train_config(data.images.dim(), &a.train, a.mode, a.mask_ratio);
    let invocation = serde_json::to_value(&a)?;
    let (ckpt, log) = train(config, &data.triplets, data.stores()?)?;
    log_epochs(&log);
    let id = save_run(&out, &ckpt, &log, &invocation)?;
    print_line(&json!({
        "checkpoint": out.join(CHECKPOINT_FILE),
        "checkpoint_id": id,
        "steps": ckpt.step,
        "train_config": ckpt.config,
    }));
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    ensure_exists(&[path])?;
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt, checkpoint_id(path)?))
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let out = required(&a.out_dir, "out-dir")?;
    let data = Loaded::read(&a.data)?;
    let (ckpt, id) = load_checkpoint(&ckpt_path)?;
    let model = ckpt.model()?;
    let cfg = eval_config(a.mode.unwrap_or(ckpt.config.mode), a.mask_ratio, &a.search);
    let mut result = evaluate(&data.triplets, &model, &data.stores()?, &cfg)?;
    let meta = &mut result.report.metadata;
    meta.checkpoint_id = Some(id);
    meta.train_config = Some(ckpt.config.clone());
    meta.invocation = Some(serde_json::to_value(&a)?);
    write_report(&out, &result.report)?;
    write_rankings(out.join(RANKINGS_FILE), &result.rankings)?;
    print_line(&json!({
        "metrics": out.join(METRICS_JSON),
        "mAP@100 Average": result.report.macro_map_at_100,
        "queries": result.report.metadata.query_count,
    }));
    Ok(())
}

pub fn retrieve(args: RetrieveArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let ref_id = required(&a.ref_id, "ref-id")?;
    let text_id = a.text_id.clone().unwrap_or_else(|| EMPTY_TEXT_ID.to_string());
    let k = a.k.unwrap_or(DEFAULT_RETRIEVE_K);
    let data = Loaded::read(&a.data)?;
    let stores = data.stores()?;
    let (ckpt, id) = load_checkpoint(&ckpt_path)?;
    let model = ckpt.model()?;
    let mode = a.mode.unwrap_or(ckpt.config.mode);

    let ref_row = data.images.index_of(&ref_id).with_context(|| format!("unknown reference id {ref_id:?}"))?;
    let text_row = data.texts.index_of(&text_id).with_context(|| format!("unknown text id {text_id:?}"))?;
    let query = ResolvedRecord {
        ref_row,
        text_row,
        target_rows: Vec::new(),
    };
    let inputs = QueryInputs::<f32>::gather(&stores, &[&query]);
    let (_, united) = model.united_features(&inputs.reference, &inputs.text)?;

    // the mask is fitted on the whole query set, exactly as in `eval`
    let ratio = a.mask_ratio.unwrap_or(model.config().mask_ratio);
    let mask_k = mask_cardinality(ratio, stores.dim());
    let (vector, mask_k) = match mode {
        Mode::Vagfem if mask_k > 0 => {
            let resolved = stores.resolve(&data.triplets)?;
            let encoded = encode_queries(&model, &stores, &resolved, Mode::Vagfem, mask_k, 256)?;
            let mask = encoded.mask.expect("vagfem mode yields a mask");
            (apply_mask(&united, &mask, model.config().epsilon)?, mask.k())
        }
        _ => (united, 0),
    };
    let exclude = a.self_exclusion.unwrap_or(true).then_some(ref_id.as_str());
    let hits = search_sharded(vector.row(0), &data.gallery, k, exclude, 1)?;
    let result = json!({
        "invocation": a,
        "checkpoint_id": id,
        "mode": mode,
        "mask_k": mask_k,
        "query": { "ref_id": ref_id, "text_id": text_id },
        "results": hits,
    });
    match &a.out {
        Some(path) => write_json(path, &result),
        None => {
            print_line(&result);
            Ok(())
        }
    }
}

pub fn analyze_cmd(args: AnalyzeArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let out = required(&a.out_dir, "out-dir")?;
    let data = Loaded::read(&a.data)?;
    let stores = data.stores()?;
    let seed = a.seed.unwrap_or(0);
    let (model, id) = match &a.checkpoint {
        Some(path) => {
            let (ckpt, id) = load_checkpoint(path)?;
            (ckpt.model()?, Some(id))
        }
        None => (VagfemModel::init(FusionConfig::new(stores.dim()), seed)?, None),
    };
    let defaults = AnalysisConfig::default();
    let cfg = AnalysisConfig {
        mode: a.mode.unwrap_or(defaults.mode),
        bins: a.bins.unwrap_or(DEFAULT_BINS),
        seed,
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        mask_ratio: a.mask_ratio,
    };
    let resolved = stores.resolve(&data.triplets)?;
    let report = analyze(&model, &stores, &resolved, &cfg)?;

    create_dir(&out)?;
    write_json(
        &out.join("analysis.json"),
        &json!({ "invocation": a, "checkpoint_id": id, "report": report }),
    )?;
    let files: [(&str, String); 3] = [
        ("cosine_positive.dat", report.cosine.positive.to_columns()),
        ("cosine_negative.dat", report.cosine.negative.to_columns()),
        ("variance_profile.dat", profile_columns(&report.variance_profile)),
    ];
    for (name, text) in files {
        let path = out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print_line(&json!({
        "analysis": out.join("analysis.json"),
        "positive_mean": report.cosine.positive.mean,
        "negative_mean": report.cosine.negative.mean,
    }));
    Ok(())
}

pub fn gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let out = required(&a.out_dir, "out-dir")?;
    let n = a.n.unwrap_or(DEFAULT_SYNTHETIC_N);
    let dim = a.dim.unwrap_or(DEFAULT_SYNTHETIC_DIM);
    let seed = a.seed.unwrap_or(DEFAULT_SYNTHETIC_SEED);
    let data = synthetic::generate(n, dim, seed)?;
    data.write(&out)?;
    let summary = json!({
        "invocation": a,
        "n": n,
        "dim": dim,
        "seed": seed,
        "target_noise": synthetic::TARGET_NOISE,
        "gallery_size": data.gallery.len(),
    });
    write_json(&out.join("synthetic.json"), &summary)?;
    print_line(&summary);
    Ok(())
}

/// `None` stands for the uncapped run.
fn parse_caps(spec: &str) -> Result<Vec<Option<usize>>> {
    spec.split(',')
        .map(str::trim)
        .map(|c| match c {
            "all" => Ok(None),
            _ => match c.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(usage(format!("invalid cap {c:?} (expected a positive integer or \"all\")"))),
            },
        })
        .collect()
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let a = resolve(&args, args.config.as_deref())?;
    let out = required(&a.out_dir, "out-dir")?;
    let caps = parse_caps(a.caps.as_deref().unwrap_or(SWEEP_CAPS))?;
    let data = Loaded::read(&a.data)?;
    let eval_records = match &a.eval_triplets {
        Some(p) => {
            ensure_exists(&[p])?;
            load_triplets(p)?
        }
        None => data.triplets.clone(),
    };
    let stores = data.stores()?;
    let invocation = serde_json::to_value(&a)?;
    let available = data.triplets.len();
    create_dir(&out)?;

    let mut lines = String::new();
    for cap in caps {
        // caps at or above the dataset size would repeat the full run
        if cap.is_some_and(|c| c >= available) {
            eprintln!("skipping cap {} (dataset has {available} triplets)", cap.unwrap_or(0));
            continue;
        }
        let label = cap.map_or("all".to_string(), |c| c.to_string());
        let mut overrides = a.train.clone();
        overrides.max_triplets = cap;
        let config = train_config(stores.dim(), &overrides, a.mode, a.mask_ratio);
        eprintln!("cap {label}: training");
        let (ckpt, log) = train(config, &data.triplets, stores)?;
        log_epochs(&log);
        let dir: PathBuf = out.join(format!("cap_{label}"));
        let id = save_run(&dir, &ckpt, &log, &invocation)?;

        let cfg = eval_config(ckpt.config.mode, None, &a.search);
        let mut result = evaluate(&eval_records, &ckpt.model()?, &stores, &cfg)?;
        let meta = &mut result.report.metadata;
        meta.checkpoint_id = Some(id.clone());
        meta.train_config = Some(ckpt.config.clone());
        meta.invocation = Some(invocation.clone());
        write_report(&dir, &result.report)?;

        let last_epoch = log.epoch_summaries().last().map(|e| e.mean.total);
        let line = json!({
            "cap": label,
            "records_used": log.records_used,
            "checkpoint_id": id,
            "final_epoch_loss": last_epoch,
            "mAP@100 Average": result.report.macro_map_at_100,
            "tasks": result.report.tasks,
        });
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
        print_line(&line);
    }
    let path = out.join(SWEEP_FILE);
    fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))
}
