//! Ranking metrics and the per-task evaluation report.
//!
//! `AP@K = (1 / min(K, R)) * sum_{k<=K} P@k * rel_k` with `R` relevant items,
//! so a perfect ranking scores 1 at every cutoff.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{QueryInputs, ResolvedRecord, Stores};
use crate::diffcore::Tensor;
use crate::embedstore::{Task, TripletRecord};
use crate::error::{Error, Result};
use crate::retrieval::{batch_search, RankedList, SearchQuery};
use crate::trainer::TrainConfig;
use crate::vagfem::{apply_mask, mask_cardinality, variance_mask, BatchMask, Mode, VagfemModel};

pub const MAP_DEFINITION: &str = "AP@K = (1/min(K,R)) * sum_{k=1..K} P@k * rel_k; mAP@all uses K = gallery size";

pub const MAP_CUTOFFS: [usize; 5] = [10, 25, 50, 100, 200];
pub const RECALL_CUTOFFS: [usize; 2] = [10, 50];
pub const PRECISION_CUTOFFS: [usize; 3] = [10, 100, 200];

fn check_relevant<S>(relevant: &BTreeSet<S>) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::Empty("relevant set"));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cutoff K must be at least 1".into()));
    }
    Ok(())
}

pub fn average_precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    check_k(k)?;
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(acc / k.min(relevant.len()) as f64)
}

/// 1 when any relevant id is within the first `k`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    check_k(k)?;
    Ok(if ranked.iter().take(k).any(|id| relevant.contains(id.as_ref())) {
        1.0
    } else {
        0.0
    })
}

/// Relevant ids in the first `k`, divided by `k`.
pub fn precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    check_k(k)?;
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id.as_ref())).count();
    Ok(hits as f64 / k as f64)
}

pub fn rank1<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    let first = ranked.first().ok_or(Error::Empty("ranking"))?;
    Ok(if relevant.contains(first.as_ref()) { 1.0 } else { 0.0 })
}

/// Every metric for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub map: [f64; 5],
    pub map_all: f64,
    pub recall: [f64; 2],
    pub precision: [f64; 3],
    pub rank1: f64,
}

impl QueryMetrics {
    fn zero() -> Self {
        Self {
            map: [0.0; 5],
            map_all: 0.0,
            recall: [0.0; 2],
            precision: [0.0; 3],
            rank1: 0.0,
        }
    }

    /// `full_k` is the gallery size used for mAP@all.
    pub fn compute<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, full_k: usize) -> Result<Self> {
        let mut m = Self::zero();
        for (slot, &k) in m.map.iter_mut().zip(&MAP_CUTOFFS) {
            *slot = average_precision_at_k(ranked, relevant, k)?;
        }
        m.map_all = average_precision_at_k(ranked, relevant, full_k.max(1))?;
        for (slot, &k) in m.recall.iter_mut().zip(&RECALL_CUTOFFS) {
            *slot = recall_at_k(ranked, relevant, k)?;
        }
        for (slot, &k) in m.precision.iter_mut().zip(&PRECISION_CUTOFFS) {
            *slot = precision_at_k(ranked, relevant, k)?;
        }
        m.rank1 = if ranked.is_empty() { 0.0 } else { rank1(ranked, relevant)? };
        Ok(m)
    }
}

/// Query-averaged metrics of one task class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub queries: usize,
    #[serde(rename = "mAP@10")]
    pub map_at_10: f64,
    #[serde(rename = "mAP@25")]
    pub map_at_25: f64,
    #[serde(rename = "mAP@50")]
    pub map_at_50: f64,
    #[serde(rename = "mAP@100")]
    pub map_at_100: f64,
    #[serde(rename = "mAP@200")]
    pub map_at_200: f64,
    #[serde(rename = "mAP@all")]
    pub map_all: f64,
    #[serde(rename = "R@10")]
    pub recall_at_10: f64,
    #[serde(rename = "R@50")]
    pub recall_at_50: f64,
    #[serde(rename = "P@10")]
    pub precision_at_10: f64,
    #[serde(rename = "P@100")]
    pub precision_at_100: f64,
    #[serde(rename = "P@200")]
    pub precision_at_200: f64,
    pub rank1: f64,
}

impl TaskMetrics {
    /// Unweighted mean in query order; `None` for an empty slice.
    pub fn mean(per_query: &[QueryMetrics]) -> Option<Self> {
        if per_query.is_empty() {
            return None;
        }
        let n = per_query.len() as f64;
        let avg = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
        Some(Self {
            queries: per_query.len(),
            map_at_10: avg(&|m| m.map[0]),
            map_at_25: avg(&|m| m.map[1]),
            map_at_50: avg(&|m| m.map[2]),
            map_at_100: avg(&|m| m.map[3]),
            map_at_200: avg(&|m| m.map[4]),
            map_all: avg(&|m| m.map_all),
            recall_at_10: avg(&|m| m.recall[0]),
            recall_at_50: avg(&|m| m.recall[1]),
            precision_at_10: avg(&|m| m.precision[0]),
            precision_at_100: avg(&|m| m.precision[1]),
            precision_at_200: avg(&|m| m.precision[2]),
            rank1: avg(&|m| m.rank1),
        })
    }

    fn columns(&self) -> [(&'static str, f64); 12] {
        [
            ("mAP@10", self.map_at_10),
            ("mAP@25", self.map_at_25),
            ("mAP@50", self.map_at_50),
            ("mAP@100", self.map_at_100),
            ("mAP@200", self.map_at_200),
            ("mAP@all", self.map_all),
            ("R@10", self.recall_at_10),
            ("R@50", self.recall_at_50),
            ("P@10", self.precision_at_10),
            ("P@100", self.precision_at_100),
            ("P@200", self.precision_at_200),
            ("rank1", self.rank1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerTask {
    #[serde(rename = "CIR", skip_serializing_if = "Option::is_none", default)]
    pub cir: Option<TaskMetrics>,
    #[serde(rename = "SBIR", skip_serializing_if = "Option::is_none", default)]
    pub sbir: Option<TaskMetrics>,
    #[serde(rename = "CSTBIR", skip_serializing_if = "Option::is_none", default)]
    pub cstbir: Option<TaskMetrics>,
}

impl PerTask {
    pub fn get(&self, task: Task) -> Option<&TaskMetrics> {
        match task {
            Task::Cir => self.cir.as_ref(),
            Task::Sbir => self.sbir.as_ref(),
            Task::Cstbir => self.cstbir.as_ref(),
        }
    }

    fn slot(&mut self, task: Task) -> &mut Option<TaskMetrics> {
        match task {
            Task::Cir => &mut self.cir,
            Task::Sbir => &mut self.sbir,
            Task::Cstbir => &mut self.cstbir,
        }
    }
}

/// Settings that shape an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: Mode,
    /// Overrides the model's mask ratio when set.
    pub mask_ratio: Option<f64>,
    /// Leave the query's own reference id out of its candidates.
    pub self_exclusion: bool,
    /// Rows per encoder pass; results do not depend on it.
    pub batch_size: usize,
    /// Gallery shards per search; results do not depend on it.
    pub shards: usize,
    /// Length of the ranked lists kept for export.
    pub export_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Vagfem,
            mask_ratio: None,
            self_exclusion: true,
            batch_size: 256,
            shards: 1,
            export_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub gallery_size: usize,
    pub query_count: usize,
    pub self_exclusion: bool,
    /// Queries whose every target was removed by self-exclusion; they score 0.
    pub fully_excluded_queries: usize,
    pub checkpoint_id: Option<String>,
    pub map_definition: String,
    pub mask_k: usize,
    pub eval: EvalConfig,
    pub train_config: Option<TrainConfig>,
    /// Effective settings of the command that produced the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: PerTask,
    /// Mean of per-task mAP@100 over the tasks present.
    #[serde(rename = "mAP@100 Average")]
    pub macro_map_at_100: Option<f64>,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per present task plus a macro row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task\tqueries");
        for (name, _) in TaskMetrics::mean(&[QueryMetrics::zero()]).expect("non-empty").columns() {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for task in Task::ALL {
            if let Some(m) = self.tasks.get(task) {
                let _ = write!(out, "{}\t{}", task.as_str(), m.queries);
                for (_, v) in m.columns() {
                    let _ = write!(out, "\t{v:.6}");
                }
                out.push('\n');
            }
        }
        if let Some(avg) = self.macro_map_at_100 {
            // value sits under the mAP@100 column
            let _ = writeln!(out, "mAP@100 Average\t{}\t\t\t\t{avg:.6}{}", self.metadata.query_count, "\t".repeat(8));
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, tsv_path: impl AsRef<Path>) -> Result<()> {
        let (j, t) = (json_path.as_ref(), tsv_path.as_ref());
        fs::write(j, self.to_json()).map_err(|e| Error::io(j, e))?;
        fs::write(t, self.to_tsv()).map_err(|e| Error::io(t, e))
    }
}

/// Groups per-query metrics by task and builds the report body.
pub fn aggregate(tasks: &[Task], per_query: &[QueryMetrics]) -> (PerTask, Option<f64>) {
    let mut groups: BTreeMap<Task, Vec<QueryMetrics>> = BTreeMap::new();
    for (t, m) in tasks.iter().zip(per_query) {
        groups.entry(*t).or_default().push(m.clone());
    }
    let mut out = PerTask::default();
    for (task, ms) in &groups {
        *out.slot(*task) = TaskMetrics::mean(ms);
    }
    let present: Vec<f64> = Task::ALL.iter().filter_map(|&t| out.get(t)).map(|m| m.map_at_100).collect();
    let macro_avg = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (out, macro_avg)
}

/// Encoded queries for a set of records.
pub struct EncodedQueries {
    pub embeddings: Tensor<f32>,
    pub mask: Option<BatchMask>,
}

/// Encodes every record's query. In vagfem mode the mask comes from the
/// united features of all queries at once, so the result does not depend on
/// `batch_size`.
pub fn encode_queries(
    model: &VagfemModel<f32>,
    stores: &Stores<'_>,
    records: &[ResolvedRecord],
    mode: Mode,
    mask_k: usize,
    batch_size: usize,
) -> Result<EncodedQueries> {
    if records.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let refs: Vec<&ResolvedRecord> = records.iter().collect();
    let chunks: Vec<Tensor<f32>> = refs
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let q = QueryInputs::<f32>::gather(stores, chunk);
            model.united_features(&q.reference, &q.text).map(|(_, u)| u)
        })
        .collect::<Result<_>>()?;
    let dim = model.config().embed_dim;
    let united = Tensor::matrix(records.len(), dim, chunks.iter().flat_map(|c| c.data().to_vec()).collect())?;
    match mode {
        Mode::Baseline => Ok(EncodedQueries {
            embeddings: united,
            mask: None,
        }),
        Mode::Vagfem => {
            let mask = variance_mask(&united, mask_k);
            let parts: Vec<Tensor<f32>> = chunks
                .par_iter()
                .map(|u| apply_mask(u, &mask, model.config().epsilon))
                .collect::<Result<_>>()?;
            let data = parts.iter().flat_map(|c| c.data().to_vec()).collect();
            Ok(EncodedQueries {
                embeddings: Tensor::matrix(records.len(), dim, data)?,
                mask: Some(mask),
            })
        }
    }
}

/// Result of [`evaluate`]: the report plus truncated per-query rankings.
pub struct Evaluation {
    pub report: MetricReport,
    pub rankings: Vec<RankedList>,
    pub per_query: Vec<QueryMetrics>,
}

/// Scores an already-encoded query set against the gallery.
pub fn evaluate_embeddings(
    records: &[TripletRecord],
    embeddings: &Tensor<f32>,
    stores: &Stores<'_>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let gallery = stores.gallery;
    let full_k = gallery.len();
    let queries: Vec<SearchQuery> = records
        .iter()
        .enumerate()
        .map(|(i, r)| SearchQuery {
            key: format!("{i}:{}:{}", r.ref_id, r.text_key()),
            vector: embeddings.row(i).to_vec(),
            exclude: (cfg.self_exclusion && gallery.contains(&r.ref_id)).then(|| r.ref_id.clone()),
        })
        .collect();
    let mut lists = batch_search(&queries, gallery, full_k, cfg.shards)?;

    let mut fully_excluded = 0;
    let mut per_query = Vec::with_capacity(records.len());
    for (r, (q, list)) in records.iter().zip(queries.iter().zip(&lists)) {
        let relevant: BTreeSet<String> = r
            .target_ids
            .iter()
            .filter(|t| Some(t.as_str()) != q.exclude.as_deref())
            .cloned()
            .collect();
        if relevant.is_empty() {
            fully_excluded += 1;
            per_query.push(QueryMetrics::zero());
            continue;
        }
        let ids: Vec<&str> = list.ids().collect();
        per_query.push(QueryMetrics::compute(&ids, &relevant, full_k)?);
    }
    for l in &mut lists {
        l.results.truncate(cfg.export_k);
    }
    let tasks: Vec<Task> = records.iter().map(|r| r.task).collect();
    let (per_task, macro_avg) = aggregate(&tasks, &per_query);
    Ok(Evaluation {
        report: MetricReport {
            tasks: per_task,
            macro_map_at_100: macro_avg,
            metadata: ReportMetadata {
                gallery_size: gallery.len(),
                query_count: records.len(),
                self_exclusion: cfg.self_exclusion,
                fully_excluded_queries: fully_excluded,
                checkpoint_id: None,
                map_definition: MAP_DEFINITION.to_string(),
                mask_k: 0,
                eval: cfg.clone(),
                train_config: None,
                invocation: None,
            },
        },
        rankings: lists,
        per_query,
    })
}

/// Encodes every record with `model`, searches the gallery and scores the
/// rankings per task.
pub fn evaluate(
    records: &[TripletRecord],
    model: &VagfemModel<f32>,
    stores: &Stores<'_>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if stores.dim() != model.config().embed_dim {
        return Err(Error::DimMismatch {
            expected: model.config().embed_dim,
            got: stores.dim(),
        });
    }
    let ratio = cfg.mask_ratio.unwrap_or(model.config().mask_ratio);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask_ratio {ratio} outside [0, 1]")));
    }
    let resolved = stores.resolve(records)?;
    let mask_k = mask_cardinality(ratio, stores.dim());
    let encoded = encode_queries(model, stores, &resolved, cfg.mode, mask_k, cfg.batch_size)?;
    let mut out = evaluate_embeddings(records, &encoded.embeddings, stores, cfg)?;
    out.report.metadata.mask_k = encoded.mask.as_ref().map_or(0, BatchMask::k);
    Ok(out)
}

#[cfg(test)]
mod tests;
