//! AdamW training over triplet batches with seeded shuffling, per-step
//! logging and resumable checkpoints.

mod adamw;
mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{checkpoint_id, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{ResolvedRecord, Stores, TrainingBatch};
use crate::diffcore::Graph;
use crate::embedstore::{Task, TripletRecord};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, LossConfig, NegativeSource};
use crate::vagfem::{FusionConfig, Mode, VagfemModel};

/// Stream ids of the data RNG; epoch `e` shuffles with stream
/// `SHUFFLE_STREAM + e`. Weight init uses the default stream 0.
const SUBSAMPLE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub max_triplets: Option<usize>,
}

impl TrainConfig {
    /// lr 1e-4, weight decay 1e-2, batch 32, 2 epochs.
    pub fn new(embed_dim: usize) -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            batch_size: 32,
            epochs: 2,
            seed: 0,
            mode: Mode::Vagfem,
            loss: LossConfig::default(),
            fusion: FusionConfig::new(embed_dim),
            max_triplets: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.max_triplets == Some(0) {
            return Err(Error::Config("max_triplets must be at least 1".into()));
        }
        self.loss.validate()?;
        self.fusion.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            epsilon: self.adam_epsilon,
        }
    }

    fn data_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Uniform sample of `cap` indices without replacement, stratified by task
/// so each class keeps its share (largest-remainder rounding, ties to the
/// earlier class). Returned indices are ascending.
pub fn stratified_subsample(records: &[TripletRecord], cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = records.len();
    if cap >= n {
        return (0..n).collect();
    }
    let mut groups: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.task).or_default().push(i);
    }
    let mut quotas: Vec<(Task, usize, f64)> = groups
        .iter()
        .map(|(&t, idx)| {
            let exact = cap as f64 * idx.len() as f64 / n as f64;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(cap - assigned) {
        quotas[i].1 += 1;
    }
    let mut out = Vec::with_capacity(cap);
    for (task, quota, _) in quotas {
        let idx = &groups[&task];
        let mut picked: Vec<usize> = index::sample(rng, idx.len(), quota).into_iter().map(|j| idx[j]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub infonce: f64,
    pub triplet: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

/// Per-step losses of a run plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub records_available: usize,
    pub records_used: usize,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Arithmetic mean of each loss component per epoch.
    pub fn epoch_summaries(&self) -> Vec<EpochSummary> {
        let mut by_epoch: BTreeMap<usize, Vec<&StepRecord>> = BTreeMap::new();
        for s in &self.steps {
            by_epoch.entry(s.epoch).or_default().push(s);
        }
        by_epoch
            .into_iter()
            .map(|(epoch, steps)| {
                let n = steps.len() as f64;
                let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(|s| f(s)).sum::<f64>() / n;
                EpochSummary {
                    epoch,
                    steps: steps.len(),
                    mean: LossBreakdown {
                        infonce: mean(|s| s.infonce),
                        triplet: mean(|s| s.triplet),
                        total: mean(|s| s.total),
                    },
                }
            })
            .collect()
    }

    /// JSON lines: a `config` object, one `step` object per step, then one
    /// `epoch` object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let line = |v: serde_json::Value| serde_json::to_string(&v).expect("log serializes") + "\n";
        out += &line(serde_json::json!({
            "kind": "config",
            "config": self.config,
            "records_available": self.records_available,
            "records_used": self.records_used,
        }));
        for s in &self.steps {
            let mut v = serde_json::to_value(s).expect("step serializes");
            v["kind"] = "step".into();
            out += &line(v);
        }
        for e in self.epoch_summaries() {
            let mut v = serde_json::to_value(&e).expect("summary serializes");
            v["kind"] = "epoch".into();
            out += &line(v);
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_jsonl().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// A training run over resolved records. Batches are a pure function of the
/// configuration and the global step, so a run resumed from a checkpoint
/// continues exactly where the original left off.
pub struct Trainer<'a> {
    config: TrainConfig,
    stores: Stores<'a>,
    records: Vec<ResolvedRecord>,
    records_available: usize,
    model: VagfemModel<f32>,
    optimizer: AdamW<f32>,
    epoch_order: Option<(usize, Vec<usize>)>,
    log: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, records: &[TripletRecord], stores: Stores<'a>) -> Result<Self> {
        let model = VagfemModel::init(config.fusion.clone(), config.seed)?;
        let optimizer = AdamW::new(config.adamw(), model.params());
        Self::assemble(config, records, stores, model, optimizer)
    }

    /// Continues a run from `checkpoint`; the records must be the ones the
    /// checkpointed run was started with.
    pub fn resume(checkpoint: Checkpoint, records: &[TripletRecord], stores: Stores<'a>) -> Result<Self> {
        let model = checkpoint.model()?;
        let optimizer = AdamW::from_state(
            checkpoint.config.adamw(),
            model.params(),
            checkpoint.step,
            checkpoint.first_moments,
            checkpoint.second_moments,
        )?;
        Self::assemble(checkpoint.config, records, stores, model, optimizer)
    }

    fn assemble(
        config: TrainConfig,
        records: &[TripletRecord],
        stores: Stores<'a>,
        model: VagfemModel<f32>,
        optimizer: AdamW<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if stores.dim() != config.fusion.embed_dim {
            return Err(Error::DimMismatch {
                expected: config.fusion.embed_dim,
                got: stores.dim(),
            });
        }
        let resolved = stores.resolve(records)?;
        if config.loss.triplet_enabled && config.loss.negative_source == NegativeSource::FusedEmptyText {
            stores.empty_text_row()?;
        }
        let keep = match config.max_triplets {
            Some(cap) => stratified_subsample(records, cap, &mut config.data_rng(SUBSAMPLE_STREAM)),
            None => (0..records.len()).collect(),
        };
        let records = keep.iter().map(|&i| resolved[i].clone()).collect();
        Ok(Self {
            config,
            stores,
            records,
            records_available: resolved.len(),
            model,
            optimizer,
            epoch_order: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &VagfemModel<f32> {
        &self.model
    }

    pub fn records_used(&self) -> usize {
        self.records.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.steps_per_epoch()) as u64
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn is_finished(&self) -> bool {
        self.step() >= self.total_steps()
    }

    fn order(&mut self, epoch: usize) -> &[usize] {
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.records.len()).collect();
            order.shuffle(&mut self.config.data_rng(SHUFFLE_STREAM + epoch as u64));
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().expect("just set").1
    }

    /// Record indices of the batch at global step `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, slot) = (step as usize / spe, step as usize % spe);
        let bs = self.config.batch_size;
        let order = self.order(epoch);
        order[slot * bs..((slot + 1) * bs).min(order.len())].to_vec()
    }

    /// Loss of the current model on one batch without updating anything.
    pub fn evaluate_batch(&self, indices: &[usize]) -> Result<LossBreakdown> {
        let refs: Vec<&ResolvedRecord> = indices.iter().map(|&i| &self.records[i]).collect();
        let batch = TrainingBatch::gather(&self.stores, &refs)?;
        let mut g = Graph::new();
        let loss = combined_loss(&mut g, &self.model, self.model.params(), &batch, self.config.mode, &self.config.loss)?;
        Ok(loss.breakdown(&g))
    }

    /// Mean loss over the whole (subsampled) training set in fixed-order
    /// batches of the configured size.
    pub fn evaluate_dataset(&self) -> Result<LossBreakdown> {
        let n = self.records.len();
        let all: Vec<usize> = (0..n).collect();
        let mut acc = LossBreakdown {
            infonce: 0.0,
            triplet: 0.0,
            total: 0.0,
        };
        for chunk in all.chunks(self.config.batch_size) {
            let b = self.evaluate_batch(chunk)?;
            let w = chunk.len() as f64 / n as f64;
            acc.infonce += w * b.infonce;
            acc.triplet += w * b.triplet;
            acc.total += w * b.total;
        }
        Ok(acc)
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step();
        let epoch = step as usize / self.steps_per_epoch();
        let indices = self.batch_indices(step);
        let refs: Vec<&ResolvedRecord> = indices.iter().map(|&i| &self.records[i]).collect();
        let batch = TrainingBatch::gather(&self.stores, &refs)?;
        let mut g = Graph::new();
        let loss = combined_loss(&mut g, &self.model, self.model.params(), &batch, self.config.mode, &self.config.loss)?;
        let grads = g.backward(loss.total, self.model.params())?;
        self.optimizer.step(self.model.params_mut(), &grads)?;
        let b = loss.breakdown(&g);
        let record = StepRecord {
            step,
            epoch,
            batch_size: indices.len(),
            infonce: b.infonce,
            triplet: b.triplet,
            total: b.total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs up to `n` more steps, stopping at the end of the schedule.
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.train_step()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run_steps(u64::MAX)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step(),
            params: self.model.params().clone(),
            first_moments: self.optimizer.first_moments().to_vec(),
            second_moments: self.optimizer.second_moments().to_vec(),
        }
    }

    /// Steps run by this trainer instance (not those before a resume).
    pub fn log(&self) -> TrainLog {
        TrainLog {
            config: self.config.clone(),
            records_available: self.records_available,
            records_used: self.records.len(),
            steps: self.log.clone(),
        }
    }
}

/// Trains from scratch to the end of the schedule.
pub fn train(config: TrainConfig, records: &[TripletRecord], stores: Stores<'_>) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(config, records, stores)?;
    trainer.run_to_end()?;
    Ok((trainer.checkpoint(), trainer.log()))
}

#[cfg(test)]
mod tests;
