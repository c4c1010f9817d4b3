//! Flag definitions and `--config` merging.
//!
//! Every subcommand's flags double as its config-file schema: a JSON object
//! whose keys are the flag names in snake_case. Flags given on the command
//! line win over the file.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use figrot::losses::NegativeSource;
use figrot::synthetic::{GALLERY_FILE, IMAGES_FILE, TEXTS_FILE, TRIPLETS_FILE};
use figrot::vagfem::Mode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A problem with the invocation itself rather than the work it asked for.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> anyhow::Result<T> {
    value.clone().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

#[derive(Parser, Debug)]
#[command(name = "figrot", version, about = "Composed image retrieval with variance-guided fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Keep scored image/text pairs strictly above a similarity threshold.
    Filter(FilterArgs),
    /// Per-task triplet counts and mean text lengths.
    Stats(StatsArgs),
    /// Train the fusion model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a triplet set.
    Eval(EvalArgs),
    /// Top-K gallery items for one reference image and modification text.
    Retrieve(RetrieveArgs),
    /// Cosine histograms, variance profile and mask stability.
    Analyze(AnalyzeArgs),
    /// Write a seeded synthetic fixture.
    GenSynthetic(GenSyntheticArgs),
    /// Train and evaluate at several training-set caps.
    Sweep(SweepArgs),
}

/// Input stores and triplets. `--data-dir` supplies the standard file names;
/// explicit paths override them.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
}

pub struct DataPaths {
    pub images: PathBuf,
    pub texts: PathBuf,
    pub gallery: PathBuf,
    pub triplets: PathBuf,
}

impl DataArgs {
    fn pick(&self, explicit: &Option<PathBuf>, file: &str, flag: &str) -> anyhow::Result<PathBuf> {
        match (explicit, &self.data_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(file)),
            (None, None) => Err(usage(format!("missing --{flag} (or --data-dir)"))),
        }
    }

    pub fn triplets_path(&self) -> anyhow::Result<PathBuf> {
        self.pick(&self.triplets, TRIPLETS_FILE, "triplets")
    }

    pub fn paths(&self) -> anyhow::Result<DataPaths> {
        Ok(DataPaths {
            images: self.pick(&self.images, IMAGES_FILE, "images")?,
            texts: self.pick(&self.texts, TEXTS_FILE, "texts")?,
            gallery: self.pick(&self.gallery, GALLERY_FILE, "gallery")?,
            triplets: self.triplets_path()?,
        })
    }
}

/// Overrides of the training schedule, loss and fusion architecture.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Enable the triplet term (`--triplet false` disables it).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub triplet: Option<bool>,
    #[arg(long)]
    pub negative_source: Option<NegativeSource>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub max_triplets: Option<usize>,
}

/// Search and scoring settings shared by `eval` and `sweep`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SearchOverrides {
    /// Drop each query's own reference image from its candidates.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub self_exclusion: Option<bool>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    #[arg(long)]
    pub shards: Option<usize>,
    /// Length of the exported ranked lists.
    #[arg(long)]
    pub export_k: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// JSONL file of {"image_id", "text_id", "score"} objects.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct StatsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Also write the statistics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchOverrides,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ref_id: Option<String>,
    /// Defaults to the empty prompt.
    #[arg(long)]
    pub text_id: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub self_exclusion: Option<bool>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Without a checkpoint the model is freshly initialized from `--seed`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchOverrides,
    /// Comma-separated training-set sizes; `all` means no cap.
    #[arg(long)]
    pub caps: Option<String>,
    /// Queries to score each run on; defaults to the training triplets.
    #[arg(long)]
    pub eval_triplets: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Overlays the command-line flags on the `--config` file, if any. Keys the
/// subcommand does not know are rejected.
pub fn resolve<A>(cli: &A, config: Option<&Path>) -> anyhow::Result<A>
where
    A: Serialize + DeserializeOwned + Default,
{
    let mut merged = match config {
        None => Map::new(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("config {} is not a JSON object", path.display()))),
                Err(e) => return Err(usage(format!("config {}: {e}", path.display()))),
            }
        }
    };
    let Value::Object(known) = serde_json::to_value(A::default())? else {
        unreachable!("flag structs serialize to objects")
    };
    if let Some(bad) = merged.keys().find(|k| !known.contains_key(*k)) {
        return Err(usage(format!("unknown config key {bad:?}")));
    }
    let Value::Object(flags) = serde_json::to_value(cli)? else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}
