//! Similarity distributions and variance-mask diagnostics.
//!
//! Histograms cover cosine similarity over [-1, 1] with uniform bins; the
//! last bin is closed on the right. Text output is two whitespace-separated
//! columns per line so it loads directly in gnuplot or a CSV reader.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QueryInputs, ResolvedRecord, Stores};
use crate::diffcore::{dot, row_norm, Scalar, Tensor};
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::evalmetrics::encode_queries;
use crate::vagfem::{mask_cardinality, variance_mask, Mode, VagfemModel};

pub const DEFAULT_BINS: usize = 50;
/// Cosines may overshoot [-1, 1] by this much from rounding.
pub const COSINE_SLACK: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges from -1 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub samples: u64,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("histogram input"));
        }
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        for (i, &x) in values.iter().enumerate() {
            if !(x.abs() <= 1.0 + COSINE_SLACK) {
                return Err(Error::Config(format!("value {i} ({x}) outside [-1, 1]")));
            }
            let pos = ((x + 1.0) / 2.0 * bins as f64).floor();
            let b = (pos.max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        Ok(Self {
            edges,
            counts,
            samples: values.len() as u64,
            mean,
            std: var.sqrt(),
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        self.edges.windows(2).map(|w| (w[0] + w[1]) / 2.0)
    }

    /// One `center count` line per bin.
    pub fn to_columns(&self) -> String {
        let mut out = String::new();
        for (c, n) in self.centers().zip(&self.counts) {
            let _ = writeln!(out, "{c} {n}");
        }
        out
    }
}

fn check_unit(what: &'static str, row: usize, v: &[f32]) -> Result<()> {
    let norm = row_norm(v).to_f64();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnitNorm { what, row, norm });
    }
    Ok(())
}

/// Cosine of every (query, target) pair, binned.
pub fn cosine_histogram(pairs: &[(&[f32], &[f32])], bins: usize) -> Result<Histogram> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    let mut values = Vec::with_capacity(pairs.len());
    for (i, (q, t)) in pairs.iter().enumerate() {
        if q.len() != t.len() {
            return Err(Error::DimMismatch {
                expected: q.len(),
                got: t.len(),
            });
        }
        check_unit("query", i, q)?;
        check_unit("target", i, t)?;
        values.push(dot(q, t).to_f64());
    }
    Histogram::from_values(&values, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineDistribution {
    pub positive: Histogram,
    pub negative: Histogram,
}

/// Positive pairs are each query with every one of its targets; negatives
/// pair each query with one gallery row drawn uniformly from its
/// non-targets.
pub fn similarity_distribution(
    queries: &Tensor<f32>,
    records: &[ResolvedRecord],
    gallery: &EmbeddingStore,
    bins: usize,
    seed: u64,
) -> Result<CosineDistribution> {
    if queries.rows() != records.len() {
        return Err(Error::DimMismatch {
            expected: records.len(),
            got: queries.rows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let q = queries.row(i);
        for &t in &r.target_rows {
            positive.push((q, gallery.row(t)));
        }
        let targets: BTreeSet<usize> = r.target_rows.iter().copied().collect();
        let free = gallery.len() - targets.len();
        if free == 0 {
            continue;
        }
        let nth = rng.random_range(0..free);
        let row = (0..gallery.len())
            .filter(|r| !targets.contains(r))
            .nth(nth)
            .expect("non-target row exists");
        negative.push((q, gallery.row(row)));
    }
    Ok(CosineDistribution {
        positive: cosine_histogram(&positive, bins)?,
        negative: cosine_histogram(&negative, bins)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimVariance {
    pub dim: usize,
    pub variance: f64,
}

/// Population variance of every column, largest first; equal variances are
/// ordered by dimension.
pub fn variance_profile<T: Scalar>(x: &Tensor<T>) -> Vec<DimVariance> {
    let (n, d) = (x.rows(), x.cols());
    let mut profile: Vec<DimVariance> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| x.get(i, j).to_f64()).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let variance = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            DimVariance { dim: j, variance }
        })
        .collect();
    profile.sort_by(|a, b| b.variance.total_cmp(&a.variance).then(a.dim.cmp(&b.dim)));
    profile
}

/// One `dim variance` line per dimension, in profile order.
pub fn profile_columns(profile: &[DimVariance]) -> String {
    let mut out = String::new();
    for p in profile {
        let _ = writeln!(out, "{} {}", p.dim, p.variance);
    }
    out
}

/// Jaccard overlap of the top-`k` variance dimensions of every pair of
/// batches.
pub fn mask_stability<T: Scalar>(batches: &[Tensor<T>], k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Config("mask stability needs k >= 1".into()));
    }
    if batches.len() < 2 {
        return Err(Error::Config(format!("mask stability needs at least 2 batches, got {}", batches.len())));
    }
    let dim = batches[0].cols();
    let mut sets = Vec::with_capacity(batches.len());
    for b in batches {
        if b.cols() != dim {
            return Err(Error::DimMismatch { expected: dim, got: b.cols() });
        }
        if b.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        sets.push(variance_mask(b, k).selected.into_iter().collect::<BTreeSet<usize>>());
    }
    Ok(sets
        .iter()
        .map(|a| {
            sets.iter()
                .map(|b| {
                    let union = a.union(b).count();
                    a.intersection(b).count() as f64 / union as f64
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub mode: Mode,
    pub bins: usize,
    pub seed: u64,
    /// Rows per batch for the mask-stability study.
    pub batch_size: usize,
    /// Overrides the model's mask ratio when set.
    pub mask_ratio: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Vagfem,
            bins: DEFAULT_BINS,
            seed: 0,
            batch_size: 32,
            mask_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub mask_k: usize,
    pub query_count: usize,
    pub cosine: CosineDistribution,
    /// Profile of the fused features the mask is computed from.
    pub variance_profile: Vec<DimVariance>,
    /// `None` with fewer than two batches or an empty mask.
    pub mask_stability: Option<Vec<Vec<f64>>>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Encodes every query with `model` and collects the similarity and mask
/// diagnostics.
pub fn analyze(
    model: &VagfemModel<f32>,
    stores: &Stores<'_>,
    records: &[ResolvedRecord],
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let ratio = cfg.mask_ratio.unwrap_or(model.config().mask_ratio);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask_ratio {ratio} outside [0, 1]")));
    }
    let mask_k = mask_cardinality(ratio, stores.dim());
    let encoded = encode_queries(model, stores, records, cfg.mode, mask_k, cfg.batch_size)?;
    let cosine = similarity_distribution(&encoded.embeddings, records, stores.gallery, cfg.bins, cfg.seed)?;

    let inputs = QueryInputs::<f32>::gather(stores, &records.iter().collect::<Vec<_>>());
    let (_, united) = model.united_features(&inputs.reference, &inputs.text)?;
    let batches: Vec<Tensor<f32>> = (0..united.rows())
        .step_by(cfg.batch_size)
        .map(|start| {
            let rows: Vec<usize> = (start..(start + cfg.batch_size).min(united.rows())).collect();
            united.select_rows(&rows)
        })
        .collect();
    let mask_stability = (mask_k > 0 && batches.len() >= 2)
        .then(|| mask_stability(&batches, mask_k))
        .transpose()?;
    Ok(AnalysisReport {
        config: cfg.clone(),
        mask_k: encoded.mask.as_ref().map_or(0, |m| m.k()),
        query_count: records.len(),
        cosine,
        variance_profile: variance_profile(&united),
        mask_stability,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn two_bins_place_zero_in_upper_half() {
        let h = Histogram::from_values(&[0.0, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![0, 2]);
        assert_eq!(h.edges, vec![-1.0, 0.0, 1.0]);
        assert_eq!(h.mean, 0.5);
        assert_eq!(h.std, 0.5);
    }

    #[test]
    fn identical_pairs_fill_top_bin() {
        let v = [0.6f32, 0.8];
        let pairs = vec![(&v[..], &v[..]); 5];
        let h = cosine_histogram(&pairs, DEFAULT_BINS).unwrap();
        assert_eq!(h.counts[DEFAULT_BINS - 1], 5);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert!((h.mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn histogram_errors() {
        assert!(matches!(cosine_histogram(&[], 10), Err(Error::Empty(_))));
        assert!(Histogram::from_values(&[0.5], 0).is_err());
        assert!(Histogram::from_values(&[1.1], 4).is_err());
        assert!(Histogram::from_values(&[f64::NAN], 4).is_err());
        let a = [1.0f32, 1.0];
        assert!(matches!(cosine_histogram(&[(&a, &a)], 4), Err(Error::NotUnitNorm { .. })));
        // rounding overshoot just past 1 still lands in the last bin
        assert_eq!(Histogram::from_values(&[1.0 + 5e-7, -1.0 - 5e-7], 4).unwrap().counts, vec![1, 0, 0, 1]);
    }

    #[test]
    fn columns_text() {
        let h = Histogram::from_values(&[0.0, 1.0], 2).unwrap();
        assert_eq!(h.to_columns(), "-0.5 0\n0.5 2\n");
        let p = [DimVariance { dim: 3, variance: 1.0 }];
        assert_eq!(profile_columns(&p), "3 1\n");
    }

    #[test]
    fn profile_examples() {
        let constant = Tensor::<f64>::filled(4, 3, 0.7);
        assert!(variance_profile(&constant).iter().all(|p| p.variance == 0.0));
        assert_eq!(variance_profile(&constant).iter().map(|p| p.dim).collect::<Vec<_>>(), vec![0, 1, 2]);

        let x = Tensor::<f64>::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0]]).unwrap();
        let p = variance_profile(&x);
        assert_eq!(p[0], DimVariance { dim: 1, variance: 1.0 });
        assert_eq!(p[1].dim, 0);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f32> {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn profile_prefix_matches_variance_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for trial in 0..50 {
            let n = rng.random_range(1..40);
            let d = rng.random_range(1..64);
            let k = rng.random_range(0..=d);
            let mut x = random_matrix(&mut rng, n, d);
            if trial % 5 == 0 {
                // duplicate columns force variance ties
                for i in 0..n {
                    let v = x.get(i, 0);
                    x.row_mut(i)[d - 1] = v;
                }
            }
            let from_profile: BTreeSet<usize> = variance_profile(&x).iter().take(k).map(|p| p.dim).collect();
            let from_mask: BTreeSet<usize> = variance_mask(&x, k).selected.into_iter().collect();
            assert_eq!(from_profile, from_mask, "trial {trial}");
        }
    }

    #[test]
    fn jaccard_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 8, 6);
        let m = mask_stability(&[a.clone(), a.clone()], 2).unwrap();
        assert_eq!(m, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);

        // variance lives only in dims {0,1} vs only in {2,3}
        let lo = Tensor::<f64>::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![-1.0, -1.0, 0.0, 0.0]]).unwrap();
        let hi = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 0.0, -1.0, -1.0]]).unwrap();
        let m = mask_stability(&[lo, hi], 2).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][0], 0.0);

        let b = random_matrix(&mut rng, 8, 6);
        let m = mask_stability(&[a.clone(), b.clone()], 6).unwrap();
        assert!(m.iter().flatten().all(|&v| v == 1.0));

        assert!(mask_stability(&[a.clone(), b], 0).is_err());
        assert!(mask_stability(&[a.clone()], 2).is_err());
        let narrow = random_matrix(&mut rng, 8, 5);
        assert!(matches!(mask_stability(&[a, narrow], 2), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn negatives_avoid_targets_and_are_seeded() {
        let ids: Vec<String> = (0..6).map(|i| format!("g{i}")).collect();
        let mut data = Vec::new();
        for i in 0..6 {
            let mut row = vec![0.0f32; 6];
            row[i] = 1.0;
            data.extend(row);
        }
        let gallery = EmbeddingStore::new(ids, data, 6, true).unwrap();
        let records: Vec<ResolvedRecord> = (0..4)
            .map(|i| ResolvedRecord {
                ref_row: 0,
                text_row: 0,
                target_rows: vec![i],
            })
            .collect();
        let queries = gallery.gather(&[0, 1, 2, 3]);
        let a = similarity_distribution(&queries, &records, &gallery, 4, 9).unwrap();
        // queries are their own targets and every other row is orthogonal
        assert_eq!(a.positive.samples, 4);
        assert_eq!(a.positive.mean, 1.0);
        assert_eq!(a.negative.samples, 4);
        assert_eq!(a.negative.mean, 0.0);
        assert_eq!(a, similarity_distribution(&queries, &records, &gallery, 4, 9).unwrap());
    }

    proptest! {
        #[test]
        fn histogram_conserves_samples(values in prop::collection::vec(-1.0f64..=1.0, 1..200), bins in 1usize..80) {
            let h = Histogram::from_values(&values, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>(), values.len() as u64);
            prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(h.edges.len(), bins + 1);
        }

        #[test]
        fn jaccard_is_symmetric_with_unit_diagonal(seed in 0u64..1000, nb in 2usize..5, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches: Vec<_> = (0..nb).map(|_| random_matrix(&mut rng, 6, 8)).collect();
            let m = mask_stability(&batches, k).unwrap();
            for i in 0..nb {
                prop_assert_eq!(m[i][i], 1.0);
                for j in 0..nb {
                    prop_assert_eq!(m[i][j], m[j][i]);
                    prop_assert!((0.0..=1.0).contains(&m[i][j]));
                }
            }
        }
    }
}
