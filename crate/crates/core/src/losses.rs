//! Contrastive and reference-negative triplet objectives.
//!
//! ```text
//! infonce = -(1/B) sum_i log softmax_j(x_i . y_j / tau)[i]
//! triplet = (1/B) sum_i max(0, |q_i - p_i|^2 - |q_i - n_i|^2 + margin)
//! total   = infonce + lambda * triplet
//! ```
//!
//! `q` is the fused query, `p` its target, and `n` the same reference fused
//! with the empty prompt, so the loss pushes queries away from what the
//! reference alone would retrieve.

use serde::{Deserialize, Serialize};

use crate::data::TrainingBatch;
use crate::diffcore::{row_norm, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::vagfem::{MaskStats, Mode, VagfemModel};

/// Unit-norm tolerance on InfoNCE inputs.
pub const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// The reference fused with the empty prompt.
    #[default]
    FusedEmptyText,
    /// The normalized reference embedding itself.
    RawReference,
}

impl std::str::FromStr for NegativeSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fused_empty_text" => Ok(Self::FusedEmptyText),
            "raw_reference" => Ok(Self::RawReference),
            other => Err(format!(
                "unknown negative source {other:?} (expected fused_empty_text or raw_reference)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub lambda: f64,
    pub triplet_enabled: bool,
    #[serde(default)]
    pub negative_source: NegativeSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            margin: 0.3,
            lambda: 0.2,
            triplet_enabled: true,
            negative_source: NegativeSource::FusedEmptyText,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub triplet: f64,
    pub total: f64,
}

fn check_unit<T: Scalar>(x: &Tensor<T>, what: &'static str) -> Result<()> {
    for row in 0..x.rows() {
        let norm = row_norm(x.row(row)).to_f64();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitNorm { what, row, norm });
        }
    }
    Ok(())
}

/// One-directional InfoNCE of rows of `x` against rows of `y` with in-batch
/// negatives.
pub fn infonce<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (xv, yv) = (g.value(x), g.value(y));
    if xv.shape() != yv.shape() {
        return Err(Error::Tensor(crate::diffcore::TensorError::ShapeMismatch {
            op: "infonce",
            left: xv.shape().to_vec(),
            right: yv.shape().to_vec(),
        }));
    }
    if xv.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_unit(xv, "infonce query")?;
    check_unit(yv, "infonce target")?;
    let sims = g.matmul_nt(x, y)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    infonce_from_logits(g, logits)
}

/// Mean negative log-probability of the diagonal of a square logit matrix.
pub fn infonce_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let b = g.value(logits).rows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    let log_probs = g.log_softmax_rows(logits)?;
    let diag = g.constant(Tensor::identity(b))?;
    let picked = g.mul(log_probs, diag)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// Mean hinge on squared Euclidean distances.
pub fn triplet<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    if g.value(q).rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    let dp = g.sub(q, p)?;
    let dp2 = g.mul(dp, dp)?;
    let dp2 = g.row_sum(dp2)?;
    let dn = g.sub(q, n)?;
    let dn2 = g.mul(dn, dn)?;
    let dn2 = g.row_sum(dn2)?;
    let gap = g.sub(dp2, dn2)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.relu(gap)?;
    Ok(g.mean(hinge)?)
}

/// Scalar handles for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub infonce: Var,
    pub triplet: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            infonce: g.value(self.infonce).item().to_f64(),
            triplet: self.triplet.map_or(0.0, |t| g.value(t).item().to_f64()),
            total: g.value(self.total).item().to_f64(),
        }
    }
}

/// `infonce + lambda * triplet`; the triplet term is skipped when `n` is
/// `None`.
pub fn combine<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var, n: Option<Var>, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let info = infonce(g, q, p, cfg.temperature)?;
    match n {
        Some(n) => {
            let trip = triplet(g, q, p, n, cfg.margin)?;
            let weighted = g.scale(trip, cfg.lambda)?;
            let total = g.add(info, weighted)?;
            Ok(LossVars {
                infonce: info,
                triplet: Some(trip),
                total,
            })
        }
        None => Ok(LossVars {
            infonce: info,
            triplet: None,
            total: info,
        }),
    }
}

/// Encodes a training batch and records its loss.
///
/// With the triplet term on and the fused negative selected, query rows and
/// (reference, empty prompt) rows go through the encoder together; the
/// variance mask is computed from the query rows only and applied to both.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &VagfemModel<T>,
    params: &ParamStore<T>,
    batch: &TrainingBatch<T>,
    mode: Mode,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let b = batch.query.len();
    if b == 0 {
        return Err(Error::Empty("training batch"));
    }
    let positive = g.constant(batch.positive.clone())?;
    if !cfg.triplet_enabled {
        let f = model.forward_with(params, g, &batch.query.reference, &batch.query.text, mode, MaskStats::Batch)?;
        return combine(g, f.output, positive, None, cfg);
    }
    match cfg.negative_source {
        NegativeSource::FusedEmptyText => {
            let v = stack(&batch.query.reference, &batch.query.reference)?;
            let t = stack(&batch.query.text, &batch.empty_text)?;
            let f = model.forward_with(params, g, &v, &t, mode, MaskStats::Leading(b))?;
            let q = g.slice_rows(f.output, 0, b)?;
            let n = g.slice_rows(f.output, b, b)?;
            combine(g, q, positive, Some(n), cfg)
        }
        NegativeSource::RawReference => {
            let f = model.forward_with(params, g, &batch.query.reference, &batch.query.text, mode, MaskStats::Batch)?;
            let eps = T::from_f64(model.config().epsilon);
            let n = g.constant(crate::diffcore::l2_normalize_rows(&batch.query.reference, eps))?;
            combine(g, f.output, positive, Some(n), cfg)
        }
    }
}

fn stack<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::matrix(a.rows() + b.rows(), a.cols(), data)?)
}

/// InfoNCE on plain tensors.
pub fn infonce_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(x.clone())?, g.constant(y.clone())?);
    let l = infonce(&mut g, x, y, temperature)?;
    Ok(g.value(l).item().to_f64())
}

/// Triplet loss on plain tensors.
pub fn triplet_value<T: Scalar>(q: &Tensor<T>, p: &Tensor<T>, n: &Tensor<T>, margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (q, p, n) = (g.constant(q.clone())?, g.constant(p.clone())?, g.constant(n.clone())?);
    let l = triplet(&mut g, q, p, n, margin)?;
    Ok(g.value(l).item().to_f64())
}
