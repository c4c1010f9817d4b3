//! Variance-guided feature-mask query encoder.
//!
//! The forward pass for a batch of image embeddings `V` and text embeddings
//! `T` (both `B x D`, unit rows):
//!
//! ```text
//! H_V, H_T = Transformer([proj(V) + pos_image ; proj(T) + pos_text])
//! omega    = logistic(Linear([H_V ; H_T]))                     B x 1
//! U        = normalize(omega * V + (1 - omega) * T)            B x D
//! var_d    = population variance of U[:, d] over the batch
//! M        = 1 on the k highest-variance dims (ties: lower index)
//! U'       = logistic(U) * M * U + U
//! out      = normalize(U')
//! ```
//!
//! Only the scalar `omega` leaves the transformer; everything after it runs
//! in the embedding space `R^D`. Baseline mode stops at `U`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{column_variance, row_norm, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Rows whose pre-normalization fused norm falls below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Fraction of embedding dimensions kept by the variance mask.
    pub mask_ratio: f64,
    /// Floor on the norm used by l2 normalization.
    pub epsilon: f64,
    pub layer_norm_eps: f64,
}

impl FusionConfig {
    /// 2 layers, 8 heads of width 64, 4x FFN, top-20% mask.
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            model_dim: 512,
            layers: 2,
            heads: 8,
            head_dim: 64,
            ffn_mult: 4,
            mask_ratio: 0.2,
            epsilon: 1e-12,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.heads == 0 || self.head_dim == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers, heads, head_dim and ffn_mult must be positive".into());
        }
        if self.model_dim != self.heads * self.head_dim {
            return bad(format!(
                "model_dim {} != heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(self.epsilon > 0.0) || !(self.layer_norm_eps > 0.0) {
            return bad("epsilons must be positive".into());
        }
        Ok(())
    }

    /// Number of masked dimensions, `ceil(mask_ratio * D)`.
    pub fn mask_k(&self) -> usize {
        mask_cardinality(self.mask_ratio, self.embed_dim)
    }
}

/// `ceil(ratio * dim)`, with a small guard so products like `0.2 * 5` that
/// land a hair above an integer do not round up.
pub fn mask_cardinality(ratio: f64, dim: usize) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    let k = (ratio * dim as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Vagfem,
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "vagfem" => Ok(Mode::Vagfem),
            "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode {other:?} (expected vagfem or baseline)")),
        }
    }
}

/// Dimensions selected by the variance mask for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMask {
    /// Strictly increasing dimension indices.
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
    pub variance: Vec<f64>,
}

impl BatchMask {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Selects the `k` largest entries of a precomputed variance vector.
    pub fn from_variance(variance: Vec<f64>, k: usize) -> Self {
        let mut order: Vec<usize> = (0..variance.len()).collect();
        order.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]).then(a.cmp(&b)));
        let mut selected: Vec<usize> = order.into_iter().take(k.min(variance.len())).collect();
        selected.sort_unstable();
        let mut mask = vec![false; variance.len()];
        for &d in &selected {
            mask[d] = true;
        }
        Self {
            selected,
            mask,
            variance,
        }
    }
}

/// Population variance per column of `u`, then the top-`k` dimensions.
pub fn variance_mask<T: Scalar>(u: &Tensor<T>, k: usize) -> BatchMask {
    BatchMask::from_variance(column_variance(u), k)
}

/// Where the variance statistics for the mask come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskStats<'a> {
    /// All rows of the current batch.
    Batch,
    /// Only the first `n` rows; the resulting mask is applied to every row.
    Leading(usize),
    Fixed(&'a BatchMask),
}

struct LayerIds {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    down_w: ParamId,
    down_b: ParamId,
}

struct ModelIds {
    in_w: ParamId,
    in_b: ParamId,
    pos_image: ParamId,
    pos_text: ParamId,
    layers: Vec<LayerIds>,
    final_gamma: ParamId,
    final_beta: ParamId,
    omega_w: ParamId,
    omega_b: ParamId,
}

/// Parameter layout: name, rows, cols, initializer.
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

fn layout(cfg: &FusionConfig) -> Vec<(String, usize, usize, Init)> {
    let (d, m, f) = (cfg.embed_dim, cfg.model_dim, cfg.model_dim * cfg.ffn_mult);
    let mut out = vec![
        ("input_proj.weight".to_string(), d, m, Init::Uniform { fan_in: d }),
        ("input_proj.bias".to_string(), 1, m, Init::Zeros),
        ("pos.image".to_string(), 1, m, Init::Zeros),
        ("pos.text".to_string(), 1, m, Init::Zeros),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gamma"), 1, m, Init::Ones),
            (p("ln1.beta"), 1, m, Init::Zeros),
            (p("attn.q.weight"), m, m, Init::Uniform { fan_in: m }),
            (p("attn.q.bias"), 1, m, Init::Zeros),
            (p("attn.k.weight"), m, m, Init::Uniform { fan_in: m }),
            (p("attn.k.bias"), 1, m, Init::Zeros),
            (p("attn.v.weight"), m, m, Init::Uniform { fan_in: m }),
            (p("attn.v.bias"), 1, m, Init::Zeros),
            (p("attn.o.weight"), m, m, Init::Uniform { fan_in: m }),
            (p("attn.o.bias"), 1, m, Init::Zeros),
            (p("ln2.gamma"), 1, m, Init::Ones),
            (p("ln2.beta"), 1, m, Init::Zeros),
            (p("ffn.up.weight"), m, f, Init::Uniform { fan_in: m }),
            (p("ffn.up.bias"), 1, f, Init::Zeros),
            (p("ffn.down.weight"), f, m, Init::Uniform { fan_in: f }),
            (p("ffn.down.bias"), 1, m, Init::Zeros),
        ]);
    }
    out.extend([
        ("final_ln.gamma".to_string(), 1, m, Init::Ones),
        ("final_ln.beta".to_string(), 1, m, Init::Zeros),
        ("omega.weight".to_string(), 2 * m, 1, Init::Zeros),
        ("omega.bias".to_string(), 1, 1, Init::Zeros),
    ]);
    out
}

/// All trainable parameters of the fusion encoder.
pub struct VagfemModel<T> {
    config: FusionConfig,
    params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Scalar> Clone for VagfemModel<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid model")
    }
}

impl<T: Scalar> std::fmt::Debug for VagfemModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VagfemModel")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl<T: Scalar> VagfemModel<T> {
    /// Fan-in scaled uniform weights, zero biases, unit layer-norm gains, and
    /// a zero omega head so the untrained model blends image and text evenly.
    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, rows, cols, init) in layout(&config) {
            let data = match init {
                Init::Zeros => vec![T::ZERO; rows * cols],
                Init::Ones => vec![T::ONE; rows * cols],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..rows * cols).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            params.insert(name, Tensor::matrix(rows, cols, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes against
    /// `config`.
    pub fn from_params(config: FusionConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, rows, cols, _) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            let shape = params.get(id).value.shape();
            if shape != [*rows, *cols] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {shape:?}, config expects [{rows}, {cols}]"
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layers.{l}.{s}"));
                LayerIds {
                    ln1_gamma: p("ln1.gamma"),
                    ln1_beta: p("ln1.beta"),
                    q_w: p("attn.q.weight"),
                    q_b: p("attn.q.bias"),
                    k_w: p("attn.k.weight"),
                    k_b: p("attn.k.bias"),
                    v_w: p("attn.v.weight"),
                    v_b: p("attn.v.bias"),
                    o_w: p("attn.o.weight"),
                    o_b: p("attn.o.bias"),
                    ln2_gamma: p("ln2.gamma"),
                    ln2_beta: p("ln2.beta"),
                    up_w: p("ffn.up.weight"),
                    up_b: p("ffn.up.bias"),
                    down_w: p("ffn.down.weight"),
                    down_b: p("ffn.down.bias"),
                }
            })
            .collect();
        let ids = ModelIds {
            in_w: id("input_proj.weight"),
            in_b: id("input_proj.bias"),
            pos_image: id("pos.image"),
            pos_text: id("pos.text"),
            layers,
            final_gamma: id("final_ln.gamma"),
            final_beta: id("final_ln.beta"),
            omega_w: id("omega.weight"),
            omega_b: id("omega.bias"),
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> VagfemModel<U> {
        VagfemModel::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn p(params: &ParamStore<T>, g: &mut Graph<T>, id: ParamId) -> Result<Var> {
        Ok(g.param(params, id)?)
    }

    fn affine(&self, ps: &ParamStore<T>, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = Self::p(ps, g, w)?;
        let b = Self::p(ps, g, b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, ps: &ParamStore<T>, g: &mut Graph<T>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.config.layer_norm_eps)?;
        let gamma = Self::p(ps, g, gamma)?;
        let beta = Self::p(ps, g, beta)?;
        let scaled = g.mul_row(n, gamma)?;
        Ok(g.add_row(scaled, beta)?)
    }

    /// Runs the two-token (image, text) sequence of every row through the
    /// pre-norm encoder and returns the per-slot hidden states, each
    /// `B x model_dim`.
    pub fn fuse_tokens(&self, ps: &ParamStore<T>, g: &mut Graph<T>, v: Var, t: Var) -> Result<(Var, Var)> {
        let (vv, tv) = (g.value(v), g.value(t));
        if vv.cols() != self.config.embed_dim {
            return Err(Error::DimMismatch {
                expected: self.config.embed_dim,
                got: vv.cols(),
            });
        }
        if vv.shape() != tv.shape() {
            return Err(Error::DimMismatch {
                expected: vv.cols(),
                got: tv.cols(),
            });
        }
        let batch = vv.rows();
        let ids = &self.ids;
        let pv = self.affine(ps, g, v, ids.in_w, ids.in_b)?;
        let pos_i = Self::p(ps, g, ids.pos_image)?;
        let pv = g.add_row(pv, pos_i)?;
        let pt = self.affine(ps, g, t, ids.in_w, ids.in_b)?;
        let pos_t = Self::p(ps, g, ids.pos_text)?;
        let pt = g.add_row(pt, pos_t)?;
        // slot-major: rows [0, B) are image tokens, [B, 2B) text tokens
        let mut x = g.concat_rows(&[pv, pt])?;

        for layer in &ids.layers {
            let h = self.layer_norm(ps, g, x, layer.ln1_gamma, layer.ln1_beta)?;
            let q = self.affine(ps, g, h, layer.q_w, layer.q_b)?;
            let k = self.affine(ps, g, h, layer.k_w, layer.k_b)?;
            let vproj = self.affine(ps, g, h, layer.v_w, layer.v_b)?;
            let a = g.attention(q, k, vproj, 2, self.config.heads)?;
            let o = self.affine(ps, g, a, layer.o_w, layer.o_b)?;
            x = g.add(x, o)?;

            let h = self.layer_norm(ps, g, x, layer.ln2_gamma, layer.ln2_beta)?;
            let up = self.affine(ps, g, h, layer.up_w, layer.up_b)?;
            let act = g.gelu(up)?;
            let down = self.affine(ps, g, act, layer.down_w, layer.down_b)?;
            x = g.add(x, down)?;
        }
        let hidden = self.layer_norm(ps, g, x, ids.final_gamma, ids.final_beta)?;
        let hv = g.slice_rows(hidden, 0, batch)?;
        let ht = g.slice_rows(hidden, batch, batch)?;
        Ok((hv, ht))
    }

    /// `logistic(Linear([H_V ; H_T]))`, shape `B x 1`.
    pub fn fusion_weight(&self, ps: &ParamStore<T>, g: &mut Graph<T>, hv: Var, ht: Var) -> Result<Var> {
        let joined = g.concat_cols(&[hv, ht])?;
        let logit = self.affine(ps, g, joined, self.ids.omega_w, self.ids.omega_b)?;
        Ok(g.logistic(logit)?)
    }

    /// Full encoder. `v` and `t` are re-normalized on entry.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        v: &Tensor<T>,
        t: &Tensor<T>,
        mode: Mode,
        stats: MaskStats<'_>,
    ) -> Result<Forward> {
        self.forward_with(&self.params, g, v, t, mode, stats)
    }

    /// [`forward`](Self::forward) reading weights from `ps`, which must share
    /// this model's layout (a clone or cast of [`params`](Self::params)).
    pub fn forward_with(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        v: &Tensor<T>,
        t: &Tensor<T>,
        mode: Mode,
        stats: MaskStats<'_>,
    ) -> Result<Forward> {
        check_inputs(&self.config, v, t)?;
        let eps = T::from_f64(self.config.epsilon);
        let v = g.constant(crate::diffcore::l2_normalize_rows(v, eps))?;
        let t = g.constant(crate::diffcore::l2_normalize_rows(t, eps))?;
        let (hv, ht) = self.fuse_tokens(ps, g, v, t)?;
        let omega = self.fusion_weight(ps, g, hv, ht)?;
        let united = unite(g, v, t, omega, self.config.epsilon)?;
        match mode {
            Mode::Baseline => Ok(Forward {
                omega,
                united,
                output: united,
                mask: None,
            }),
            Mode::Vagfem => {
                let mask = match stats {
                    MaskStats::Fixed(m) => m.clone(),
                    MaskStats::Batch => variance_mask(g.value(united), self.config.mask_k()),
                    MaskStats::Leading(n) => {
                        let rows: Vec<usize> = (0..n.min(g.value(united).rows())).collect();
                        variance_mask(&g.value(united).select_rows(&rows), self.config.mask_k())
                    }
                };
                let output = gate_residual_normalize(g, united, &mask, self.config.epsilon)?;
                Ok(Forward {
                    omega,
                    united,
                    output,
                    mask: Some(mask),
                })
            }
        }
    }

    /// Forward pass without gradient bookkeeping; returns the output rows
    /// and the mask that was applied.
    pub fn encode(
        &self,
        v: &Tensor<T>,
        t: &Tensor<T>,
        mode: Mode,
        stats: MaskStats<'_>,
    ) -> Result<(Tensor<T>, Option<BatchMask>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, v, t, mode, stats)?;
        Ok((g.value(f.output).clone(), f.mask))
    }

    /// Fusion weights and united features `U` only.
    pub fn united_features(&self, v: &Tensor<T>, t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, v, t, Mode::Baseline, MaskStats::Batch)?;
        Ok((g.value(f.omega).clone(), g.value(f.united).clone()))
    }
}

/// Graph handles produced by [`VagfemModel::forward`].
pub struct Forward {
    /// Fusion weights, `B x 1`.
    pub omega: Var,
    /// Normalized blend `U`.
    pub united: Var,
    pub output: Var,
    /// Mask applied in vagfem mode.
    pub mask: Option<BatchMask>,
}

fn check_inputs<T: Scalar>(cfg: &FusionConfig, v: &Tensor<T>, t: &Tensor<T>) -> Result<()> {
    for x in [v, t] {
        if x.cols() != cfg.embed_dim {
            return Err(Error::DimMismatch {
                expected: cfg.embed_dim,
                got: x.cols(),
            });
        }
    }
    if v.rows() != t.rows() {
        return Err(Error::Config(format!(
            "image batch has {} rows, text batch {}",
            v.rows(),
            t.rows()
        )));
    }
    Ok(())
}

/// `normalize(omega * V + (1 - omega) * T)`.
pub fn unite<T: Scalar>(g: &mut Graph<T>, v: Var, t: Var, omega: Var, eps: f64) -> Result<Var> {
    let one_minus = g.scale(omega, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let wv = g.mul_col(v, omega)?;
    let wt = g.mul_col(t, one_minus)?;
    let mixed = g.add(wv, wt)?;
    let mv = g.value(mixed);
    for row in 0..mv.rows() {
        let norm = row_norm(mv.row(row)).to_f64();
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateFusion { row, norm });
        }
    }
    Ok(g.l2_normalize_rows(mixed, eps)?)
}

/// `normalize(logistic(U) * M * U + U)`. With an empty mask `U` is returned
/// untouched.
pub fn gate_residual_normalize<T: Scalar>(g: &mut Graph<T>, u: Var, mask: &BatchMask, eps: f64) -> Result<Var> {
    let dim = g.value(u).cols();
    if mask.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: mask.dim(),
        });
    }
    if mask.selected.is_empty() {
        return Ok(u);
    }
    let residual = gate_residual(g, u, mask)?;
    Ok(g.l2_normalize_rows(residual, eps)?)
}

/// [`gate_residual_normalize`] on plain rows.
pub fn apply_mask<T: Scalar>(u: &Tensor<T>, mask: &BatchMask, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(u.clone())?;
    let out = gate_residual_normalize(&mut g, v, mask, eps)?;
    Ok(g.value(out).clone())
}

/// `logistic(U) * M * U + U`, before normalization.
pub fn gate_residual<T: Scalar>(g: &mut Graph<T>, u: Var, mask: &BatchMask) -> Result<Var> {
    let dim = g.value(u).cols();
    if mask.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: mask.dim(),
        });
    }
    let m = Tensor::matrix(1, dim, mask.mask.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect())?;
    let m = g.constant(m)?;
    let alpha = g.logistic(u)?;
    let gated = g.mul(alpha, u)?;
    let gated = g.mul_row(gated, m)?;
    Ok(g.add(gated, u)?)
}
