use crate::diffcore::{Gradients, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Every parameter is decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved moments; shapes must match `params` one for one.
    pub fn from_state(
        config: AdamWConfig,
        params: &ParamStore<T>,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters but {} first and {} second moments",
                params.len(),
                m.len(),
                v.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&m).zip(&v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {:?}", p.name)));
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.get(id).name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let correct1 = T::from_f64(1.0 - c.beta1.powf(t));
        let correct2 = T::from_f64(1.0 - c.beta2.powf(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.epsilon));

        for (id, g) in grads.iter() {
            let i = id.index();
            let p = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
