//! AdamW with decoupled weight decay and bias correction.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimiser state: per-parameter moments and the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Every trainable
    /// parameter must have a gradient in `grads`.
    pub fn step(&mut self, params: &mut LayerParams<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g =
                grads.get(name).ok_or_else(|| Error::Usage(format!("no gradient for trainable parameter '{name}'")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for '{name}' has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powf(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powf(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let one = T::one();
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = &grads[name];
            let st = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            let w = p.value.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] = w[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
