use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept for every entry of the store
/// (buffers included) so they line up with parameter ids; only trainable
/// entries are ever updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t, _)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::Invalid("first and second moments do not align".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update to every trainable tensor. A parameter without a
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            if self.m[i].shape() != param.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: self.m[i].shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            let grad = grads.get(id);
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam gradient",
                        lhs: g.shape().to_vec(),
                        rhs: param.shape().to_vec(),
                    });
                }
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
