use tspnco_autograd::{BatchStats, Graph, ParamId, ParamStore, Var};

use super::{Init, Source};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch norm behaviour: batch statistics while training, running
/// statistics otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

pub(crate) fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn build(src: &mut Source<'_>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = src.tensor(&format!("{name}.w"), &[fan_in, fan_out], Init::Uniform(bound))?;
        let b = if bias {
            Some(src.tensor(&format!("{name}.b"), &[fan_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn tensor_count(&self) -> usize {
        1 + usize::from(self.b.is_some())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub(crate) fn build(src: &mut Source<'_>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: src.tensor(&format!("{name}.gamma"), &[d], Init::Const(1.0))?,
            beta: src.tensor(&format!("{name}.beta"), &[d], Init::Const(0.0))?,
            mean: src.tensor(&format!("{name}.running_mean"), &[d], Init::Buffer(0.0))?,
            var: src.tensor(&format!("{name}.running_var"), &[d], Init::Buffer(1.0))?,
        })
    }

    pub fn tensor_count(&self) -> usize {
        4
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                updates.push(BnUpdate {
                    mean: self.mean,
                    var: self.var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => Ok(g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.mean).data(),
                store.get(self.var).data(),
                BN_EPS,
            )?),
        }
    }
}
