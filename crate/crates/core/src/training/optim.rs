//! Adam with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip when the global gradient norm exceeds this; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub m: Tensor2<S>,
    pub v: Tensor2<S>,
    /// Number of updates this parameter has received.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub state: BTreeMap<String, Moments<S>>,
}

/// Global L2 norm over every gradient.
pub fn grad_norm<S: Scalar>(grads: &Gradients<S>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    /// `lr_of(name)` supplies the per-parameter learning rate. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>, lr_of: impl Fn(&str) -> Result<f64>) -> Result<f64> {
        let norm = grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Invalid("non-finite gradient".into()));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            S::lit(self.config.clip_norm / norm)
        } else {
            S::one()
        };
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let eps = S::lit(self.config.eps);
        for (name, g) in grads {
            let lr = lr_of(name)?;
            let param = params
                .param_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if param.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: param.value.shape(),
                    right: g.shape(),
                });
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor2::zeros(g.rows(), g.cols()),
                v: Tensor2::zeros(g.rows(), g.cols()),
                t: 0,
            });
            st.t += 1;
            let c1 = S::one() - b1.powi(st.t as i32);
            let c2 = S::one() - b2.powi(st.t as i32);
            let lr = S::lit(lr);
            let wd = if param.decay {
                S::lit(self.config.weight_decay)
            } else {
                S::zero()
            };
            let p = param.value.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g * clip;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(norm)
    }
}
