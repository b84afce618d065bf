//! SGD with momentum, weight decay on weights and kernels only, and a
//! cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{HebaError, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 7.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn cross_dataset() -> Self {
        OptimConfig {
            lr: 6.5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HebaError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// `lr * (1 + cos(π t / T)) / 2`, clamped to 0 past the end.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
}

/// Optimizer view of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub cfg: OptimConfig,
    pub specs: Vec<ParamSpec>,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: OptimConfig, specs: Vec<ParamSpec>) -> Result<Self> {
        cfg.validate()?;
        let velocity = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Ok(Sgd {
            cfg,
            specs,
            velocity,
        })
    }

    /// One update. `params` and `grads` follow `specs` order. Returns `lr_t`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
        step_index: usize,
        total_steps: usize,
    ) -> Result<f64> {
        if params.len() != self.specs.len() || grads.len() != self.specs.len() {
            return Err(HebaError::Invariant(format!(
                "optimizer holds {} parameters, got {} tensors and {} gradients",
                self.specs.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr_t = cosine_lr(self.cfg.lr, step_index, total_steps);
        let (mu, wd, lr) = (
            T::of(self.cfg.momentum),
            T::of(self.cfg.weight_decay),
            T::of(lr_t),
        );
        for (i, spec) in self.specs.iter().enumerate() {
            let g = grads[i].ok_or_else(|| HebaError::MissingGradient(spec.name.clone()))?;
            let p = &mut *params[i];
            if p.shape() != spec.shape.as_slice() || g.shape() != spec.shape.as_slice() {
                return Err(HebaError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: spec.shape.clone(),
                    rhs: g.shape().to_vec(),
                });
            }
            let v = self.velocity[i].data_mut();
            for ((vj, &gj), pj) in v.iter_mut().zip(g.data()).zip(p.data_mut()) {
                let mut d = gj;
                if spec.decay {
                    d = d + wd * *pj;
                }
                *vj = mu * *vj + d;
                *pj = *pj - lr * *vj;
            }
        }
        Ok(lr_t)
    }
}
