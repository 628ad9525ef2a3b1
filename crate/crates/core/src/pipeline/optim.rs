//! AdamW with decoupled weight decay and a step learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, SchedulerConfig};
use crate::error::{Error, Result};
use crate::student::checkpoint::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with its gradient at rate `lr`.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!("{} params, {} grads, {} optimizer slots", params.len(), grads.len(), self.m.len())));
        }
        self.step += 1;
        let OptimizerConfig { weight_decay, beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::ShapeMismatch(format!("param {:?} vs grad {:?}", p.dim(), g.dim())));
            }
            ndarray::Zip::from(&mut **p).and(*g).and(&mut *m).and(&mut *v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * weight_decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn state(&self) -> AdamWState {
        AdamWState { step: self.step, m: self.m.iter().map(Matrix::from).collect(), v: self.v.iter().map(Matrix::from).collect() }
    }

    pub fn restore(cfg: &OptimizerConfig, state: &AdamWState) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            step: state.step,
            m: state.m.iter().map(Matrix::to_array).collect::<Result<_>>()?,
            v: state.v.iter().map(Matrix::to_array).collect::<Result<_>>()?,
        })
    }
}

/// Learning rate for a 0-based epoch: `lr * factor^(epoch / step_epochs)`.
pub fn step_lr(base: f64, sched: &SchedulerConfig, epoch: usize) -> f64 {
    base * sched.factor.powi((epoch / sched.step_epochs) as i32)
}
