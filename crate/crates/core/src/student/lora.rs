//! Low-rank adapters around a frozen projection: `y = W x + B (A x)`.
//!
//! Activations are row-major (`N x k` in, `N x d` out), so the batched form is
//! `Y = X Wᵀ + (X Aᵀ) Bᵀ`. There is no `alpha / r` scale on the branch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::gaussian_matrix;

pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// Frozen `d x k` weight.
    pub weight: Array2<f64>,
    /// Trainable `r x k` down-projection.
    pub a: Array2<f64>,
    /// Trainable `d x r` up-projection, zero at init.
    pub b: Array2<f64>,
    pub rank: usize,
    pub dropout_rate: f64,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct LoraTrace {
    /// Branch input after dropout.
    dropped: Array2<f64>,
    /// `dropped · Aᵀ`
    low: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraLayer {
    /// Wraps `weight` with rank-`rank` factors. `A` is drawn from
    /// `N(0, 0.02²)` and `B` is zero, so the layer starts as `W`.
    pub fn new(weight: Array2<f64>, rank: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, k) = weight.dim();
        if rank == 0 || rank * 4 > d.min(k) {
            return Err(Error::ConfigInvalid(format!("rank {rank} must satisfy 1 <= r <= min({d}, {k}) / 4")));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::ConfigInvalid(format!("dropout {dropout_rate} must be in [0, 1)")));
        }
        let a = gaussian_matrix(rank, k, A_INIT_STD, rng);
        Ok(Self { weight, a, b: Array2::zeros((d, rank)), rank, dropout_rate })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `r * (d + k)`
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Eval-mode forward of a single vector.
    pub fn forward_vec(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!("input width {} vs {}", x.len(), self.in_dim())));
        }
        Ok(self.weight.dot(x) + self.b.dot(&self.a.dot(x)))
    }

    /// Eval-mode forward of `N x k` rows.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(x.dot(&self.weight.t()) + x.dot(&self.a.t()).dot(&self.b.t()))
    }

    /// Forward that records what backward needs. With `rng`, inverted dropout
    /// at `dropout_rate` is applied to the branch input only.
    pub fn forward_traced(&self, x: &Array2<f64>, rng: Option<&mut ChaCha8Rng>) -> Result<(Array2<f64>, LoraTrace)> {
        self.check(x)?;
        let (dropped, mask) = match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let mask = Array2::from_shape_simple_fn(x.dim(), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                (x * &mask, Some(mask))
            }
            _ => (x.clone(), None),
        };
        let low = dropped.dot(&self.a.t());
        let y = x.dot(&self.weight.t()) + low.dot(&self.b.t());
        Ok((y, LoraTrace { dropped, low, mask }))
    }

    /// Returns `(dX, grads)` for upstream gradient `dy`.
    pub fn backward(&self, trace: &LoraTrace, dy: &Array2<f64>) -> (Array2<f64>, LoraGrad) {
        let grad_b = dy.t().dot(&trace.low);
        let d_low = dy.dot(&self.b);
        let grad_a = d_low.t().dot(&trace.dropped);
        let mut d_branch = d_low.dot(&self.a);
        if let Some(mask) = &trace.mask {
            d_branch *= mask;
        }
        let dx = dy.dot(&self.weight) + d_branch;
        (dx, LoraGrad { a: grad_a, b: grad_b })
    }

    /// `B A`, the learned weight update.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }

    /// `W + B A`
    pub fn merged_weight(&self) -> Array2<f64> {
        &self.weight + &self.delta()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!("input width {} vs {}", x.ncols(), self.in_dim())));
        }
        Ok(())
    }
}
