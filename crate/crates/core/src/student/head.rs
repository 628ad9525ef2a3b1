//! Two-layer per-location head: `out = x + W2 · drop(gelu(W1 x + b1)) + b2`.
//!
//! The second layer starts at zero, which makes the whole head the identity
//! at attach time. When the output width differs from the input width the
//! residual is dropped and the second layer is randomly initialised instead.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::gaussian_matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `width x in`
    pub w1: Array2<f64>,
    /// `1 x width`
    pub b1: Array2<f64>,
    /// `out x width`
    pub w2: Array2<f64>,
    /// `1 x out`
    pub b2: Array2<f64>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Array2<f64>,
    pre: Array2<f64>,
    dropped: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl LinearHead {
    pub fn new(in_dim: usize, width: usize, out_dim: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if in_dim == 0 || width == 0 || out_dim == 0 {
            return Err(Error::ConfigInvalid("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::ConfigInvalid(format!("dropout {dropout_rate} must be in [0, 1)")));
        }
        let w1 = gaussian_matrix(width, in_dim, 1.0 / (in_dim as f64).sqrt(), rng);
        let w2 = if out_dim == in_dim {
            Array2::zeros((out_dim, width))
        } else {
            gaussian_matrix(out_dim, width, 1.0 / (width as f64).sqrt(), rng)
        };
        Ok(Self { w1, b1: Array2::zeros((1, width)), w2, b2: Array2::zeros((1, out_dim)), dropout_rate })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn residual(&self) -> bool {
        self.in_dim() == self.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_traced(x, None).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, x: &Array2<f64>, rng: Option<&mut ChaCha8Rng>) -> Result<(Array2<f64>, HeadTrace)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!("head input width {} vs {}", x.ncols(), self.in_dim())));
        }
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let act = pre.mapv(gelu);
        let (dropped, mask) = match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let mask = Array2::from_shape_simple_fn(act.dim(), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                (&act * &mask, Some(mask))
            }
            _ => (act, None),
        };
        let mut y = dropped.dot(&self.w2.t()) + &self.b2;
        if self.residual() {
            y += x;
        }
        Ok((y, HeadTrace { input: x.clone(), pre, dropped, mask }))
    }

    pub fn backward(&self, trace: &HeadTrace, dy: &Array2<f64>) -> (Array2<f64>, HeadGrad) {
        let w2 = dy.t().dot(&trace.dropped);
        let b2 = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut d_act = dy.dot(&self.w2);
        if let Some(mask) = &trace.mask {
            d_act *= mask;
        }
        let d_pre = d_act * &trace.pre.mapv(gelu_grad);
        let w1 = d_pre.t().dot(&trace.input);
        let b1 = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dx = d_pre.dot(&self.w1);
        if self.residual() {
            dx += dy;
        }
        (dx, HeadGrad { w1, b1, w2, b2 })
    }
}
