//! Small numeric and seeding helpers.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::domain::MIN_DESCRIPTOR_NORM;
use crate::error::{Error, Result};

/// Stable 64-bit seed derived from a list of string parts.
pub fn seed_from(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn rng_from(parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_from(parts))
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Row-wise L2 normalization; returns the unit rows and the original norms.
pub fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| *n < MIN_DESCRIPTOR_NORM) {
        return Err(Error::ZeroDescriptor { row: i, col: 0 });
    }
    let mut out = x.to_owned();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= *n;
    }
    Ok((out, norms))
}

/// Gradient of a scalar through `y = x / |x|` applied row-wise.
pub fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    Zip::from(out.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, n| {
            let proj = g.dot(&u);
            g.scaled_add(-proj, &u);
            g /= *n;
        });
    out
}

/// Row-wise softmax of `x / tau`, computed with max subtraction.
pub fn softmax_rows(x: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| ((v - m) / tau).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise log-softmax of `x / tau`.
pub fn log_softmax_rows(x: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = row.iter().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| (v - m) / tau - lse);
    }
    out
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0f64, |acc, x, y| acc.max((x - y).abs()))
}
