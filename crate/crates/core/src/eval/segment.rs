//! Unsupervised foreground masks from 2-means over descriptors.

use ndarray::{Array1, Array2};

use crate::domain::{image_to_cell, FeatureMap};
use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn farthest(x: &Array2<f64>, from: &Array1<f64>) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (i, row) in x.rows().into_iter().enumerate() {
        let d = sq_dist(&row.to_owned(), from);
        if d > best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's 2-means. Seeds are the point farthest from the mean and the point
/// farthest from that, which depends only on distances.
pub fn two_means(x: &Array2<f64>) -> Result<Vec<bool>> {
    let mean = x.mean_axis(ndarray::Axis(0)).ok_or(Error::EmptyList("feature map"))?;
    let (a, spread) = farthest(x, &mean);
    if spread <= 1e-18 {
        return Err(Error::DegenerateFeatures);
    }
    let mut c0 = x.row(a).to_owned();
    let (b, _) = farthest(x, &c0);
    let mut c1 = x.row(b).to_owned();
    let mut assign = vec![false; x.nrows()];
    for iter in 0..MAX_ITERS {
        let next: Vec<bool> = x.rows().into_iter().map(|r| sq_dist(&r.to_owned(), &c1) < sq_dist(&r.to_owned(), &c0)).collect();
        if iter > 0 && next == assign {
            break;
        }
        assign = next;
        let centroid = |want: bool, old: &Array1<f64>| {
            let idx: Vec<usize> = (0..x.nrows()).filter(|i| assign[*i] == want).collect();
            if idx.is_empty() {
                old.clone()
            } else {
                idx.iter().fold(Array1::zeros(x.ncols()), |acc, i| acc + x.row(*i)) / idx.len() as f64
            }
        };
        c0 = centroid(false, &c0);
        c1 = centroid(true, &c1);
    }
    Ok(assign)
}

/// Boolean foreground mask at image resolution. The cluster holding most of
/// the grid's border cells is background (the larger cluster on a tie).
pub fn foreground_segmentation(fm: &FeatureMap) -> Result<Array2<bool>> {
    if fm.is_empty() {
        return Err(Error::EmptyList("feature map"));
    }
    let (gh, gw) = fm.grid();
    let assign = two_means(&fm.to_matrix())?;
    let (mut border_true, mut border_total) = (0usize, 0usize);
    for r in 0..gh {
        for c in 0..gw {
            if r == 0 || c == 0 || r == gh - 1 || c == gw - 1 {
                border_total += 1;
                border_true += usize::from(assign[r * gw + c]);
            }
        }
    }
    let ones = assign.iter().filter(|a| **a).count();
    let background = match (2 * border_true).cmp(&border_total) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => 2 * ones > assign.len(),
    };
    let (h, w) = fm.image_size();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (r, c) = image_to_cell(x as f64, y as f64, (h, w), (gh, gw));
        assign[r * gw + c] != background
    }))
}
