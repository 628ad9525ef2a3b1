//! Similarity maps, tempered softmax, and the two training objectives.
//!
//! Both losses are cross-entropies `CE(P, T) = -Σ P log T` averaged over
//! source rows, with `P` the target distribution and `T` the tempered
//! softmax of the student similarity row. The gradient of such a row loss
//! with respect to the student logits is `(T - P) / (tau * rows)`.

use ndarray::{Array2, Array3, Axis};

use crate::domain::{bilinear_weights, FeatureMap, SimilarityMap};
use crate::error::{Error, Result};
use crate::util::{log_softmax_rows, normalize_rows, normalize_rows_backward, softmax_rows};

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_KERNEL_SIZE: usize = 7;
pub const DEFAULT_POINTS_PER_PAIR: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperedSoftmax {
    tau: f64,
}

impl Default for TemperedSoftmax {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl TemperedSoftmax {
    pub fn new(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn apply(&self, s: &SimilarityMap) -> Array2<f64> {
        softmax_rows(s.data.view(), self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTau(tau))
    }
}

/// Gaussian target distributions for `N` points, plus the source locations
/// (continuous grid coordinates `(gy, gx)`) whose predicted rows they supervise.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub targets: Array3<f64>,
    pub source_points: Vec<(f64, f64)>,
    pub kernel_size: usize,
}

impl CorrespondenceMap {
    pub fn len(&self) -> usize {
        self.targets.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.targets.dim();
        (h, w)
    }

    pub fn with_source_points(mut self, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != self.len() {
            return Err(Error::LengthMismatch(points.len(), self.len()));
        }
        self.source_points = points;
        Ok(self)
    }

    /// Targets flattened to `N x (H*W)` in row-major cell order.
    pub fn target_rows(&self) -> Array2<f64> {
        let (n, h, w) = self.targets.dim();
        self.targets.to_shape((n, h * w)).expect("contiguous").to_owned()
    }
}

/// `S[i, j] = <Fa_i, Fb_j>` over row-major flattened cells.
pub fn similarity_map(fa: &FeatureMap, fb: &FeatureMap) -> Result<SimilarityMap> {
    if !fa.is_normalized() || !fb.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if fa.dim() != fb.dim() {
        return Err(Error::ShapeMismatch(format!("descriptor widths {} vs {}", fa.dim(), fb.dim())));
    }
    let data = fa.to_matrix().dot(&fb.to_matrix().t());
    SimilarityMap::new(data, fa.grid(), fb.grid())
}

pub fn tempered_softmax(s: &SimilarityMap, tau: f64) -> Result<Array2<f64>> {
    Ok(TemperedSoftmax::new(tau)?.apply(s))
}

/// Mean row cross-entropy of `P` against `log T`, and `dL/dlogits`.
fn row_ce(p: &Array2<f64>, logits: &Array2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let log_t = log_softmax_rows(logits.view(), tau);
    let rows = p.nrows() as f64;
    let total: f64 = p.iter().zip(log_t.iter()).map(|(p, lt)| if *p > 0.0 { -p * lt } else { 0.0 }).sum();
    let grad = (log_t.mapv(f64::exp) - p) / (tau * rows);
    (total / rows, grad)
}

/// Distillation loss `CE(σ(S_teacher), σ(S_student))` averaged over rows.
pub fn distill_loss(teacher: &SimilarityMap, student: &SimilarityMap, tau: f64) -> Result<f64> {
    distill_loss_grad(teacher, student, tau).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the student similarity entries.
pub fn distill_loss_grad(teacher: &SimilarityMap, student: &SimilarityMap, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    if teacher.data.dim() != student.data.dim() {
        return Err(Error::ShapeMismatch(format!("teacher {:?} vs student {:?}", teacher.data.dim(), student.data.dim())));
    }
    let p = softmax_rows(teacher.data.view(), tau);
    Ok(row_ce(&p, &student.data, tau))
}

/// Cosine similarity between two sets of raw (unnormalized) student rows,
/// keeping what is needed to backpropagate into the raw rows.
#[derive(Debug, Clone)]
pub struct RawSimilarity {
    pub unit_a: Array2<f64>,
    pub unit_b: Array2<f64>,
    norms_a: ndarray::Array1<f64>,
    norms_b: ndarray::Array1<f64>,
}

impl RawSimilarity {
    pub fn new(xa: &Array2<f64>, xb: &Array2<f64>) -> Result<Self> {
        if xa.ncols() != xb.ncols() {
            return Err(Error::ShapeMismatch(format!("descriptor widths {} vs {}", xa.ncols(), xb.ncols())));
        }
        let (unit_a, norms_a) = normalize_rows(xa.view())?;
        let (unit_b, norms_b) = normalize_rows(xb.view())?;
        Ok(Self { unit_a, unit_b, norms_a, norms_b })
    }

    pub fn matrix(&self) -> Array2<f64> {
        self.unit_a.dot(&self.unit_b.t())
    }

    /// Maps `dL/dS` to `(dL/dXa, dL/dXb)`.
    pub fn backward(&self, d_s: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d_ua = d_s.dot(&self.unit_b);
        let d_ub = d_s.t().dot(&self.unit_a);
        (
            normalize_rows_backward(&self.unit_a, &self.norms_a, &d_ua),
            normalize_rows_backward(&self.unit_b, &self.norms_b, &d_ub),
        )
    }
}

/// Distillation loss of raw student rows against a teacher similarity map,
/// with gradients for both raw inputs.
pub fn distill_loss_raw(teacher: &SimilarityMap, xa: &Array2<f64>, xb: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let sim = RawSimilarity::new(xa, xb)?;
    let student = SimilarityMap::new(sim.matrix(), teacher.source_grid, teacher.target_grid)?;
    let (loss, d_s) = distill_loss_grad(teacher, &student, tau)?;
    let (da, db) = sim.backward(&d_s);
    Ok((loss, da, db))
}

/// One `k x k` Gaussian (std `k / 4`) per target cell `(row, col)`, cropped
/// to the grid and renormalized.
pub fn gaussian_targets(points: &[(i64, i64)], k: usize, grid: (usize, usize)) -> Result<CorrespondenceMap> {
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    let (h, w) = grid;
    let half = (k / 2) as i64;
    let sigma = k as f64 / 4.0;
    let mut targets = Array3::zeros((points.len(), h, w));
    for (n, &(r, c)) in points.iter().enumerate() {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            return Err(Error::OutOfGrid { row: r, col: c, rows: h, cols: w });
        }
        let mut slice = targets.index_axis_mut(Axis(0), n);
        let mut total = 0.0;
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                slice[[rr as usize, cc as usize]] = v;
                total += v;
            }
        }
        slice /= total;
    }
    Ok(CorrespondenceMap { targets, source_points: Vec::new(), kernel_size: k })
}

/// Fine-tuning loss on already-gathered similarity rows (`N x H*W`, one
/// row per source point), against the Gaussian targets of `g`.
pub fn correspondence_loss(logits: &Array2<f64>, g: &CorrespondenceMap, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let p = g.target_rows();
    if p.dim() != logits.dim() {
        return Err(Error::ShapeMismatch(format!("targets {:?} vs similarity rows {:?}", p.dim(), logits.dim())));
    }
    Ok(row_ce(&p, logits, tau).0)
}

/// Bilinear gather of unit rows at continuous grid points, renormalized.
struct Gathered {
    unit: Array2<f64>,
    norms: ndarray::Array1<f64>,
    taps: Vec<([f64; 4], [usize; 4])>,
}

fn gather(unit_rows: &Array2<f64>, grid: (usize, usize), points: &[(f64, f64)]) -> Result<Gathered> {
    let mut raw = Array2::zeros((points.len(), unit_rows.ncols()));
    let mut taps = Vec::with_capacity(points.len());
    for (i, &(gy, gx)) in points.iter().enumerate() {
        let (wts, cells) = bilinear_weights(gy, gx, grid);
        let idx = cells.map(|(r, c)| r * grid.1 + c);
        let mut row = raw.row_mut(i);
        for (wt, j) in wts.iter().zip(idx) {
            row.scaled_add(*wt, &unit_rows.row(j));
        }
        taps.push((wts, idx));
    }
    let (unit, norms) = normalize_rows(raw.view()).map_err(|_| Error::DegenerateFeatures)?;
    Ok(Gathered { unit, norms, taps })
}

/// Fine-tuning loss on normalized maps: rows of `F1` are gathered at
/// `g.source_points`, compared to all of `F2`, and scored against `g`.
pub fn finetune_loss(f1: &FeatureMap, f2: &FeatureMap, g: &CorrespondenceMap, tau: f64) -> Result<f64> {
    if !f1.is_normalized() || !f2.is_normalized() {
        return Err(Error::NotNormalized);
    }
    finetune_loss_raw(&f1.to_matrix(), f1.grid(), &f2.to_matrix(), f2.grid(), g, tau).map(|(l, _, _)| l)
}

/// Fine-tuning loss from raw rows (`Ha*Wa x D`, `Hb*Wb x D`), with gradients.
pub fn finetune_loss_raw(
    x1: &Array2<f64>,
    grid1: (usize, usize),
    x2: &Array2<f64>,
    grid2: (usize, usize),
    g: &CorrespondenceMap,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_tau(tau)?;
    if g.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    if g.grid() != grid2 {
        return Err(Error::ShapeMismatch(format!("target grid {:?} vs feature grid {:?}", g.grid(), grid2)));
    }
    if g.source_points.len() != g.len() {
        return Err(Error::ShapeMismatch(format!("{} source points for {} targets", g.source_points.len(), g.len())));
    }
    if x1.nrows() != grid1.0 * grid1.1 || x2.nrows() != grid2.0 * grid2.1 || x1.ncols() != x2.ncols() {
        return Err(Error::ShapeMismatch("feature rows disagree with grids".into()));
    }
    let (u1, n1) = normalize_rows(x1.view())?;
    let (u2, n2) = normalize_rows(x2.view())?;
    let gathered = gather(&u1, grid1, &g.source_points)?;
    let logits = gathered.unit.dot(&u2.t());
    let (loss, d_s) = row_ce(&g.target_rows(), &logits, tau);
    let d_u2 = d_s.t().dot(&gathered.unit);
    let d_unit = d_s.dot(&u2);
    let d_raw = normalize_rows_backward(&gathered.unit, &gathered.norms, &d_unit);
    let mut d_u1 = Array2::zeros(u1.dim());
    for (i, (wts, idx)) in gathered.taps.iter().enumerate() {
        for (wt, j) in wts.iter().zip(idx) {
            d_u1.row_mut(*j).scaled_add(*wt, &d_raw.row(i));
        }
    }
    Ok((loss, normalize_rows_backward(&u1, &n1, &d_u1), normalize_rows_backward(&u2, &n2, &d_u2)))
}
