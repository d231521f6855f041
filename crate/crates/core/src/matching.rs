//! Soft correspondence: feature distances, the annealed similarity
//! `m_ij = exp(-β (d_ij² − α))`, Sinkhorn normalization, and the weighted
//! targets handed to Procrustes.
//!
//! Both Sinkhorn variants alternate a column pass (normalize over `i`) and a
//! row pass (normalize over `j`). With a slack row and column, the column pass
//! touches only the inner columns (dividing by sums that include the slack
//! row) and the row pass only the inner rows (sums include the slack column);
//! the slack row and column themselves are never forced to sum to one.

use thiserror::Error;

use crate::dense::Matrix;
use crate::geometry::{Point3, PointCloud};
use crate::network::FeatureSet;

/// Similarities are floored here so no row or column sum reaches zero.
pub const SIMILARITY_FLOOR: f64 = 1e-300;
const ZERO_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{axis} {index} sums to {sum}, cannot normalize")]
    DegenerateSum {
        axis: &'static str,
        index: usize,
        sum: f64,
    },
    #[error("correspondence matrix has {rows} inner rows x {cols} inner columns, expected {want_rows} x {want_cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("annealing parameters invalid: alpha = {alpha}, beta = {beta}")]
    InvalidParams { alpha: f64, beta: f64 },
}

/// Euclidean distances between two feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Matrix);

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    /// Median over rows of the smallest entry in each row.
    pub fn median_row_min(&self) -> f64 {
        let mut mins: Vec<f64> = self
            .0
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        if mins.is_empty() {
            return 0.0;
        }
        let mid = mins.len() / 2;
        let (_, m, _) = mins.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealingParams {
    pub alpha: f64,
    pub beta: f64,
}

impl AnnealingParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, MatchingError> {
        if !(alpha >= 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(MatchingError::InvalidParams { alpha, beta });
        }
        Ok(Self { alpha, beta })
    }
}

/// Nonnegative match strengths, optionally with one trailing slack row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    pub values: Matrix,
    pub slack: bool,
}

impl CorrespondenceMatrix {
    pub fn new(values: Matrix, slack: bool) -> Self {
        Self { values, slack }
    }

    pub fn inner_rows(&self) -> usize {
        self.values.rows() - self.slack as usize
    }

    pub fn inner_cols(&self) -> usize {
        self.values.cols() - self.slack as usize
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.values.cols()];
        for row in self.values.row_iter() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
}

/// `d_ij = ‖a_i − b_j‖` via `‖a‖² + ‖b‖² − 2 a·b`, clamped at zero.
pub fn pairwise_distances(fx: &FeatureSet, fy: &FeatureSet) -> Result<DistanceMatrix, MatchingError> {
    pairwise_distances_raw(&fx.features, &fy.features)
}

pub fn pairwise_distances_raw(a: &Matrix, b: &Matrix) -> Result<DistanceMatrix, MatchingError> {
    if a.cols() != b.cols() {
        return Err(MatchingError::DimensionMismatch(a.cols(), b.cols()));
    }
    let na: Vec<f64> = a.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut g = a.matmul_transposed(b);
    for (i, &ni) in na.iter().enumerate() {
        let row = g.row_mut(i);
        for (v, &nj) in row.iter_mut().zip(&nb) {
            *v = (ni + nj - 2.0 * *v).max(0.0).sqrt();
        }
    }
    Ok(DistanceMatrix(g))
}

/// Log-domain similarities `-β (d² − α)`; slack entries are 0.
pub fn similarity_logits(d: &DistanceMatrix, p: AnnealingParams, slack: bool) -> Matrix {
    let (n, m) = (d.rows(), d.cols());
    let extra = slack as usize;
    let mut out = Matrix::zeros(n + extra, m + extra);
    for i in 0..n {
        let src = d.0.row(i);
        let dst = &mut out.row_mut(i)[..m];
        for (o, &dij) in dst.iter_mut().zip(src) {
            *o = -p.beta * (dij * dij - p.alpha);
        }
    }
    out
}

/// `m_ij = exp(-β (d_ij² − α))` floored at [`SIMILARITY_FLOOR`]; slack entries are 1.
pub fn similarity_matrix(d: &DistanceMatrix, p: AnnealingParams, slack: bool) -> CorrespondenceMatrix {
    let (n, m) = (d.rows(), d.cols());
    let extra = slack as usize;
    let mut values = Matrix::filled(n + extra, m + extra, 1.0);
    for i in 0..n {
        let src = d.0.row(i);
        for (o, &dij) in values.row_mut(i)[..m].iter_mut().zip(src) {
            *o = (-p.beta * (dij * dij - p.alpha)).exp().max(SIMILARITY_FLOOR);
        }
    }
    CorrespondenceMatrix { values, slack }
}

/// `l` rounds of column-then-row division by sums.
pub fn sinkhorn_standard(m: &CorrespondenceMatrix, l: usize) -> Result<CorrespondenceMatrix, MatchingError> {
    let mut out = m.clone();
    sinkhorn_standard_in_place(&mut out, l)?;
    Ok(out)
}

pub fn sinkhorn_standard_in_place(m: &mut CorrespondenceMatrix, l: usize) -> Result<(), MatchingError> {
    let inner_rows = m.inner_rows();
    let inner_cols = m.inner_cols();
    let cols = m.values.cols();
    let mut sums = vec![0.0; cols];
    for _ in 0..l {
        sums.fill(0.0);
        for row in m.values.row_iter() {
            for (s, v) in sums[..inner_cols].iter_mut().zip(row) {
                *s += v;
            }
        }
        for (j, s) in sums[..inner_cols].iter_mut().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(MatchingError::DegenerateSum {
                    axis: "column",
                    index: j,
                    sum: *s,
                });
            }
            *s = 1.0 / *s;
        }
        let values = m.values.as_mut_slice();
        for row in values.chunks_exact_mut(cols) {
            for (v, s) in row[..inner_cols].iter_mut().zip(&sums) {
                *v *= s;
            }
        }
        for (i, row) in values.chunks_exact_mut(cols).take(inner_rows).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(MatchingError::DegenerateSum {
                    axis: "row",
                    index: i,
                    sum: s,
                });
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(())
}

/// Log-domain Sinkhorn: `l` rounds of subtracting the column then row
/// log-sum-exp, followed by an elementwise `exp`.
pub fn sinkhorn_log(logits: &Matrix, slack: bool, l: usize) -> CorrespondenceMatrix {
    let mut d = logits.clone();
    let rows = d.rows();
    let cols = d.cols();
    let inner_rows = rows - slack as usize;
    let inner_cols = cols - slack as usize;
    let mut maxes = vec![0.0; cols];
    let mut sums = vec![0.0; cols];
    for _ in 0..l {
        maxes.fill(f64::NEG_INFINITY);
        for row in d.row_iter() {
            for (mx, &v) in maxes[..inner_cols].iter_mut().zip(row) {
                *mx = f64::max(*mx, v);
            }
        }
        sums.fill(0.0);
        for row in d.row_iter() {
            for ((s, mx), &v) in sums[..inner_cols].iter_mut().zip(&maxes).zip(row) {
                *s += (v - mx).exp();
            }
        }
        for (s, mx) in sums[..inner_cols].iter_mut().zip(&maxes) {
            *s = mx + s.ln();
        }
        let data = d.as_mut_slice();
        for row in data.chunks_exact_mut(cols) {
            for (v, lse) in row[..inner_cols].iter_mut().zip(&sums) {
                *v -= lse;
            }
        }
        for row in data.chunks_exact_mut(cols).take(inner_rows) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
    }
    for v in d.as_mut_slice() {
        *v = v.exp();
    }
    CorrespondenceMatrix { values: d, slack }
}

/// Sinkhorn rounds for 1-based registration iteration `i`: `min(i, cap)`.
pub fn adaptive_sinkhorn_iters(registration_iter: usize, cap: usize) -> usize {
    registration_iter.min(cap)
}

/// Per-source-point weighted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCorrespondences {
    pub targets: Vec<Point3>,
    pub weights: Vec<f64>,
}

/// `w_i = Σ_j m_ij` over inner columns, `target_i = Σ_j m_ij y_j / w_i`
/// (the origin with weight 0 when `w_i < 1e-12`).
pub fn soft_correspondences(
    m: &CorrespondenceMatrix,
    reference: &PointCloud,
) -> Result<SoftCorrespondences, MatchingError> {
    let ys = reference.points();
    if m.inner_cols() != ys.len() {
        return Err(MatchingError::ShapeMismatch {
            rows: m.inner_rows(),
            cols: m.inner_cols(),
            want_rows: m.inner_rows(),
            want_cols: ys.len(),
        });
    }
    let n = m.inner_rows();
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let row = &m.values.row(i)[..ys.len()];
        let mut w = 0.0;
        let mut acc = Point3::zeros();
        for (mij, y) in row.iter().zip(ys) {
            w += mij;
            acc += y * *mij;
        }
        if w < ZERO_WEIGHT {
            targets.push(Point3::zeros());
            weights.push(0.0);
        } else {
            targets.push(acc / w);
            weights.push(w);
        }
    }
    Ok(SoftCorrespondences { targets, weights })
}
