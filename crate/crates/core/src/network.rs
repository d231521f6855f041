//! Inference-only network blocks: linear layers, the max-pooled set encoder,
//! the single-layer QMLP, and the folding that turns a two-layer cascade into
//! one QMLP step.
//!
//! # Folding
//!
//! Suppose iteration `i` ends with a hidden vector `u` (post-ReLU) followed by
//! a linear map `D`, and iteration `i + 1` begins with a linear map `C` applied
//! to the stacked input `[D u; x]`. Splitting `C = [A | B]` column-wise gives
//!
//! ```text
//! C [D u; x] = A D u + B x = A' u + B x,   A' = A D
//! ```
//!
//! so one `D×D` product plus a thin `D×3` product replaces two `D×D` products.
//! [`fold_cascade`] builds `(A', B)` from `(C, D)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dense::{dot, Matrix};
use crate::descriptors::LocalDescriptor;
use crate::geometry::Point3;

/// Feature width used by default.
pub const DEFAULT_FEATURE_DIM: usize = 96;
/// Input width of the first-iteration encoder (7-dim descriptors).
pub const DESCRIPTOR_DIM: usize = 7;
const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error("descriptor list is empty")]
    EmptyDescriptors,
    #[error("an MLP needs at least one layer")]
    EmptyMlp,
    #[error("group normalization with {groups} groups does not divide width {width}")]
    BadGroups { groups: usize, width: usize },
    #[error("cascade needs at least one iteration")]
    NoIterations,
}

/// `y = W v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearLayer {
    /// `weight` is `out × in`; `bias` has length `out`.
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self, NetworkError> {
        if bias.len() != weight.rows() {
            return Err(NetworkError::DimensionMismatch {
                what: "bias length",
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        if !weight.is_finite() {
            return Err(NetworkError::NonFinite("weight"));
        }
        if !bias.iter().all(|b| b.is_finite()) {
            return Err(NetworkError::NonFinite("bias"));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

pub fn linear_forward(layer: &LinearLayer, v: &[f64], relu: bool) -> Result<Vec<f64>, NetworkError> {
    if v.len() != layer.in_dim() {
        return Err(NetworkError::DimensionMismatch {
            what: "linear input",
            expected: layer.in_dim(),
            got: v.len(),
        });
    }
    let mut out = layer.weight.matvec(v);
    for (o, b) in out.iter_mut().zip(&layer.bias) {
        *o += b;
        if relu {
            *o = o.max(0.0);
        }
    }
    Ok(out)
}

/// Optional normalization between a linear map and its ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Zero-mean, unit-variance within each of `groups` equal channel groups.
    Group { groups: usize },
}

impl Normalization {
    fn apply(&self, v: &mut [f64]) {
        let Self::Group { groups } = *self else {
            return;
        };
        let width = v.len() / groups;
        for chunk in v.chunks_exact_mut(width) {
            let mean = chunk.iter().sum::<f64>() / width as f64;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            let scale = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for x in chunk {
                *x = (*x - mean) * scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub linear: LinearLayer,
    pub relu: bool,
    pub norm: Normalization,
}

impl MlpLayer {
    pub fn new(linear: LinearLayer, relu: bool) -> Self {
        Self {
            linear,
            relu,
            norm: Normalization::None,
        }
    }
}

/// A chain of linear layers, each optionally followed by normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<MlpLayer>) -> Result<Self, NetworkError> {
        if layers.is_empty() {
            return Err(NetworkError::EmptyMlp);
        }
        for pair in layers.windows(2) {
            if pair[0].linear.out_dim() != pair[1].linear.in_dim() {
                return Err(NetworkError::DimensionMismatch {
                    what: "MLP layer chain",
                    expected: pair[0].linear.out_dim(),
                    got: pair[1].linear.in_dim(),
                });
            }
        }
        for layer in &layers {
            if let Normalization::Group { groups } = layer.norm {
                let width = layer.linear.out_dim();
                if groups == 0 || width % groups != 0 {
                    return Err(NetworkError::BadGroups { groups, width });
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].linear.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].linear.out_dim()
    }

    /// Multiply-accumulates spent on one input row.
    pub fn macs_per_row(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.linear.in_dim() * l.linear.out_dim()) as u64)
            .sum()
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let mut h = v.to_vec();
        for layer in &self.layers {
            let mut next = linear_forward(&layer.linear, &h, false)?;
            layer.norm.apply(&mut next);
            if layer.relu {
                next.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            h = next;
        }
        Ok(h)
    }

    /// Runs every row of `input` through the network in one batched product per layer.
    pub fn forward_rows(&self, input: &Matrix) -> Result<Matrix, NetworkError> {
        if input.cols() != self.input_dim() {
            return Err(NetworkError::DimensionMismatch {
                what: "MLP input",
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let mut h = input.clone();
        for layer in &self.layers {
            let mut next = h.matmul_transposed(&layer.linear.weight);
            for r in 0..next.rows() {
                let row = next.row_mut(r);
                for (x, b) in row.iter_mut().zip(&layer.linear.bias) {
                    *x += b;
                }
                layer.norm.apply(row);
                if layer.relu {
                    row.iter_mut().for_each(|x| *x = x.max(0.0));
                }
            }
            h = next;
        }
        Ok(h)
    }
}

/// Coordinatewise max over the rows of `mlp(descriptors)`.
pub fn pointnet_feature(mlp: &Mlp, descs: &[LocalDescriptor]) -> Result<Vec<f64>, NetworkError> {
    if descs.is_empty() {
        return Err(NetworkError::EmptyDescriptors);
    }
    let dim = mlp.input_dim();
    let mut input = Matrix::zeros(descs.len(), dim);
    for (r, d) in descs.iter().enumerate() {
        if d.dim() != dim {
            return Err(NetworkError::DimensionMismatch {
                what: "descriptor",
                expected: dim,
                got: d.dim(),
            });
        }
        input.row_mut(r).copy_from_slice(d.as_slice());
    }
    pointnet_pool(mlp, &input)
}

/// Max-pooled encoder output for a block of descriptor rows.
pub(crate) fn pointnet_pool(mlp: &Mlp, rows: &Matrix) -> Result<Vec<f64>, NetworkError> {
    let out = mlp.forward_rows(rows)?;
    Ok(column_max(&out))
}

pub(crate) fn column_max(m: &Matrix) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; m.cols()];
    for row in m.row_iter() {
        for (b, &x) in best.iter_mut().zip(row) {
            if x > *b {
                *b = x;
            }
        }
    }
    best
}

/// One cascade step: `ReLU(A' f + B x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qmlp {
    a_prime: Matrix,
    /// `A'ᵀ`, so the forward pass can stream one input coordinate at a time.
    a_prime_t: Matrix,
    b: Matrix,
    bias: Vec<f64>,
}

impl Qmlp {
    pub fn new(a_prime: Matrix, b: Matrix, bias: Vec<f64>) -> Result<Self, NetworkError> {
        let d = a_prime.rows();
        expect_shape("A'", &a_prime, (d, d))?;
        expect_shape("B", &b, (d, 3))?;
        if bias.len() != d {
            return Err(NetworkError::DimensionMismatch {
                what: "QMLP bias",
                expected: d,
                got: bias.len(),
            });
        }
        if !a_prime.is_finite() || !b.is_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(NetworkError::NonFinite("QMLP"));
        }
        let a_prime_t = a_prime.transpose();
        Ok(Self {
            a_prime,
            a_prime_t,
            b,
            bias,
        })
    }

    /// Builds the QMLP for iteration `i + 1` from the unfolded layers `C` and `D`.
    pub fn from_unfolded(c_next: &Matrix, d_curr: &Matrix, bias: Vec<f64>) -> Result<Self, NetworkError> {
        let (a_prime, b) = fold_cascade(c_next, d_curr)?;
        Self::new(a_prime, b, bias)
    }

    pub fn a_prime(&self) -> &Matrix {
        &self.a_prime
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn dim(&self) -> usize {
        self.a_prime.rows()
    }

    pub fn macs_per_point(&self) -> u64 {
        let d = self.dim() as u64;
        d * d + 3 * d
    }
}

fn expect_shape(what: &'static str, m: &Matrix, expected: (usize, usize)) -> Result<(), NetworkError> {
    if m.shape() != expected {
        return Err(NetworkError::ShapeMismatch {
            what,
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

pub fn qmlp_forward(q: &Qmlp, f_prev: &[f64], x: &Point3) -> Result<Vec<f64>, NetworkError> {
    if f_prev.len() != q.dim() {
        return Err(NetworkError::DimensionMismatch {
            what: "QMLP feature input",
            expected: q.dim(),
            got: f_prev.len(),
        });
    }
    let mut out = vec![0.0; q.dim()];
    qmlp_kernel(q, f_prev, x, &mut out);
    Ok(out)
}

/// Row `i` of the result is `qmlp_forward(q, features.row(i), points[i])`,
/// bit for bit.
pub fn qmlp_forward_rows(q: &Qmlp, features: &Matrix, points: &[Point3]) -> Result<Matrix, NetworkError> {
    if features.cols() != q.dim() {
        return Err(NetworkError::DimensionMismatch {
            what: "QMLP feature input",
            expected: q.dim(),
            got: features.cols(),
        });
    }
    if features.rows() != points.len() {
        return Err(NetworkError::DimensionMismatch {
            what: "QMLP point count",
            expected: features.rows(),
            got: points.len(),
        });
    }
    let mut out = Matrix::zeros(features.rows(), q.dim());
    for (i, x) in points.iter().enumerate() {
        qmlp_kernel(q, features.row(i), x, out.row_mut(i));
    }
    Ok(out)
}

/// Accumulates `A' f` one input coordinate at a time. Each output still sums
/// its products in index order, so the result matches a plain dot product
/// while the inner loop runs across outputs and vectorizes.
fn qmlp_kernel(q: &Qmlp, f: &[f64], x: &Point3, out: &mut [f64]) {
    out.fill(0.0);
    for (k, &fk) in f.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(q.a_prime_t.row(k)) {
            *o += fk * a;
        }
    }
    let xs = [x.x, x.y, x.z];
    for (r, o) in out.iter_mut().enumerate() {
        *o = (*o + dot(q.b.row(r), &xs) + q.bias[r]).max(0.0);
    }
}

/// Splits `C = [A | B]` (first `D` columns, last 3) and returns `(A·D, B)`.
pub fn fold_cascade(c_next: &Matrix, d_curr: &Matrix) -> Result<(Matrix, Matrix), NetworkError> {
    let d = d_curr.rows();
    expect_shape("D", d_curr, (d, d))?;
    expect_shape("C", c_next, (d, d + 3))?;
    let a = c_next.columns(0, d);
    let b = c_next.columns(d, d + 3);
    Ok((a.matmul(d_curr), b))
}

/// Per-point features for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub iteration: usize,
    /// Multiply-accumulates spent producing these features.
    pub macs: u64,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// The first-iteration encoder followed by one QMLP per later iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeWeights {
    pub iter0: Mlp,
    pub qmlps: Vec<Qmlp>,
}

impl CascadeWeights {
    pub fn new(iter0: Mlp, qmlps: Vec<Qmlp>) -> Result<Self, NetworkError> {
        if iter0.input_dim() != DESCRIPTOR_DIM {
            return Err(NetworkError::DimensionMismatch {
                what: "first-iteration encoder input",
                expected: DESCRIPTOR_DIM,
                got: iter0.input_dim(),
            });
        }
        let d = iter0.output_dim();
        if let Some(q) = qmlps.iter().find(|q| q.dim() != d) {
            return Err(NetworkError::DimensionMismatch {
                what: "QMLP width",
                expected: d,
                got: q.dim(),
            });
        }
        Ok(Self { iter0, qmlps })
    }

    /// Random weights at the default width of 96; see [`CascadeWeights::init_random_with_dim`].
    pub fn init_random(seed: u64, iterations: usize) -> Result<Self, NetworkError> {
        Self::init_random_with_dim(seed, iterations, DEFAULT_FEATURE_DIM)
    }

    /// Seeded Glorot-uniform weights: every entry (biases included) of a layer
    /// mapping `in → out` is drawn from `[-a, a]`, `a = sqrt(6 / (in + out))`.
    /// A QMLP counts as one `(D + 3) → D` layer. The encoder is `7 → D → D`
    /// with ReLU after both layers.
    pub fn init_random_with_dim(seed: u64, iterations: usize, dim: usize) -> Result<Self, NetworkError> {
        if iterations == 0 {
            return Err(NetworkError::NoIterations);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = |rng: &mut ChaCha8Rng, rows, cols, fan: usize| {
            let a = glorot_bound(fan, rows);
            (uniform(rng, rows, cols, a), uniform(rng, rows, 1, a).into_vec())
        };
        let (w0, b0) = layer(&mut rng, dim, DESCRIPTOR_DIM, DESCRIPTOR_DIM);
        let (w1, b1) = layer(&mut rng, dim, dim, dim);
        let iter0 = Mlp::new(vec![
            MlpLayer::new(LinearLayer::new(w0, b0)?, true),
            MlpLayer::new(LinearLayer::new(w1, b1)?, true),
        ])?;
        let qmlps = (1..iterations)
            .map(|_| {
                let a = glorot_bound(dim + 3, dim);
                let ap = uniform(&mut rng, dim, dim, a);
                let b = uniform(&mut rng, dim, 3, a);
                let bias = uniform(&mut rng, dim, 1, a).into_vec();
                Qmlp::new(ap, b, bias)
            })
            .collect::<Result<_, _>>()?;
        Self::new(iter0, qmlps)
    }

    pub fn feature_dim(&self) -> usize {
        self.iter0.output_dim()
    }

    /// Number of registration iterations these weights cover.
    pub fn iterations(&self) -> usize {
        self.qmlps.len() + 1
    }
}

pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a))
}

/// Which feature extractor an operation count describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorMode {
    /// The full encoder every iteration.
    Baseline,
    /// The full encoder once, then one QMLP per later iteration.
    Cascade,
}

/// Itemized multiply-accumulate counts for the feature stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    pub mode: ExtractorMode,
    pub points: u64,
    pub neighbors: u64,
    pub iterations: u64,
    pub dim: u64,
    /// How many times the full encoder runs per point.
    pub full_extractions: u64,
    /// Encoder MACs per descriptor, summed over its layers.
    pub encoder_macs_per_descriptor: u64,
    /// Encoder terms of width `D × D` (the dominant `N·D²·K` part).
    pub encoder_square_macs: u64,
    /// Remaining encoder terms (input layer and any non-square layers).
    pub encoder_other_macs: u64,
    /// `N · D²` per cascade step.
    pub qmlp_feature_macs: u64,
    /// `N · 3D` per cascade step.
    pub qmlp_position_macs: u64,
}

impl FlopEstimate {
    /// The leading-order proxy: `N·D²·K·L` for the baseline, `N·D²·(K + L − 1)` for the cascade.
    pub fn proxy(&self) -> u64 {
        let d2 = self.dim * self.dim;
        match self.mode {
            ExtractorMode::Baseline => self.points * d2 * self.neighbors * self.iterations,
            ExtractorMode::Cascade => {
                self.points * d2 * (self.neighbors + self.iterations.saturating_sub(1))
            }
        }
    }

    /// Every counted MAC; equals the feature-stage counter of a registration run.
    pub fn total(&self) -> u64 {
        self.encoder_square_macs
            + self.encoder_other_macs
            + self.qmlp_feature_macs
            + self.qmlp_position_macs
    }
}

/// Feature-stage MACs for extracting features of `points` points over
/// `iterations` registration iterations with `neighbors` descriptors each.
pub fn flop_estimate(
    weights: &CascadeWeights,
    points: u64,
    neighbors: u64,
    iterations: u64,
    mode: ExtractorMode,
) -> FlopEstimate {
    let dim = weights.feature_dim() as u64;
    let per_desc = weights.iter0.macs_per_row();
    let square: u64 = weights
        .iter0
        .layers()
        .iter()
        .filter(|l| l.linear.in_dim() == l.linear.out_dim() && l.linear.in_dim() as u64 == dim)
        .map(|l| (l.linear.in_dim() * l.linear.out_dim()) as u64)
        .sum();
    let (full, steps) = match mode {
        ExtractorMode::Baseline => (iterations, 0),
        ExtractorMode::Cascade => (iterations.min(1), iterations.saturating_sub(1)),
    };
    FlopEstimate {
        mode,
        points,
        neighbors,
        iterations,
        dim,
        full_extractions: full,
        encoder_macs_per_descriptor: per_desc,
        encoder_square_macs: full * points * neighbors * square,
        encoder_other_macs: full * points * neighbors * (per_desc - square),
        qmlp_feature_macs: steps * points * dim * dim,
        qmlp_position_macs: steps * points * 3 * dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weight: Matrix, bias: Vec<f64>) -> LinearLayer {
        LinearLayer::new(weight, bias).unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        let l = layer(Matrix::identity(3), vec![0.0; 3]);
        assert_eq!(linear_forward(&l, &[1.0, -2.0, 3.0], false).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn relu_clamps() {
        let l = layer(Matrix::identity(2), vec![0.0; 2]);
        assert_eq!(linear_forward(&l, &[-1.0, 2.0], true).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn linear_rejects_wrong_input() {
        let l = layer(Matrix::identity(2), vec![0.0; 2]);
        assert!(matches!(
            linear_forward(&l, &[1.0], false),
            Err(NetworkError::DimensionMismatch { .. })
        ));
        assert!(LinearLayer::new(Matrix::identity(2), vec![0.0]).is_err());
        assert!(LinearLayer::new(Matrix::filled(1, 1, f64::NAN), vec![0.0]).is_err());
    }

    #[test]
    fn mlp_chain_checked() {
        let a = MlpLayer::new(layer(Matrix::zeros(4, 3), vec![0.0; 4]), true);
        let b = MlpLayer::new(layer(Matrix::zeros(2, 5), vec![0.0; 2]), true);
        assert!(Mlp::new(vec![a, b]).is_err());
        assert_eq!(Mlp::new(vec![]), Err(NetworkError::EmptyMlp));
    }

    #[test]
    fn group_norm_zero_mean_per_group() {
        let mut l = MlpLayer::new(layer(Matrix::identity(4), vec![0.0; 4]), false);
        l.norm = Normalization::Group { groups: 2 };
        let mlp = Mlp::new(vec![l.clone()]).unwrap();
        let out = mlp.forward(&[1.0, 3.0, 10.0, 20.0]).unwrap();
        assert!((out[0] + out[1]).abs() < 1e-12);
        assert!((out[2] + out[3]).abs() < 1e-12);
        assert!((out[0] + 1.0).abs() < 1e-5);
        l.norm = Normalization::Group { groups: 3 };
        assert!(matches!(Mlp::new(vec![l]), Err(NetworkError::BadGroups { .. })));
    }

    #[test]
    fn empty_descriptor_list_rejected() {
        let w = CascadeWeights::init_random_with_dim(0, 1, 8).unwrap();
        assert_eq!(pointnet_feature(&w.iter0, &[]), Err(NetworkError::EmptyDescriptors));
    }

    #[test]
    fn qmlp_identity_and_negative_bias() {
        let d = 5;
        let id = Qmlp::new(Matrix::identity(d), Matrix::zeros(d, 3), vec![0.0; d]).unwrap();
        let f = vec![0.0, 1.5, 2.0, 0.25, 7.0];
        assert_eq!(qmlp_forward(&id, &f, &Point3::new(1.0, 2.0, 3.0)).unwrap(), f);
        let neg = Qmlp::new(Matrix::identity(d), Matrix::zeros(d, 3), vec![-1.0; d]).unwrap();
        assert_eq!(
            qmlp_forward(&neg, &[0.0; 5], &Point3::new(4.0, 5.0, 6.0)).unwrap(),
            vec![0.0; 5]
        );
    }

    #[test]
    fn qmlp_shape_errors() {
        assert!(Qmlp::new(Matrix::identity(4), Matrix::zeros(4, 2), vec![0.0; 4]).is_err());
        assert!(Qmlp::new(Matrix::zeros(4, 3), Matrix::zeros(4, 3), vec![0.0; 4]).is_err());
        let q = Qmlp::new(Matrix::identity(4), Matrix::zeros(4, 3), vec![0.0; 4]).unwrap();
        assert!(qmlp_forward(&q, &[0.0; 3], &Point3::zeros()).is_err());
    }

    #[test]
    fn fold_with_identities() {
        let d = 4;
        let c = Matrix::from_fn(d, d + 3, |i, j| if j < d { (i == j) as u8 as f64 } else { (i + j) as f64 });
        let (ap, b) = fold_cascade(&c, &Matrix::identity(d)).unwrap();
        assert_eq!(ap, Matrix::identity(d));
        assert_eq!(b, c.columns(d, d + 3));
    }

    #[test]
    fn fold_with_zero_d() {
        let d = 4;
        let c = Matrix::from_fn(d, d + 3, |i, j| (i * 7 + j) as f64 - 10.0);
        let (ap, b) = fold_cascade(&c, &Matrix::zeros(d, d)).unwrap();
        assert_eq!(ap, Matrix::zeros(d, d));
        let q = Qmlp::new(ap, b.clone(), vec![0.0; d]).unwrap();
        let x = Point3::new(0.1, -0.2, 0.3);
        let out1 = qmlp_forward(&q, &[1.0, 2.0, 3.0, 4.0], &x).unwrap();
        let out2 = qmlp_forward(&q, &[9.0, 0.0, 5.0, 1.0], &x).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn fold_rejects_wrong_shapes() {
        assert!(matches!(
            fold_cascade(&Matrix::zeros(4, 6), &Matrix::identity(4)),
            Err(NetworkError::ShapeMismatch { what: "C", .. })
        ));
        assert!(fold_cascade(&Matrix::zeros(4, 7), &Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn init_random_is_deterministic_and_sized() {
        let a = CascadeWeights::init_random(42, 5).unwrap();
        let b = CascadeWeights::init_random(42, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.qmlps.len(), 4);
        assert_eq!(a.feature_dim(), 96);
        assert_ne!(a, CascadeWeights::init_random(43, 5).unwrap());
        assert_eq!(CascadeWeights::init_random(1, 0), Err(NetworkError::NoIterations));
    }

    #[test]
    fn flop_example_values() {
        let w = CascadeWeights::init_random(0, 5).unwrap();
        let base = flop_estimate(&w, 1, 64, 5, ExtractorMode::Baseline);
        let casc = flop_estimate(&w, 1, 64, 5, ExtractorMode::Cascade);
        assert_eq!(base.proxy(), 2_949_120);
        assert_eq!(casc.proxy(), 626_688);
        let ratio = base.proxy() as f64 / casc.proxy() as f64;
        assert!((ratio - 4.7).abs() < 0.01, "{ratio}");
        assert_eq!(base.total(), 5 * 64 * (7 * 96 + 96 * 96));
        assert_eq!(casc.total(), 64 * (7 * 96 + 96 * 96) + 4 * (96 * 96 + 3 * 96));
    }

    #[test]
    fn flop_single_iteration_modes_agree() {
        let w = CascadeWeights::init_random(0, 1).unwrap();
        let base = flop_estimate(&w, 10, 64, 1, ExtractorMode::Baseline);
        let casc = flop_estimate(&w, 10, 64, 1, ExtractorMode::Cascade);
        assert_eq!(base.total(), casc.total());
        assert_eq!(base.proxy(), casc.proxy());
    }

    #[test]
    fn flop_linear_in_points() {
        let w = CascadeWeights::init_random(0, 5).unwrap();
        for mode in [ExtractorMode::Baseline, ExtractorMode::Cascade] {
            let one = flop_estimate(&w, 1, 32, 5, mode).total();
            assert_eq!(flop_estimate(&w, 37, 32, 5, mode).total(), 37 * one);
        }
    }
}
