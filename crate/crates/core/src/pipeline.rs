//! The iterative registration loop.
//!
//! Each iteration extracts per-point features for both clouds, builds the
//! annealed similarity matrix, normalizes it with Sinkhorn, fits a weighted
//! Procrustes transform to the soft targets and moves the source cloud.
//!
//! Three feature backends are available:
//!
//! * [`FeatureMode::Baseline`] runs the full max-pooled encoder every iteration.
//! * [`FeatureMode::Cascade`] runs it once and then one QMLP per iteration,
//!   feeding the previous features and the current point positions.
//! * [`FeatureMode::Handcrafted`] max-pools the raw 7-dim descriptors. It
//!   needs no weights and exists so the loop can be checked end to end.
//!
//! The annealing schedule is fixed before the loop starts. Its `β` values are
//! relative: at iteration 1 the median nearest-neighbor feature distance `m`
//! is measured and the similarity uses `d² / m²`, so `alpha0 = 0.1` means a
//! threshold of `0.1 · m²` in raw squared distance.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::weighted_procrustes;
use crate::dense::Matrix;
use crate::descriptors::{estimate_normals, write_descriptor, DescriptorVariant};
use crate::error::Result;
use crate::geometry::{apply_transform, compose, PointCloud, RigidTransform};
use crate::knn::{NeighborIndex, Strategy};
use crate::matching::{
    adaptive_sinkhorn_iters, pairwise_distances, similarity_logits, similarity_matrix, sinkhorn_log,
    sinkhorn_standard_in_place, soft_correspondences, AnnealingParams, DistanceMatrix,
};
use crate::network::{
    column_max, pointnet_pool, qmlp_forward_rows, CascadeWeights, FeatureSet, Qmlp, DEFAULT_FEATURE_DIM,
    DESCRIPTOR_DIM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{cloud} cloud has {points} points, fewer than K = {k}")]
    TooFewPoints {
        cloud: &'static str,
        points: usize,
        k: usize,
    },
    #[error("mode {0:?} needs network weights")]
    MissingWeights(FeatureMode),
    #[error("weights do not fit the configuration: {0}")]
    WeightsMismatch(String),
    #[error("non-finite {stage} at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        stage: &'static str,
    },
    #[error("feature set has {features} rows but the cloud has {points} points")]
    SizeMismatch { features: usize, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Baseline,
    Cascade,
    Handcrafted,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Cascade => "cascade",
            Self::Handcrafted => "handcrafted",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "cascade" => Ok(Self::Cascade),
            "handcrafted" => Ok(Self::Handcrafted),
            other => Err(format!("unknown mode `{other}` (baseline|cascade|handcrafted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkhornPolicy {
    /// The same number of rounds every iteration.
    Fixed(usize),
    /// `min(i, cap)` rounds at 1-based iteration `i`.
    Adaptive { cap: usize },
}

impl SinkhornPolicy {
    pub fn rounds(self, iteration: usize) -> usize {
        match self {
            Self::Fixed(l) => l,
            Self::Adaptive { cap } => adaptive_sinkhorn_iters(iteration, cap),
        }
    }
}

impl std::str::FromStr for SinkhornPolicy {
    type Err = String;
    /// `fixed:N` or `adaptive:N`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| format!("expected fixed:N or adaptive:N, got `{s}`"))?;
        let n: usize = n.parse().map_err(|_| format!("bad count in `{s}`"))?;
        match kind {
            "fixed" => Ok(Self::Fixed(n)),
            "adaptive" => Ok(Self::Adaptive { cap: n }),
            _ => Err(format!("expected fixed:N or adaptive:N, got `{s}`")),
        }
    }
}

/// Which Sinkhorn routine the loop calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornImpl {
    /// Exponentiate once, then divide by sums.
    #[default]
    Standard,
    /// Log-sum-exp passes, exponentiate at the end.
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Registration iterations `L`.
    pub iterations: usize,
    /// Neighbors per point for descriptors, `K`.
    pub neighbors: usize,
    /// Feature width `D`.
    pub feature_dim: usize,
    pub mode: FeatureMode,
    pub slack: bool,
    pub sinkhorn: SinkhornPolicy,
    pub sinkhorn_impl: SinkhornImpl,
    /// Threshold in units of the iteration-1 median squared feature distance.
    pub alpha0: f64,
    pub beta0: f64,
    pub beta_growth: f64,
    /// Neighbors used for normal estimation when a cloud has no normals.
    pub normal_neighbors: usize,
    pub knn_strategy: Strategy,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            neighbors: 64,
            feature_dim: DEFAULT_FEATURE_DIM,
            mode: FeatureMode::Cascade,
            slack: true,
            sinkhorn: SinkhornPolicy::Adaptive { cap: 5 },
            sinkhorn_impl: SinkhornImpl::Standard,
            alpha0: 0.1,
            beta0: 1.0,
            beta_growth: 2.0,
            normal_neighbors: 16,
            knn_strategy: Strategy::Auto,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> std::result::Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 = {} must be positive", self.beta0));
        }
        if !(self.beta_growth >= 1.0 && self.beta_growth.is_finite()) {
            return bad(format!("beta_growth = {} must be >= 1", self.beta_growth));
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 = {} must be >= 0", self.alpha0));
        }
        if self.normal_neighbors < 3 {
            return bad("normal_neighbors must be at least 3".into());
        }
        Ok(())
    }
}

/// Relative annealing parameters for every iteration, fixed before the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    pub params: Vec<AnnealingParams>,
}

impl AnnealingSchedule {
    /// Converts to raw squared-distance units for a measured feature scale `m²`.
    pub fn resolve(&self, scale_sq: f64) -> Vec<AnnealingParams> {
        self.params
            .iter()
            .map(|p| AnnealingParams {
                alpha: p.alpha * scale_sq,
                beta: p.beta / scale_sq,
            })
            .collect()
    }
}

/// `β_i = β₀ · growth^(i−1)`, `α_i = α₀` for `i = 1..=L`.
pub fn make_schedule(cfg: &RegistrationConfig) -> Result<AnnealingSchedule> {
    cfg.validate()?;
    let params = (0..cfg.iterations)
        .map(|i| AnnealingParams::new(cfg.alpha0, cfg.beta0 * cfg.beta_growth.powi(i as i32)))
        .collect::<std::result::Result<_, _>>()?;
    Ok(AnnealingSchedule { params })
}

/// A cloud with normals and its fixed K-NN lists. Neighbor sets do not change
/// under rigid motion, so they are computed once per registration.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub neighbors: Vec<Vec<usize>>,
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, cfg: &RegistrationConfig) -> Result<Self> {
        let n = cloud.len();
        let cloud = if cloud.has_normals() {
            cloud.clone()
        } else {
            let k = cfg.normal_neighbors.min(n);
            estimate_normals(cloud, k)?
        };
        let index = NeighborIndex::build(&cloud, cfg.knn_strategy)?;
        let neighbors = index.knn_all(cfg.neighbors)?;
        Ok(Self { cloud, neighbors })
    }

    fn moved(&self, t: &RigidTransform) -> Self {
        Self {
            cloud: apply_transform(t, &self.cloud),
            neighbors: self.neighbors.clone(),
        }
    }
}

fn descriptor_block(prepared: &PreparedCloud, i: usize, block: &mut Matrix) {
    let points = prepared.cloud.points();
    let normals = prepared.cloud.normals().expect("prepared clouds carry normals");
    for (r, &j) in prepared.neighbors[i].iter().enumerate() {
        write_descriptor(
            &points[i],
            &normals[i],
            &points[j],
            &normals[j],
            DescriptorVariant::Dim7Cascade,
            block.row_mut(r),
        );
    }
}

/// First-iteration features: K-NN → 7-dim descriptors → encoder → max-pool.
///
/// In handcrafted mode the raw descriptors are max-pooled instead and
/// zero-padded (or truncated) to `cfg.feature_dim`. Normals are estimated
/// when the cloud has none.
pub fn extract_features_iter0(
    cloud: &PointCloud,
    cfg: &RegistrationConfig,
    weights: Option<&CascadeWeights>,
) -> Result<FeatureSet> {
    cfg.validate()?;
    if cloud.len() < cfg.neighbors {
        return Err(PipelineError::TooFewPoints {
            cloud: "input",
            points: cloud.len(),
            k: cfg.neighbors,
        }
        .into());
    }
    let prepared = PreparedCloud::new(cloud, cfg)?;
    match cfg.mode {
        FeatureMode::Handcrafted => Ok(handcrafted_features(&prepared, cfg.feature_dim)),
        mode => {
            let w = weights.ok_or(PipelineError::MissingWeights(mode))?;
            encoder_features(&prepared, w)
        }
    }
}

pub(crate) fn encoder_features(prepared: &PreparedCloud, weights: &CascadeWeights) -> Result<FeatureSet> {
    let n = prepared.cloud.len();
    let k = prepared.neighbors[0].len();
    let d = weights.feature_dim();
    let mut features = Matrix::zeros(n, d);
    features
        .as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .try_for_each_init(
            || Matrix::zeros(k, DESCRIPTOR_DIM),
            |block, (i, row)| {
                descriptor_block(prepared, i, block);
                let pooled = pointnet_pool(&weights.iter0, block)?;
                row.copy_from_slice(&pooled);
                Ok::<_, crate::Error>(())
            },
        )?;
    Ok(FeatureSet {
        features,
        iteration: 0,
        macs: (n * k) as u64 * weights.iter0.macs_per_row(),
    })
}

pub(crate) fn handcrafted_features(prepared: &PreparedCloud, dim: usize) -> FeatureSet {
    let n = prepared.cloud.len();
    let k = prepared.neighbors[0].len();
    let mut features = Matrix::zeros(n, dim);
    let width = dim.min(DESCRIPTOR_DIM);
    features
        .as_mut_slice()
        .par_chunks_mut(dim)
        .enumerate()
        .for_each_init(
            || Matrix::zeros(k, DESCRIPTOR_DIM),
            |block, (i, row)| {
                descriptor_block(prepared, i, block);
                row[..width].copy_from_slice(&column_max(block)[..width]);
            },
        );
    FeatureSet {
        features,
        iteration: 0,
        macs: 0,
    }
}

/// Rows per GEMM call in the cascade step.
const CASCADE_BLOCK: usize = 256;

/// Next-iteration features: one QMLP step per point on the previous feature
/// and the point's current position.
pub fn extract_features_cascade(prev: &FeatureSet, cloud_current: &PointCloud, q: &Qmlp) -> Result<FeatureSet> {
    if prev.len() != cloud_current.len() {
        return Err(PipelineError::SizeMismatch {
            features: prev.len(),
            points: cloud_current.len(),
        }
        .into());
    }
    let d = prev.dim();
    let points = cloud_current.points();
    let blocks: Vec<Matrix> = (0..prev.len())
        .step_by(CASCADE_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + CASCADE_BLOCK).min(prev.len());
            let rows = Matrix::from_vec(end - start, d, prev.features.as_slice()[start * d..end * d].to_vec());
            qmlp_forward_rows(q, &rows, &points[start..end])
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut data = Vec::with_capacity(prev.len() * q.dim());
    for b in blocks {
        data.extend(b.into_vec());
    }
    let features = Matrix::from_vec(prev.len(), q.dim(), data);
    Ok(FeatureSet {
        features,
        iteration: prev.iteration + 1,
        macs: prev.len() as u64 * q.macs_per_point(),
    })
}

/// Per-stage wall-clock time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub knn: Duration,
    pub features: Duration,
    pub distances: Duration,
    pub similarity: Duration,
    pub sinkhorn: Duration,
    pub procrustes: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.knn + self.features + self.distances + self.similarity + self.sinkhorn + self.procrustes
    }

    fn add(&mut self, other: &StageTimes) {
        self.knn += other.knn;
        self.features += other.features;
        self.distances += other.distances;
        self.similarity += other.similarity;
        self.sinkhorn += other.sinkhorn;
        self.procrustes += other.procrustes;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Weighted RMS distance between moved source points and their targets.
    pub residual: f64,
    pub mean_weight: f64,
    pub sinkhorn_rounds: usize,
    pub params: AnnealingParams,
    pub times: StageTimes,
    /// Feature-stage multiply-accumulates, both clouds.
    pub feature_macs: u64,
    /// Sinkhorn element updates (two passes per round over the full matrix).
    pub sinkhorn_ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps the original source cloud into the reference frame.
    pub transform: RigidTransform,
    pub iterations: Vec<IterationDiagnostics>,
    /// Time spent on normals and K-NN lists before the loop.
    pub setup: StageTimes,
    /// `m²` used to make the schedule relative.
    pub feature_scale_sq: f64,
}

impl RegistrationResult {
    pub fn times(&self) -> StageTimes {
        let mut t = self.setup;
        for it in &self.iterations {
            t.add(&it.times);
        }
        t
    }

    pub fn feature_macs(&self) -> u64 {
        self.iterations.iter().map(|i| i.feature_macs).sum()
    }

    pub fn sinkhorn_ops(&self) -> u64 {
        self.iterations.iter().map(|i| i.sinkhorn_ops).sum()
    }
}

fn check_weights(cfg: &RegistrationConfig, w: &CascadeWeights) -> std::result::Result<(), PipelineError> {
    if w.feature_dim() != cfg.feature_dim {
        return Err(PipelineError::WeightsMismatch(format!(
            "feature width {} but configuration asks for {}",
            w.feature_dim(),
            cfg.feature_dim
        )));
    }
    if cfg.mode == FeatureMode::Cascade && w.iterations() < cfg.iterations {
        return Err(PipelineError::WeightsMismatch(format!(
            "weights cover {} iterations but configuration runs {}",
            w.iterations(),
            cfg.iterations
        )));
    }
    Ok(())
}

/// Squared feature scale from the iteration-1 distances: the median nearest
/// distance, or the median second-nearest when most points match exactly.
fn feature_scale_sq(d: &DistanceMatrix) -> f64 {
    let m = d.median_row_min();
    if m > 0.0 {
        return m * m;
    }
    let mut second: Vec<f64> = d
        .0
        .row_iter()
        .map(|r| {
            let (mut a, mut b) = (f64::INFINITY, f64::INFINITY);
            for &v in r {
                if v < a {
                    b = a;
                    a = v;
                } else if v < b {
                    b = v;
                }
            }
            b
        })
        .filter(|v| v.is_finite())
        .collect();
    if second.is_empty() {
        return 1.0;
    }
    let mid = second.len() / 2;
    let (_, s, _) = second.select_nth_unstable_by(mid, f64::total_cmp);
    if *s > 0.0 {
        *s * *s
    } else {
        1.0
    }
}

/// Registers `src` onto `reference`.
pub fn register(
    src: &PointCloud,
    reference: &PointCloud,
    cfg: &RegistrationConfig,
    weights: Option<&CascadeWeights>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    for (name, c) in [("source", src), ("reference", reference)] {
        if c.len() < cfg.neighbors {
            return Err(PipelineError::TooFewPoints {
                cloud: name,
                points: c.len(),
                k: cfg.neighbors,
            }
            .into());
        }
    }
    let weights = match cfg.mode {
        FeatureMode::Handcrafted => None,
        mode => {
            let w = weights.ok_or(PipelineError::MissingWeights(mode))?;
            check_weights(cfg, w)?;
            Some(w)
        }
    };
    let schedule = make_schedule(cfg)?;

    let mut setup = StageTimes::default();
    let t0 = Instant::now();
    let src_prep = PreparedCloud::new(src, cfg)?;
    let ref_prep = PreparedCloud::new(reference, cfg)?;
    setup.knn = t0.elapsed();

    let mut current = src_prep.clone();
    let mut accumulated = RigidTransform::identity();
    let mut prev: Option<(FeatureSet, FeatureSet)> = None;
    let mut resolved: Vec<AnnealingParams> = Vec::new();
    let mut scale_sq = 1.0;
    let mut diagnostics = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let mut times = StageTimes::default();

        let t = Instant::now();
        let (fx, fy) = match (cfg.mode, prev.take()) {
            (FeatureMode::Handcrafted, Some((_, fy))) => {
                (handcrafted_features(&current, cfg.feature_dim), fy)
            }
            (FeatureMode::Handcrafted, None) => (
                handcrafted_features(&current, cfg.feature_dim),
                handcrafted_features(&ref_prep, cfg.feature_dim),
            ),
            (FeatureMode::Cascade, Some((px, py))) => {
                let q = &weights.expect("checked above").qmlps[iteration - 2];
                (
                    extract_features_cascade(&px, &current.cloud, q)?,
                    extract_features_cascade(&py, &ref_prep.cloud, q)?,
                )
            }
            _ => {
                let w = weights.expect("checked above");
                (encoder_features(&current, w)?, encoder_features(&ref_prep, w)?)
            }
        };
        times.features = t.elapsed();
        if !fx.features.is_finite() || !fy.features.is_finite() {
            return Err(PipelineError::NonFinite {
                iteration,
                stage: "features",
            }
            .into());
        }
        let feature_macs = fx.macs + fy.macs;

        let t = Instant::now();
        let distances = pairwise_distances(&fx, &fy)?;
        times.distances = t.elapsed();

        if iteration == 1 {
            scale_sq = feature_scale_sq(&distances);
            resolved = schedule.resolve(scale_sq);
        }
        let params = resolved[iteration - 1];
        let rounds = cfg.sinkhorn.rounds(iteration);

        let matrix = match cfg.sinkhorn_impl {
            SinkhornImpl::Standard => {
                let t = Instant::now();
                let mut m = similarity_matrix(&distances, params, cfg.slack);
                times.similarity = t.elapsed();
                let t = Instant::now();
                sinkhorn_standard_in_place(&mut m, rounds)?;
                times.sinkhorn = t.elapsed();
                m
            }
            SinkhornImpl::Log => {
                let t = Instant::now();
                let logits = similarity_logits(&distances, params, cfg.slack);
                times.similarity = t.elapsed();
                let t = Instant::now();
                let m = sinkhorn_log(&logits, cfg.slack, rounds);
                times.sinkhorn = t.elapsed();
                m
            }
        };
        let (rows, cols) = matrix.values.shape();
        let sinkhorn_ops = (2 * rounds * rows * cols) as u64;

        let t = Instant::now();
        let corr = soft_correspondences(&matrix, &ref_prep.cloud)?;
        if corr.targets.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(PipelineError::NonFinite {
                iteration,
                stage: "correspondences",
            }
            .into());
        }
        let step = weighted_procrustes(current.cloud.points(), &corr.targets, &corr.weights)?;
        times.procrustes = t.elapsed();
        if !step.rotation().iter().chain(step.translation().iter()).all(|v| v.is_finite()) {
            return Err(PipelineError::NonFinite {
                iteration,
                stage: "transform",
            }
            .into());
        }

        current = current.moved(&step);
        accumulated = compose(&step, &accumulated);

        let total_w: f64 = corr.weights.iter().sum();
        let sq: f64 = current
            .cloud
            .points()
            .iter()
            .zip(&corr.targets)
            .zip(&corr.weights)
            .map(|((p, y), w)| w * (p - y).norm_squared())
            .sum();
        diagnostics.push(IterationDiagnostics {
            iteration,
            residual: (sq / total_w).sqrt(),
            mean_weight: total_w / corr.weights.len() as f64,
            sinkhorn_rounds: rounds,
            params,
            times,
            feature_macs,
            sinkhorn_ops,
        });
        prev = Some((fx, fy));
    }

    Ok(RegistrationResult {
        transform: accumulated,
        iterations: diagnostics,
        setup,
        feature_scale_sq: scale_sq,
    })
}
