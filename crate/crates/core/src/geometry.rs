//! Rigid transforms, point clouds and registration error metrics.
//!
//! All arithmetic is `f64`. Euler angles follow the intrinsic Z-Y-X
//! convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::knn::{NeighborIndex, Strategy};

/// A point (or direction) in three dimensions.
pub type Point3 = Vector3<f64>;

const TRANSFORM_TOL: f64 = 1e-9;
const NORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("{normals} normals supplied for {points} points")]
    NormalCountMismatch { points: usize, normals: usize },
    #[error("normal {index} has norm {norm}, expected 1")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("rotation is not orthonormal with determinant +1 (max defect {defect:e})")]
    InvalidRotation { defect: f64 },
    #[error("translation has a non-finite component")]
    NonFiniteTranslation,
    #[error("{name} = {value} is out of range")]
    OutOfRange { name: &'static str, value: f64 },
}

/// An ordered set of points with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !is_finite(p)) {
            return Err(GeometryError::NonFinitePoint { index });
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self, GeometryError> {
        let mut cloud = Self::new(points)?;
        if normals.len() != cloud.points.len() {
            return Err(GeometryError::NormalCountMismatch {
                points: cloud.points.len(),
                normals: normals.len(),
            });
        }
        for (index, n) in normals.iter().enumerate() {
            let norm = n.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > NORMAL_TOL {
                return Err(GeometryError::NonUnitNormal { index, norm });
            }
        }
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    /// Builds a cloud from parts the caller already knows to be valid.
    pub(crate) fn from_parts_unchecked(points: Vec<Point3>, normals: Option<Vec<Point3>>) -> Self {
        debug_assert!(!points.is_empty());
        debug_assert!(normals.as_ref().is_none_or(|n| n.len() == points.len()));
        Self { points, normals }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always `false`; clouds hold at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn without_normals(&self) -> Self {
        Self {
            points: self.points.clone(),
            normals: None,
        }
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    /// Selects points (and normals) by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        if indices.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        Ok(Self { points, normals })
    }
}

fn is_finite(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Point3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Point3) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&rotation);
        if defect.is_nan() || defect > TRANSFORM_TOL {
            return Err(GeometryError::InvalidRotation { defect });
        }
        if !is_finite(&translation) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Point3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Point3::zeros(),
        }
    }

    pub fn from_translation(translation: Point3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rotation_z(angle: f64) -> Self {
        Self::from_euler_zyx(angle, 0.0, 0.0)
    }

    /// Intrinsic Z-Y-X Euler angles in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sz, cz) = yaw.sin_cos();
        let (sy, cy) = pitch.sin_cos();
        let (sx, cx) = roll.sin_cos();
        let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        Self {
            rotation: rz * ry * rx,
            translation: Point3::zeros(),
        }
    }

    pub fn with_translation(mut self, translation: Point3) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Point3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Point3) -> Point3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major `R` followed by `t`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Point3::new(v[9], v[10], v[11]))
    }
}

/// Largest elementwise deviation of `RᵀR` from `I`, or of `det R` from 1.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// Applies `t` to every point (and rotates every normal), preserving order.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let points = cloud.points.iter().map(|p| t.apply_point(p)).collect();
    let normals = cloud
        .normals
        .as_ref()
        .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect());
    PointCloud { points, normals }
}

/// `outer ∘ inner`: applying the result equals applying `inner` then `outer`.
pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: outer.rotation * inner.rotation,
        translation: outer.rotation * inner.translation + outer.translation,
    }
}

/// Samples three Euler angles uniformly in `[0, max_rot_deg]` and each
/// translation component uniformly in `[-max_trans, max_trans]`.
pub fn sample_random_transform(
    max_rot_deg: f64,
    max_trans: f64,
    seed: u64,
) -> Result<RigidTransform, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_random_transform_with(&mut rng, max_rot_deg, max_trans)
}

pub fn sample_random_transform_with<R: Rng + ?Sized>(
    rng: &mut R,
    max_rot_deg: f64,
    max_trans: f64,
) -> Result<RigidTransform, GeometryError> {
    if !(0.0..=180.0).contains(&max_rot_deg) {
        return Err(GeometryError::OutOfRange {
            name: "max_rot_deg",
            value: max_rot_deg,
        });
    }
    if !(max_trans >= 0.0 && max_trans.is_finite()) {
        return Err(GeometryError::OutOfRange {
            name: "max_trans",
            value: max_trans,
        });
    }
    let max_rot = max_rot_deg.to_radians();
    let yaw = rng.gen_range(0.0..=max_rot);
    let pitch = rng.gen_range(0.0..=max_rot);
    let roll = rng.gen_range(0.0..=max_rot);
    let translation = Point3::new(
        rng.gen_range(-max_trans..=max_trans),
        rng.gen_range(-max_trans..=max_trans),
        rng.gen_range(-max_trans..=max_trans),
    );
    Ok(RigidTransform::from_euler_zyx(yaw, pitch, roll).with_translation(translation))
}

/// Registration error metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Angle of the relative rotation, degrees.
    pub re_deg: f64,
    /// Euclidean norm of the translation difference.
    pub te: f64,
    /// Symmetric squared chamfer distance between the two placements of `src`.
    pub cd: f64,
}

/// Angle (degrees) of `R_a · R_bᵀ`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr − 1) / 2` clamped to
/// `[-1, 1]`, which agrees with `acos` but keeps full precision near zero.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Point3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

pub fn metrics(est: &RigidTransform, gt: &RigidTransform, src: &PointCloud) -> Metrics {
    let re_deg = rotation_error_deg(&est.rotation, &gt.rotation);
    let te = (est.translation - gt.translation).norm();
    let a = apply_transform(est, src);
    let b = apply_transform(gt, src);
    Metrics {
        re_deg,
        te,
        cd: chamfer_distance(&a, &b),
    }
}

/// Mean squared nearest-neighbor distance, averaged over both directions.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    0.5 * (one_sided_chamfer(a, b) + one_sided_chamfer(b, a))
}

fn one_sided_chamfer(from: &PointCloud, to: &PointCloud) -> f64 {
    let index = NeighborIndex::build(to, Strategy::Auto).expect("clouds are non-empty");
    let total: f64 = from
        .points
        .iter()
        .map(|p| {
            let d = index.nearest(p).distance;
            d * d
        })
        .sum();
    total / from.len() as f64
}
