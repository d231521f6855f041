//! Weighted orthogonal Procrustes on top of a dedicated 3×3 SVD.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Point3, RigidTransform};

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_TOL: f64 = 1e-12;
/// `σ₂ < DEGENERACY_RATIO · σ₁` marks collinear (or coincident) weighted support.
pub const DEGENERACY_RATIO: f64 = 1e-12;
const MIN_TOTAL_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("matrix contains NaN or infinite entries")]
    NonFiniteInput,
    #[error("{src} source points but {targets} targets and {weights} weights")]
    LengthMismatch {
        src: usize,
        targets: usize,
        weights: usize,
    },
    #[error("total weight {0:e} is effectively zero")]
    ZeroWeight(f64),
    #[error("only {0} points carry positive weight, need at least 3")]
    TooFewWeighted(usize),
    #[error("weight {index} is negative or not finite ({value})")]
    BadWeight { index: usize, value: f64 },
    #[error("weighted support is collinear (singular values {singular_values:?})")]
    Collinear { singular_values: [f64; 3] },
}

/// `A = U · diag(S) · Vᵀ` with `S` descending and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD of a 3×3 matrix.
///
/// Column pairs of `W = A V` are rotated until mutually orthogonal to within
/// `1e-12` relative; singular values are the column norms. `U` is then built
/// by Gram-Schmidt on the two leading columns and a cross product for the
/// third, so it stays orthonormal when `A` is rank deficient.
pub fn svd3(a: &Matrix3<f64>) -> Result<Svd3, AlignmentError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(AlignmentError::NonFiniteInput);
    }
    // Working on a / max|a_ij| keeps squared column norms in range.
    let scale = a.amax();
    if scale == 0.0 {
        return Ok(Svd3 {
            u: Matrix3::identity(),
            s: Vector3::zeros(),
            v: Matrix3::identity(),
        });
    }
    let mut w = a / scale;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            rotate_columns(&mut w, p, q, c, s);
            rotate_columns(&mut v, p, q, c, s);
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let w = Matrix3::from_columns(&[w.column(order[0]), w.column(order[1]), w.column(order[2])]);
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);

    let s1 = w.column(0).norm();
    let tiny = s1 * 1e-15;
    let u1: Vector3<f64> = if s1 > 0.0 {
        w.column(0) / s1
    } else {
        Vector3::x()
    };
    let w2: Vector3<f64> = w.column(1).into_owned();
    let w2_perp = w2 - u1 * u1.dot(&w2);
    let s2 = w2_perp.norm();
    let u2 = if s2 > tiny && s2 > 0.0 {
        w2_perp / s2
    } else {
        any_orthogonal(&u1)
    };
    let mut u3 = u1.cross(&u2);
    let mut s3 = u3.dot(&w.column(2));
    if s3 < 0.0 {
        u3 = -u3;
        s3 = -s3;
    }
    if s3 > s2 {
        // Only reachable through rounding when σ₂ ≈ σ₃.
        return Ok(Svd3 {
            u: Matrix3::from_columns(&[u1, u3, u2]),
            s: Vector3::new(s1, s3, s2) * scale,
            v: Matrix3::from_columns(&[v.column(0), v.column(2), v.column(1)]),
        });
    }
    Ok(Svd3 {
        u: Matrix3::from_columns(&[u1, u2, u3]),
        s: Vector3::new(s1, s2, s3) * scale,
        v,
    })
}

fn rotate_columns(m: &mut Matrix3<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..3 {
        let mp = m[(r, p)];
        let mq = m[(r, q)];
        m[(r, p)] = c * mp - s * mq;
        m[(r, q)] = s * mp + c * mq;
    }
}

fn any_orthogonal(u: &Vector3<f64>) -> Vector3<f64> {
    let axis = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    u.cross(&axis).normalize()
}

/// The rigid transform minimizing `Σ w_i ‖R x_i + t − y_i‖²`.
///
/// Points with zero weight do not influence the result. The rotation always
/// has determinant +1: `R = V · diag(1, 1, det(V Uᵀ)) · Uᵀ` where
/// `H = U S Vᵀ` is the weighted cross-covariance of the centered sets.
pub fn weighted_procrustes(
    src: &[Point3],
    targets: &[Point3],
    weights: &[f64],
) -> Result<RigidTransform, AlignmentError> {
    if src.len() != targets.len() || src.len() != weights.len() {
        return Err(AlignmentError::LengthMismatch {
            src: src.len(),
            targets: targets.len(),
            weights: weights.len(),
        });
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0 && w.is_finite()))
    {
        return Err(AlignmentError::BadWeight { index, value });
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= MIN_TOTAL_WEIGHT {
        return Err(AlignmentError::ZeroWeight(total));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 3 {
        return Err(AlignmentError::TooFewWeighted(positive));
    }

    let mut src_mean = Point3::zeros();
    let mut tgt_mean = Point3::zeros();
    for ((x, y), &w) in src.iter().zip(targets).zip(weights) {
        if w > 0.0 {
            src_mean += x * w;
            tgt_mean += y * w;
        }
    }
    src_mean /= total;
    tgt_mean /= total;

    let mut h = Matrix3::zeros();
    for ((x, y), &w) in src.iter().zip(targets).zip(weights) {
        if w > 0.0 {
            h += (x - src_mean) * (y - tgt_mean).transpose() * w;
        }
    }
    h /= total;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(AlignmentError::NonFiniteInput);
    }

    let svd = svd3(&h)?;
    if svd.s[1].is_nan() || svd.s[1] < DEGENERACY_RATIO * svd.s[0] || svd.s[0] == 0.0 {
        return Err(AlignmentError::Collinear {
            singular_values: [svd.s[0], svd.s[1], svd.s[2]],
        });
    }
    let ut = svd.u.transpose();
    let d = (svd.v * ut).determinant().signum();
    let rotation = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * ut;
    let translation = tgt_mean - rotation * src_mean;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_defect;

    fn check(a: &Matrix3<f64>) -> Svd3 {
        let svd = svd3(a).unwrap();
        let scale = a.norm().max(1e-300);
        assert!((svd.reconstruct() - a).norm() <= 1e-9 * scale, "{a}");
        assert!((svd.u.transpose() * svd.u - Matrix3::identity()).abs().max() < 1e-9);
        assert!((svd.v.transpose() * svd.v - Matrix3::identity()).abs().max() < 1e-9);
        assert!(svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2] && svd.s[2] >= 0.0);
        svd
    }

    #[test]
    fn identity_svd() {
        let svd = check(&Matrix3::identity());
        assert_eq!(svd.s, Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn diagonal_svd() {
        let svd = check(&Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0)));
        assert!((svd.s - Vector3::new(3.0, 2.0, 1.0)).norm() < 1e-15);
        for i in 0..3 {
            assert!((svd.u[(i, i)].abs() - 1.0).abs() < 1e-15);
            assert!((svd.v[(i, i)].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_deficient_inputs() {
        check(&Matrix3::zeros());
        let r1 = Vector3::new(1.0, 2.0, 3.0) * Vector3::new(-1.0, 0.5, 2.0).transpose();
        let svd = check(&r1);
        assert!(svd.s[1] < 1e-12);
        let r2 = Matrix3::new(1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0);
        let svd = check(&r2);
        assert!(svd.s[2] < 1e-12);
        check(&Matrix3::new(1e-200, 0.0, 0.0, 0.0, 1e200, 0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn nan_rejected() {
        let mut a = Matrix3::identity();
        a[(1, 2)] = f64::NAN;
        assert_eq!(svd3(&a), Err(AlignmentError::NonFiniteInput));
    }

    fn generic_points() -> Vec<Point3> {
        vec![
            Point3::new(0.1, 0.2, 0.3),
            Point3::new(1.0, -0.4, 0.2),
            Point3::new(-0.3, 0.9, 0.5),
            Point3::new(0.4, 0.3, -1.1),
        ]
    }

    #[test]
    fn identical_sets_give_identity() {
        let p = generic_points();
        let t = weighted_procrustes(&p, &p, &[1.0; 4]).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_quarter_turn_and_offset() {
        let p = generic_points();
        let gt = RigidTransform::rotation_z(std::f64::consts::FRAC_PI_2)
            .with_translation(Point3::new(1.0, 2.0, 3.0));
        let q: Vec<Point3> = p.iter().map(|x| gt.apply_point(x)).collect();
        let t = weighted_procrustes(&p, &q, &[1.0; 4]).unwrap();
        assert!((t.rotation() - gt.rotation()).abs().max() < 1e-9);
        assert!((t.translation() - gt.translation()).norm() < 1e-9);
        assert!(rotation_defect(t.rotation()) < 1e-12);
    }

    #[test]
    fn error_cases() {
        let p = generic_points();
        assert!(matches!(
            weighted_procrustes(&p, &p[..3], &[1.0; 4]),
            Err(AlignmentError::LengthMismatch { .. })
        ));
        assert!(matches!(
            weighted_procrustes(&p, &p, &[0.0; 4]),
            Err(AlignmentError::ZeroWeight(_))
        ));
        assert_eq!(
            weighted_procrustes(&p, &p, &[1.0, 1.0, 0.0, 0.0]),
            Err(AlignmentError::TooFewWeighted(2))
        );
        assert!(matches!(
            weighted_procrustes(&p, &p, &[1.0, -1.0, 1.0, 1.0]),
            Err(AlignmentError::BadWeight { index: 1, .. })
        ));
        let line: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            weighted_procrustes(&line, &line, &[1.0; 5]),
            Err(AlignmentError::Collinear { .. })
        ));
    }

    #[test]
    fn planar_support_is_not_degenerate() {
        let p: Vec<Point3> = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(1.5, 1.0, 0.0),
        ];
        let gt = RigidTransform::from_euler_zyx(2.5, -0.7, 1.9);
        let q: Vec<Point3> = p.iter().map(|x| gt.apply_point(x)).collect();
        let t = weighted_procrustes(&p, &q, &[1.0; 4]).unwrap();
        assert!((t.rotation() - gt.rotation()).abs().max() < 1e-9);
    }
}
