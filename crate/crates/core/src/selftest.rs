//! Quick numerical self-checks: cascade folding, Sinkhorn cross-checks and
//! Procrustes recovery. Each suite is small enough to run in well under a
//! second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::weighted_procrustes;
use crate::dense::Matrix;
use crate::geometry::{rotation_error_deg, sample_random_transform_with, Point3};
use crate::matching::{sinkhorn_log, sinkhorn_standard, CorrespondenceMatrix};
use crate::network::{fold_cascade, qmlp_forward, Qmlp};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Perturbs the folded weights so the fold suite must fail.
    pub corrupt_fold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(opts: SelftestOptions) -> Vec<SuiteResult> {
    vec![fold_suite(opts), sinkhorn_suite(), procrustes_suite()]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a))
}

/// Folded `ReLU(A'h + Bx + b)` against unfolded `ReLU(C·[D h; x] + b)`.
pub fn fold_suite(opts: SelftestOptions) -> SuiteResult {
    const D: usize = 32;
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c = random_matrix(&mut rng, D, D + 3, 0.3);
        let d = random_matrix(&mut rng, D, D, 0.3);
        let bias: Vec<f64> = (0..D).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let (mut a_prime, b) = fold_cascade(&c, &d).expect("shapes are consistent");
        if opts.corrupt_fold {
            a_prime[(0, 0)] += 1e-3;
        }
        let q = Qmlp::new(a_prime, b, bias.clone()).expect("finite weights");
        for _ in 0..100 {
            let h: Vec<f64> = (0..D).map(|_| rng.gen_range(0.0..2.0)).collect();
            let x = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut stacked = d.matvec(&h);
            stacked.extend([x.x, x.y, x.z]);
            let unfolded: Vec<f64> = c
                .matvec(&stacked)
                .iter()
                .zip(&bias)
                .map(|(v, b)| (v + b).max(0.0))
                .collect();
            let folded = qmlp_forward(&q, &h, &x).expect("dims match");
            for (u, f) in unfolded.iter().zip(&folded) {
                worst = worst.max((u - f).abs());
            }
        }
    }
    SuiteResult {
        name: "fold",
        passed: worst < TOL,
        detail: format!("max |folded - unfolded| = {worst:.3e} (tolerance {TOL:e})"),
    }
}

/// Standard against log-domain Sinkhorn on random positive matrices.
pub fn sinkhorn_suite() -> SuiteResult {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let logits = Matrix::from_fn(32, 32, |_, _| rng.gen_range(-4.0..4.0));
        let m = Matrix::from_fn(32, 32, |i, j| logits[(i, j)].exp());
        let std = sinkhorn_standard(&CorrespondenceMatrix::new(m, false), 20).expect("positive entries");
        let log = sinkhorn_log(&logits, false, 20);
        for (a, b) in std.values.as_slice().iter().zip(log.values.as_slice()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    SuiteResult {
        name: "sinkhorn",
        passed: worst < TOL,
        detail: format!("max relative difference = {worst:.3e} (tolerance {TOL:e})"),
    }
}

/// Recovers random rigid transforms from eight exact correspondences.
pub fn procrustes_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst_re, mut worst_te) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let gt = sample_random_transform_with(&mut rng, 180.0, 1.0).expect("valid ranges");
        let src: Vec<Point3> = (0..8)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let dst: Vec<Point3> = src.iter().map(|p| gt.apply_point(p)).collect();
        match weighted_procrustes(&src, &dst, &[1.0; 8]) {
            Ok(est) => {
                worst_re = worst_re.max(rotation_error_deg(est.rotation(), gt.rotation()));
                worst_te = worst_te.max((est.translation() - gt.translation()).norm());
            }
            Err(e) => {
                return SuiteResult {
                    name: "procrustes",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    SuiteResult {
        name: "procrustes",
        passed: worst_re < 1e-6 && worst_te < 1e-9,
        detail: format!("max RE = {worst_re:.3e} deg, max TE = {worst_te:.3e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let results = run_all(SelftestOptions::default());
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_fold_is_caught() {
        let results = run_all(SelftestOptions { corrupt_fold: true });
        assert!(!results[0].passed);
        assert!(results[1].passed && results[2].passed);
    }
}
