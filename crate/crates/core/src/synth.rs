//! Synthetic test data: parametric base shapes and corrupted source/reference
//! pairs with a known ground-truth transform.
//!
//! A pair is made by sampling `n_points` of a base shape, cropping each copy
//! independently with a random half-space, adding Gaussian noise, and moving
//! the reference copy by a random rigid transform. With `keep_fraction = 0.7`
//! the two crops share roughly 40% of the sampled points.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use thiserror::Error;

use crate::error::Result;
use crate::geometry::{apply_transform, sample_random_transform_with, Point3, PointCloud, RigidTransform};

pub const MIN_SHAPE_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("base shape needs at least {MIN_SHAPE_POINTS} points, got {0}")]
    TooFewShapePoints(usize),
    #[error("base cloud has {have} points but {need} were requested")]
    NotEnoughPoints { have: usize, need: usize },
    #[error("{name} = {value} is out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("unknown shape `{0}` (cube_grid|sphere|two_planes|helix)")]
    UnknownShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// A cubic lattice, trimmed to `n` points.
    CubeGrid,
    /// Points on a sphere, in antipodal pairs.
    Sphere,
    /// Two perpendicular rectangles sharing an edge.
    TwoPlanes,
    /// A thin tube around a conical helix; has no rotational symmetry.
    Helix,
}

impl std::str::FromStr for Shape {
    type Err = SynthError;
    fn from_str(s: &str) -> std::result::Result<Self, SynthError> {
        match s {
            "cube_grid" => Ok(Self::CubeGrid),
            "sphere" => Ok(Self::Sphere),
            "two_planes" => Ok(Self::TwoPlanes),
            "helix" => Ok(Self::Helix),
            other => Err(SynthError::UnknownShape(other.to_string())),
        }
    }
}

/// Samples `n` points of `shape`, centered on the origin and scaled so that
/// twice the largest distance from the centroid is 1.
pub fn make_base_shape(shape: Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_SHAPE_POINTS {
        return Err(SynthError::TooFewShapePoints(n).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match shape {
        Shape::CubeGrid => cube_grid(n, &mut rng),
        Shape::Sphere => sphere(n, &mut rng),
        Shape::TwoPlanes => two_planes(n, &mut rng),
        Shape::Helix => helix(n, &mut rng),
    };
    Ok(normalize(raw))
}

fn normalize(mut points: Vec<Point3>) -> PointCloud {
    let centroid = points.iter().sum::<Point3>() / points.len() as f64;
    for p in &mut points {
        *p -= centroid;
    }
    let radius = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if radius > 0.0 {
        let scale = 0.5 / radius;
        for p in &mut points {
            *p *= scale;
        }
    }
    PointCloud::new(points).expect("generated points are finite and non-empty")
}

fn cube_grid(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let side = (1..).find(|m| m * m * m >= n).unwrap();
    let step = 1.0 / (side - 1).max(1) as f64;
    let cells = side * side * side;
    let mut picked: Vec<usize> = sample(rng, cells, n).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|c| {
            let (i, j, k) = (c % side, (c / side) % side, c / (side * side));
            Point3::new(i as f64, j as f64, k as f64) * step
        })
        .collect()
}

fn sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let mut points = Vec::with_capacity(n);
    if n % 2 == 1 {
        // Three points at 120° on a great circle keep the centroid at zero.
        let a: f64 = rng.gen_range(0.0..TAU);
        for k in 0..3 {
            let t = a + k as f64 * TAU / 3.0;
            points.push(Point3::new(t.cos(), t.sin(), 0.0));
        }
    }
    while points.len() < n {
        let v: [f64; 3] = UnitSphere.sample(rng);
        let p = Point3::from(v);
        points.push(p);
        points.push(-p);
    }
    points
}

fn two_planes(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    // A wide floor and a narrower wall so the corner is not mirror-symmetric.
    (0..n)
        .map(|i| {
            let u: f64 = rng.gen_range(0.0..1.0);
            let v: f64 = rng.gen_range(0.0..1.0);
            if i % 5 < 3 {
                Point3::new(u, 0.6 * v, 0.0)
            } else {
                Point3::new(u, 0.0, 0.4 * v)
            }
        })
        .collect()
}

fn helix(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    const TURNS: f64 = 2.5;
    const TUBE: f64 = 0.06;
    (0..n)
        .map(|_| {
            let t: f64 = rng.gen_range(0.0..1.0);
            let theta = TAU * TURNS * t;
            let r = 0.3 + 0.7 * t;
            let center = Point3::new(r * theta.cos(), r * theta.sin(), 1.6 * t * t);
            let phi = rng.gen_range(0.0..TAU);
            let radial = Point3::new(theta.cos(), theta.sin(), 0.0);
            let up = Point3::z();
            center + TUBE * (phi.cos() * radial + phi.sin() * up)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_points: usize,
    /// Fraction of the sampled points each copy keeps, in `(0, 1]`.
    pub keep_fraction: f64,
    /// Standard deviation of the per-coordinate noise.
    pub noise_sigma: f64,
    pub max_rot_deg: f64,
    pub max_trans: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            keep_fraction: 0.7,
            noise_sigma: 0.0,
            max_rot_deg: 45.0,
            max_trans: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> std::result::Result<(), SynthError> {
        let check = |ok: bool, name, value| if ok { Ok(()) } else { Err(SynthError::OutOfRange { name, value }) };
        check(
            self.keep_fraction > 0.0 && self.keep_fraction <= 1.0,
            "keep_fraction",
            self.keep_fraction,
        )?;
        check(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma",
            self.noise_sigma,
        )?;
        check(
            (0.0..=180.0).contains(&self.max_rot_deg),
            "max_rot_deg",
            self.max_rot_deg,
        )?;
        check(
            self.max_trans >= 0.0 && self.max_trans.is_finite(),
            "max_trans",
            self.max_trans,
        )?;
        check(self.n_points > 0, "n_points", self.n_points as f64)
    }

    /// Points in each cropped copy: `round(keep_fraction · n_points)`, at least 1.
    pub fn kept_points(&self) -> usize {
        ((self.keep_fraction * self.n_points as f64).round() as usize).clamp(1, self.n_points)
    }
}

/// A source/reference pair and the transform that maps source onto reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub src: PointCloud,
    pub reference: PointCloud,
    pub gt: RigidTransform,
}

/// Keeps the `keep` points with the largest projection on a random direction,
/// in their original order.
fn half_space_crop(points: &[Point3], keep: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    if keep >= points.len() {
        return points.to_vec();
    }
    let dir = Point3::from(UnitSphere.sample(rng));
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| dir.dot(&points[b]).total_cmp(&dir.dot(&points[a])).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept.into_iter().map(|i| points[i]).collect()
}

fn add_noise(points: &mut [Point3], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for p in points {
        for c in p.iter_mut() {
            *c += normal.sample(rng);
        }
    }
}

pub fn synth_pair(cfg: &SynthConfig, base: &PointCloud) -> Result<SynthPair> {
    cfg.validate()?;
    if base.len() < cfg.n_points {
        return Err(SynthError::NotEnoughPoints {
            have: base.len(),
            need: cfg.n_points,
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = sample(&mut rng, base.len(), cfg.n_points).into_vec();
    picked.sort_unstable();
    let subset: Vec<Point3> = picked.iter().map(|&i| base.points()[i]).collect();

    let keep = cfg.kept_points();
    let mut src = half_space_crop(&subset, keep, &mut rng);
    let mut reference = half_space_crop(&subset, keep, &mut rng);
    add_noise(&mut src, cfg.noise_sigma, &mut rng);
    add_noise(&mut reference, cfg.noise_sigma, &mut rng);

    let gt = sample_random_transform_with(&mut rng, cfg.max_rot_deg, cfg.max_trans)?;
    let reference = apply_transform(&gt, &PointCloud::new(reference)?);
    Ok(SynthPair {
        src: PointCloud::new(src)?,
        reference,
        gt,
    })
}

#[cfg(test)]
fn max_polar_angle(points: &[Point3]) -> f64 {
    points
        .iter()
        .map(|p| p.z.clamp(-p.norm(), p.norm()).acos())
        .fold(0.0, f64::max)
}
