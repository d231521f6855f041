//! Handcrafted per-neighbor descriptors and normal estimation.
//!
//! For a point `x` with normal `n_x` and a neighbor `y` with normal `n_y`,
//! `d = y - x`, the descriptor starts with the point-pair block
//! `(∠(n_x, d), ∠(n_y, d), ∠(n_x, n_y), ‖d‖)`. The 10-dimensional variant
//! appends the absolute neighbor position and then `d`; the 7-dimensional
//! variant appends only `d`.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};
use crate::knn::{KnnError, NeighborIndex, Strategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("cloud has no normals")]
    MissingNormals,
    #[error("normal estimation needs 3 <= k <= N, got k = {k}, N = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("neighborhood of point {index} is degenerate (all points coincide)")]
    DegenerateNeighborhood { index: usize },
    #[error("neighbor list is empty")]
    NoNeighbors,
    #[error("index {index} is out of bounds for a cloud of {n} points")]
    IndexOutOfBounds { index: usize, n: usize },
    #[error(transparent)]
    Knn(#[from] KnnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorVariant {
    /// Angles, distance, absolute neighbor position, relative offset.
    Dim10Baseline,
    /// Angles, distance, relative offset.
    Dim7Cascade,
}

impl DescriptorVariant {
    pub const fn dim(self) -> usize {
        match self {
            Self::Dim10Baseline => 10,
            Self::Dim7Cascade => 7,
        }
    }
}

/// Entries `0..4` of every descriptor are invariant under rigid motions.
pub const RIGID_INVARIANT_SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalDescriptor {
    values: [f64; 10],
    dim: usize,
}

impl LocalDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn from_slice(values: &[f64]) -> Option<Self> {
        if values.len() != 7 && values.len() != 10 {
            return None;
        }
        let mut v = [0.0; 10];
        v[..values.len()].copy_from_slice(values);
        Some(Self {
            values: v,
            dim: values.len(),
        })
    }
}

/// `atan2(‖a × b‖, a · b)`, in `[0, π]`.
pub fn angle_between(a: &Point3, b: &Point3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Unit normals from the smallest-eigenvalue eigenvector of each point's
/// k-NN covariance, oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, DescriptorError> {
    let n = cloud.len();
    if k < 3 || k > n {
        return Err(DescriptorError::InvalidK { k, n });
    }
    let index = NeighborIndex::build(cloud, Strategy::Auto)?;
    let neighbors = index.knn_all(k)?;
    let centroid = cloud.centroid();
    let points = cloud.points();

    let normals = neighbors
        .par_iter()
        .enumerate()
        .map(|(i, ids)| {
            let mean = ids.iter().fold(Point3::zeros(), |acc, &j| acc + points[j]) / k as f64;
            let mut cov = Matrix3::zeros();
            for &j in ids {
                let d = points[j] - mean;
                cov += d * d.transpose();
            }
            if cov.trace() <= f64::MIN_POSITIVE {
                return Err(DescriptorError::DegenerateNeighborhood { index: i });
            }
            let eig = SymmetricEigen::new(cov);
            let smallest = eig.eigenvalues.imin();
            let mut normal: Point3 = eig.eigenvectors.column(smallest).normalize();
            if normal.dot(&(centroid - points[i])) > 0.0 {
                normal = -normal;
            }
            Ok(normal)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PointCloud::from_parts_unchecked(
        points.to_vec(),
        Some(normals),
    ))
}

/// Descriptors of point `i` against each of `neighbor_ids`, in order.
pub fn local_descriptors(
    cloud: &PointCloud,
    i: usize,
    neighbor_ids: &[usize],
    variant: DescriptorVariant,
) -> Result<Vec<LocalDescriptor>, DescriptorError> {
    let normals = cloud.normals().ok_or(DescriptorError::MissingNormals)?;
    if neighbor_ids.is_empty() {
        return Err(DescriptorError::NoNeighbors);
    }
    let n = cloud.len();
    if let Some(&bad) = std::iter::once(&i)
        .chain(neighbor_ids)
        .find(|&&j| j >= n)
    {
        return Err(DescriptorError::IndexOutOfBounds { index: bad, n });
    }
    let points = cloud.points();
    Ok(neighbor_ids
        .iter()
        .map(|&j| {
            let mut values = [0.0; 10];
            write_descriptor(
                &points[i],
                &normals[i],
                &points[j],
                &normals[j],
                variant,
                &mut values,
            );
            LocalDescriptor {
                values,
                dim: variant.dim(),
            }
        })
        .collect())
}

/// Writes one descriptor into `out[..variant.dim()]`.
#[inline]
pub(crate) fn write_descriptor(
    x: &Point3,
    nx: &Point3,
    y: &Point3,
    ny: &Point3,
    variant: DescriptorVariant,
    out: &mut [f64],
) {
    let d = y - x;
    let dist = d.norm();
    let (a_xd, a_yd) = if dist == 0.0 {
        (0.0, 0.0)
    } else {
        (angle_between(nx, &d), angle_between(ny, &d))
    };
    out[0] = a_xd;
    out[1] = a_yd;
    out[2] = angle_between(nx, ny);
    out[3] = dist;
    match variant {
        DescriptorVariant::Dim7Cascade => {
            out[4] = d.x;
            out[5] = d.y;
            out[6] = d.z;
        }
        DescriptorVariant::Dim10Baseline => {
            out[4] = y.x;
            out[5] = y.y;
            out[6] = y.z;
            out[7] = d.x;
            out[8] = d.y;
            out[9] = d.z;
        }
    }
}
