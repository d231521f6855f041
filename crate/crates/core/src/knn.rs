//! Exact k-nearest-neighbor search.
//!
//! Two strategies share one ordering: results are sorted by squared distance,
//! ties broken by ascending point index, so the brute-force scan and the
//! uniform-grid search return bit-identical lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

/// `Strategy::Auto` switches to the grid at this many points.
pub const AUTO_GRID_THRESHOLD: usize = 2048;
const MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnnError {
    #[error("cannot index an empty cloud")]
    EmptyCloud,
    #[error("k = {k} must be in 1..={n}")]
    InvalidK { k: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Brute,
    Grid,
    /// Grid for clouds of at least [`AUTO_GRID_THRESHOLD`] points, else brute force.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// A built search structure over a copy of a cloud's points.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Point3>,
    grid: Option<Grid>,
}

#[derive(Debug, Clone)]
struct Grid {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: bucket `c` holds `entries[starts[c]..starts[c + 1]]`.
    starts: Vec<usize>,
    entries: Vec<usize>,
}

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud, strategy: Strategy) -> Result<Self, KnnError> {
        Self::from_points(cloud.points(), strategy)
    }

    pub fn from_points(points: &[Point3], strategy: Strategy) -> Result<Self, KnnError> {
        if points.is_empty() {
            return Err(KnnError::EmptyCloud);
        }
        let use_grid = match strategy {
            Strategy::Brute => false,
            Strategy::Grid => true,
            Strategy::Auto => points.len() >= AUTO_GRID_THRESHOLD,
        };
        let grid = use_grid.then(|| Grid::build(points));
        Ok(Self {
            points: points.to_vec(),
            grid,
        })
    }

    pub fn strategy(&self) -> Strategy {
        if self.grid.is_some() {
            Strategy::Grid
        } else {
            Strategy::Brute
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Grid cell edge length, if this index uses a grid.
    pub fn cell_size(&self) -> Option<f64> {
        self.grid.as_ref().map(|g| g.cell)
    }

    /// The `k` nearest stored points to `query`, nearest first.
    pub fn knn(&self, query: &Point3, k: usize) -> Result<Vec<Neighbor>, KnnError> {
        let n = self.points.len();
        if k == 0 || k > n {
            return Err(KnnError::InvalidK { k, n });
        }
        let found = match &self.grid {
            Some(grid) => grid.knn(&self.points, query, k),
            None => brute_knn(&self.points, query, k),
        };
        Ok(found
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.d2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, query: &Point3) -> Neighbor {
        self.knn(query, 1).expect("index is non-empty")[0]
    }

    /// Neighbor indices for every stored point (each list includes the point itself).
    pub fn knn_all(&self, k: usize) -> Result<Vec<Vec<usize>>, KnnError> {
        let n = self.points.len();
        if k == 0 || k > n {
            return Err(KnnError::InvalidK { k, n });
        }
        Ok(self
            .points
            .par_iter()
            .map(|q| {
                let found = match &self.grid {
                    Some(grid) => grid.knn(&self.points, q, k),
                    None => brute_knn(&self.points, q, k),
                };
                found.into_iter().map(|c| c.index).collect()
            })
            .collect())
    }
}

fn brute_knn(points: &[Point3], query: &Point3, k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate {
            d2: dist2(query, p),
            index,
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable(k - 1);
        all.truncate(k);
    }
    all.sort_unstable();
    all
}

impl Grid {
    fn build(points: &[Point3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let n = points.len() as f64;
        let diag = extent.norm();
        let mut cell = if diag > 0.0 { diag / n.cbrt() } else { 1.0 };
        let mut dims = cell_dims(&extent, cell);
        while dims.iter().product::<usize>() > MAX_CELLS {
            let total = dims.iter().product::<usize>() as f64;
            cell *= (total / MAX_CELLS as f64).cbrt() * 1.01;
            dims = cell_dims(&extent, cell);
        }

        let cell_count = dims.iter().product::<usize>();
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            starts: vec![0; cell_count + 1],
            entries: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.cell_id(p)).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..cell_count {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.entries[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    /// Unclamped integer cell coordinates.
    fn coords(&self, p: &Point3) -> [i64; 3] {
        let rel = (p - self.origin) / self.cell;
        [
            rel.x.floor() as i64,
            rel.y.floor() as i64,
            rel.z.floor() as i64,
        ]
    }

    fn cell_id(&self, p: &Point3) -> usize {
        let c = self.coords(p);
        let clamp = |v: i64, d: usize| v.clamp(0, d as i64 - 1) as usize;
        let (x, y, z) = (
            clamp(c[0], self.dims[0]),
            clamp(c[1], self.dims[1]),
            clamp(c[2], self.dims[2]),
        );
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    fn bucket(&self, x: usize, y: usize, z: usize) -> &[usize] {
        let c = (x * self.dims[1] + y) * self.dims[2] + z;
        &self.entries[self.starts[c]..self.starts[c + 1]]
    }

    /// Expands Chebyshev rings of cells around the query until every
    /// unvisited cell is provably farther than the current k-th candidate.
    fn knn(&self, points: &[Point3], query: &Point3, k: usize) -> Vec<Candidate> {
        let center = self.coords(query);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let max_ring = (0..3)
            .map(|a| {
                let d = self.dims[a] as i64;
                (center[a]).abs().max((center[a] - (d - 1)).abs())
            })
            .max()
            .unwrap_or(0);

        let range = |a: usize, ring: i64| -> Option<(usize, usize)> {
            let lo = (center[a] - ring).max(0);
            let hi = (center[a] + ring).min(self.dims[a] as i64 - 1);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };

        for ring in 0..=max_ring {
            if heap.len() == k {
                // Points outside the visited cube lie at least `ring * cell` away.
                let bound = (ring - 1).max(0) as f64 * self.cell;
                let worst = heap.peek().expect("heap is full").d2;
                if ring > 0 && worst < bound * bound * (1.0 - 1e-12) {
                    break;
                }
            }
            let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) =
                (range(0, ring), range(1, ring), range(2, ring))
            else {
                continue;
            };
            for x in x0..=x1 {
                let x_edge = (x as i64 - center[0]).abs() == ring;
                for y in y0..=y1 {
                    let xy_edge = x_edge || (y as i64 - center[1]).abs() == ring;
                    if xy_edge {
                        for z in z0..=z1 {
                            self.visit(points, query, k, &mut heap, x, y, z);
                        }
                    } else {
                        for zc in [center[2] - ring, center[2] + ring] {
                            if zc >= z0 as i64 && zc <= z1 as i64 {
                                self.visit(points, query, k, &mut heap, x, y, zc as usize);
                            }
                        }
                    }
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        out
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn visit(
        &self,
        points: &[Point3],
        query: &Point3,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
        x: usize,
        y: usize,
        z: usize,
    ) {
        for &index in self.bucket(x, y, z) {
            let cand = Candidate {
                d2: dist2(query, &points[index]),
                index,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }
    }
}

fn cell_dims(extent: &Point3, cell: f64) -> [usize; 3] {
    let d = |e: f64| ((e / cell).floor() as usize + 1).max(1);
    [d(extent.x), d(extent.y), d(extent.z)]
}
