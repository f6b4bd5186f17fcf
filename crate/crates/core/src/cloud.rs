//! Point cloud types and the geometric preprocessing shared by every module.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::spatial::NeighborIndex;

pub type Point3 = [f64; 3];

/// Default jitter standard deviation and clip bound for training augmentation.
pub const JITTER_SIGMA: f64 = 0.01;
pub const JITTER_CLIP: f64 = 0.02;

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

/// An ordered set of `n >= 1` finite 3D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        Ok(Self { points })
    }

    /// Caller guarantees the invariants (used where they hold by construction).
    pub(crate) fn from_trusted(points: Vec<Point3>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Tight axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Row-major `n x 3` copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegLabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
}

impl SegLabeledCloud {
    pub fn new(cloud: PointCloud, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::DimensionMismatch {
                what: "per-point labels",
                expected: cloud.len(),
                found: labels.len(),
            });
        }
        Ok(Self { cloud, labels })
    }
}

/// Centers the cloud on its bounding-box center and scales it uniformly so
/// the largest bounding-box extent is 1. A cloud of identical points is only
/// centered.
pub fn normalize_unit_cube(cloud: &PointCloud) -> PointCloud {
    let (lo, hi) = cloud.bounds();
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    PointCloud::from_trusted(
        cloud
            .points
            .iter()
            .map(|p| {
                [
                    (p[0] - center[0]) * scale,
                    (p[1] - center[1]) * scale,
                    (p[2] - center[2]) * scale,
                ]
            })
            .collect(),
    )
}

/// Greedy farthest point sampling. The first index is drawn uniformly from
/// `seed`; each later pick maximises the squared distance to the already
/// selected set, ties going to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed);
    let first = rng.random_range(0..cloud.len());
    farthest_point_sample_from(cloud, m, first)
}

/// Farthest point sampling with an explicit first pick.
pub fn farthest_point_sample_from(cloud: &PointCloud, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::SampleSizeExceedsCloud {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..m {
        selected.push(current);
        min_d[current] = -1.0;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Unit normals from a plane fit over each point's `k` nearest neighbours
/// (the point itself included). Normals are oriented away from the cloud
/// centroid; a zero dot product keeps the computed sign.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    if k < 3 {
        return Err(Error::InsufficientNeighbors(k));
    }
    if k > cloud.len() {
        return Err(Error::SampleSizeExceedsCloud {
            requested: k,
            available: cloud.len(),
        });
    }
    let index = NeighborIndex::new(cloud.points().to_vec());
    let centroid = cloud.centroid();
    let mut normals = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let nbrs = index.knn(*p, k);
        let mut mean = [0.0; 3];
        for &(j, _) in &nbrs {
            let q = index.point(j);
            for a in 0..3 {
                mean[a] += q[a];
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let mut cov = Matrix3::<f64>::zeros();
        for &(j, _) in &nbrs {
            let d = sub(index.point(j), mean);
            for r in 0..3 {
                for c in 0..3 {
                    cov[(r, c)] += d[r] * d[c];
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let (mut smallest, mut val) = (0, eig.eigenvalues[0]);
        for i in 1..3 {
            if eig.eigenvalues[i] < val {
                val = eig.eigenvalues[i];
                smallest = i;
            }
        }
        let v = eig.eigenvectors.column(smallest);
        let len = v.norm();
        let mut nrm = [v[0] / len, v[1] / len, v[2] / len];
        if dot(nrm, sub(*p, centroid)) < 0.0 {
            nrm = [-nrm[0], -nrm[1], -nrm[2]];
        }
        normals.push(nrm);
    }
    Ok(normals)
}

/// Adds clipped i.i.d. Gaussian noise to every coordinate.
pub fn jitter(cloud: &PointCloud, sigma: f64, clip: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0 && clip >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "jitter sigma ({sigma}) and clip ({clip}) must be non-negative"
        )));
    }
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(PointCloud::from_trusted(
        cloud
            .points
            .iter()
            .map(|p| {
                let mut q = *p;
                for c in &mut q {
                    *c += normal.sample(&mut rng).clamp(-clip, clip);
                }
                q
            })
            .collect(),
    ))
}

/// Rotation about the z axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    PointCloud::from_trusted(
        cloud
            .points
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect(),
    )
}
