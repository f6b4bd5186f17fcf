//! Synthetic sim-to-real benchmark.
//!
//! Source clouds are clean, uniformly sampled surfaces of randomised
//! primitives. Target clouds come from the same generators but are
//! scanned: part of the surface is removed by a sample-based occlusion,
//! coordinates get sensor noise, and the survivors are resampled randomly
//! rather than uniformly.

use std::f64::consts::{PI, TAU};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{farthest_point_sample, normalize_unit_cube, rotate_z, LabeledCloud, Point3, PointCloud, SegLabeledCloud};
use crate::deform::{deform_sample, SampleScheme, DEFAULT_NORMAL_K};
use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Box,
    Cylinder,
    Cone,
    Torus,
    Ellipsoid,
    Pyramid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A labelled collection with a split assignment per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub name: String,
    pub samples: Vec<T>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl<T: Clone> Dataset<T> {
    pub fn subset(&self, split: Split) -> Vec<T> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(x, _)| x.clone())
            .collect()
    }
}

/// How target clouds are scanned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    /// Occlusion schemes, one drawn uniformly per cloud.
    pub occlusion: Vec<SampleScheme>,
    /// Largest fraction of the dense surface an occlusion may remove.
    pub occlusion_fraction: f64,
    /// Isotropic Gaussian noise added to surviving points (before
    /// normalisation).
    pub noise_sigma: f64,
    /// Survivors are first subsampled at random to `sparse_ratio * n`
    /// points, then reduced to `n` by farthest point sampling.
    pub sparse_ratio: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            occlusion: vec![SampleScheme::Lambertian, SampleScheme::Split],
            occlusion_fraction: 0.5,
            noise_sigma: 0.01,
            sparse_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub classes: Vec<Primitive>,
    /// Training clouds per domain (classes assigned round-robin).
    pub train_count: usize,
    /// Held-out test clouds per domain.
    pub test_count: usize,
    pub n_points: usize,
    /// Surface samples drawn before corruption and resampling.
    pub dense_points: usize,
    pub corruption: Corruption,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            classes: vec![Primitive::Box, Primitive::Cone, Primitive::Torus],
            train_count: 200,
            test_count: 300,
            n_points: 256,
            dense_points: 2048,
            corruption: Corruption {
                occlusion: vec![SampleScheme::Split],
                occlusion_fraction: 0.85,
                noise_sigma: 0.08,
                sparse_ratio: 1.0,
            },
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes.len() < 2 {
            return bad("benchmark needs at least two classes".into());
        }
        if self.n_points == 0 || self.train_count == 0 {
            return bad("n_points and train_count must be positive".into());
        }
        self.corruption.validate(self.n_points, self.dense_points)
    }
}

impl Corruption {
    fn validate(&self, n: usize, dense: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return bad(format!("occlusion_fraction must lie in [0, 1), got {}", self.occlusion_fraction));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(self.sparse_ratio >= 1.0) {
            return bad("sparse_ratio must be >= 1".into());
        }
        let survivors = dense - (self.occlusion_fraction * dense as f64).ceil() as usize;
        if survivors < (self.sparse_ratio * n as f64).ceil() as usize {
            return bad(format!(
                "{dense} dense points leave {survivors} after occlusion, fewer than the {} needed",
                (self.sparse_ratio * n as f64).ceil()
            ));
        }
        Ok(())
    }
}

/// Points with outward normals and part ids.
struct Surface {
    points: Vec<Point3>,
    normals: Vec<Point3>,
    parts: Vec<usize>,
}

impl Surface {
    fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            normals: Vec::with_capacity(n),
            parts: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, p: Point3, nrm: Point3, part: usize) {
        self.points.push(p);
        self.normals.push(nrm);
        self.parts.push(part);
    }
}

fn unit(v: Point3) -> Point3 {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / l, v[1] / l, v[2] / l]
}

/// Picks a face index with probability proportional to `areas`.
fn pick(areas: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

fn sample_box(s: &mut Surface, half: Point3, offset: Point3, part: usize, count: usize, rng: &mut Rng) {
    let [a, b, c] = half;
    let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
    for _ in 0..count {
        let f = pick(&areas, rng);
        let axis = f / 2;
        let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        for (k, h) in half.iter().enumerate() {
            p[k] = if k == axis { sign * h } else { rng.random_range(-h..*h) };
        }
        let mut nrm = [0.0; 3];
        nrm[axis] = sign;
        s.push([p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]], nrm, part);
    }
}

/// Frustum with bottom radius `r0` at `z0` and top radius `r1` at `z0 + h`,
/// with optional caps.
#[allow(clippy::too_many_arguments)]
fn sample_frustum(s: &mut Surface, r0: f64, r1: f64, z0: f64, h: f64, caps: (bool, bool), part: usize, count: usize, rng: &mut Rng) {
    let slant = ((r0 - r1).powi(2) + h * h).sqrt();
    let areas = [
        PI * (r0 + r1) * slant,
        if caps.0 { PI * r0 * r0 } else { 0.0 },
        if caps.1 { PI * r1 * r1 } else { 0.0 },
    ];
    for _ in 0..count {
        let th = rng.random_range(0.0..TAU);
        let (sn, cs) = th.sin_cos();
        match pick(&areas, rng) {
            0 => {
                // radius varies linearly, so weight heights by local radius
                let t = loop {
                    let t: f64 = rng.random();
                    let r = r0 + (r1 - r0) * t;
                    if rng.random::<f64>() * r0.max(r1) <= r {
                        break t;
                    }
                };
                let r = r0 + (r1 - r0) * t;
                let nrm = unit([h * cs, h * sn, r0 - r1]);
                s.push([r * cs, r * sn, z0 + t * h], nrm, part);
            }
            face => {
                let (r, z, nz) = if face == 1 { (r0, z0, -1.0) } else { (r1, z0 + h, 1.0) };
                let rr = r * rng.random::<f64>().sqrt();
                s.push([rr * cs, rr * sn, z], [0.0, 0.0, nz], part);
            }
        }
    }
}

fn sample_ellipsoid(s: &mut Surface, axes: Point3, offset: Point3, part: usize, count: usize, rng: &mut Rng) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..count {
        let d = unit([normal.sample(rng), normal.sample(rng), normal.sample(rng)]);
        let p = [d[0] * axes[0], d[1] * axes[1], d[2] * axes[2]];
        let nrm = unit([d[0] / axes[0], d[1] / axes[1], d[2] / axes[2]]);
        s.push([p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]], nrm, part);
    }
}

fn sample_torus(s: &mut Surface, big: f64, small: f64, count: usize, rng: &mut Rng) {
    for _ in 0..count {
        let u = rng.random_range(0.0..TAU);
        let v = loop {
            let v = rng.random_range(0.0..TAU);
            if rng.random::<f64>() * (big + small) <= big + small * v.cos() {
                break v;
            }
        };
        let (su, cu) = u.sin_cos();
        let (sv, cv) = v.sin_cos();
        let ring = big + small * cv;
        s.push([ring * cu, ring * su, small * sv], [cv * cu, cv * su, sv], 0);
    }
}

fn sample_pyramid(s: &mut Surface, half: f64, h: f64, count: usize, rng: &mut Rng) {
    // square base at z = 0, apex at (0, 0, h)
    let slant = (half * half + h * h).sqrt();
    let areas = [half * slant * 2.0, half * slant * 2.0, half * slant * 2.0, half * slant * 2.0, 4.0 * half * half];
    let base = [[half, half], [-half, half], [-half, -half], [half, -half]];
    for _ in 0..count {
        let f = pick(&areas, rng);
        if f == 4 {
            s.push([rng.random_range(-half..half), rng.random_range(-half..half), 0.0], [0.0, 0.0, -1.0], 0);
            continue;
        }
        let (a, b) = (base[f], base[(f + 1) % 4]);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = [a[0] * (1.0 - u - v) + b[0] * u, a[1] * (1.0 - u - v) + b[1] * u, h * v];
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let nrm = unit([mid[0] * h / half, mid[1] * h / half, half]);
        s.push(p, nrm, 0);
    }
}

fn primitive_surface(kind: Primitive, count: usize, rng: &mut Rng) -> Surface {
    let mut s = Surface::with_capacity(count);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match kind {
        Primitive::Box => {
            let half = [u(0.25, 0.5), u(0.25, 0.5), u(0.2, 0.5)];
            sample_box(&mut s, half, [0.0; 3], 0, count, rng);
        }
        Primitive::Cylinder => {
            let (r, h) = (u(0.2, 0.45), u(0.5, 1.1));
            sample_frustum(&mut s, r, r, -h / 2.0, h, (true, true), 0, count, rng);
        }
        Primitive::Cone => {
            let (r, h) = (u(0.25, 0.5), u(0.5, 1.1));
            sample_frustum(&mut s, r, 0.0, -h / 2.0, h, (true, false), 0, count, rng);
        }
        Primitive::Torus => {
            let (big, small) = (u(0.35, 0.55), u(0.08, 0.2));
            sample_torus(&mut s, big, small, count, rng);
        }
        Primitive::Ellipsoid => {
            let axes = [u(0.25, 0.5), u(0.25, 0.5), u(0.25, 0.5)];
            sample_ellipsoid(&mut s, axes, [0.0; 3], 0, count, rng);
        }
        Primitive::Pyramid => {
            let (half, h) = (u(0.25, 0.5), u(0.5, 1.0));
            sample_pyramid(&mut s, half, h, count, rng);
        }
    }
    s
}

/// Number of parts of the segmentation objects.
pub const SEGMENTATION_PARTS: usize = 4;

/// A lamp-like object of four stacked parts: base, stem, shade, finial.
fn part_object_surface(count: usize, rng: &mut Rng) -> Surface {
    let mut s = Surface::with_capacity(count);
    let base_h = rng.random_range(0.05..0.15);
    let base_r = rng.random_range(0.25..0.45);
    let stem_r = rng.random_range(0.04..0.08);
    let stem_h = rng.random_range(0.4..0.8);
    let shade_r0 = rng.random_range(0.3..0.5);
    let shade_r1 = rng.random_range(0.1..0.25);
    let shade_h = rng.random_range(0.25..0.45);
    let top_r = rng.random_range(0.06..0.12);
    let square_base = rng.random_bool(0.5);

    let stem_area = TAU * stem_r * stem_h;
    let base_area = if square_base { 8.0 * base_r * base_r } else { 2.0 * PI * base_r * base_r };
    let shade_area = PI * (shade_r0 + shade_r1) * ((shade_r0 - shade_r1).powi(2) + shade_h * shade_h).sqrt();
    let top_area = 4.0 * PI * top_r * top_r;
    let areas = [base_area, stem_area, shade_area, top_area];
    let mut counts = [0usize; 4];
    for _ in 0..count {
        counts[pick(&areas, rng)] += 1;
    }
    let z_stem = base_h;
    let z_shade = base_h + stem_h;
    if square_base {
        sample_box(&mut s, [base_r, base_r, base_h / 2.0], [0.0, 0.0, base_h / 2.0], 0, counts[0], rng);
    } else {
        sample_frustum(&mut s, base_r, base_r, 0.0, base_h, (true, true), 0, counts[0], rng);
    }
    sample_frustum(&mut s, stem_r, stem_r, z_stem, stem_h, (false, false), 1, counts[1], rng);
    sample_frustum(&mut s, shade_r0, shade_r1, z_shade, shade_h, (false, false), 2, counts[2], rng);
    sample_ellipsoid(&mut s, [top_r; 3], [0.0, 0.0, z_shade + shade_h + top_r], 3, counts[3], rng);
    s
}

/// Turns a dense surface into an `n`-point cloud (with part labels), either
/// clean (uniform FPS) or scanned (occluded, noisy, randomly resampled).
fn finish(surface: Surface, n: usize, corruption: Option<&Corruption>, seed_: u64) -> Result<(PointCloud, Vec<usize>)> {
    let Surface { points, normals, parts } = surface;
    let angle = seed::rng(seed::derive(seed_, &[0])).random_range(0.0..TAU);
    let dense = rotate_z(&PointCloud::new(points)?, angle);
    let normals: Vec<Point3> = rotate_z(&PointCloud::new(normals)?, angle).into_points();

    let Some(c) = corruption else {
        let idx = farthest_point_sample(&dense, n, seed::derive(seed_, &[1]))?;
        let cloud = normalize_unit_cube(&dense.select(&idx)?);
        return Ok((cloud, idx.iter().map(|&i| parts[i]).collect()));
    };

    let mut rng = seed::rng(seed::derive(seed_, &[stream::CORRUPT]));
    let mut keep: Vec<usize> = (0..dense.len()).collect();
    if !c.occlusion.is_empty() && c.occlusion_fraction > 0.0 {
        let scheme = c.occlusion[rng.random_range(0..c.occlusion.len())];
        let pair = deform_sample(&dense, scheme, c.occlusion_fraction, 0.0, rng.random(), Some(&normals), DEFAULT_NORMAL_K)?;
        let mut occluded = vec![false; dense.len()];
        for &i in &pair.region_indices {
            occluded[i] = true;
        }
        keep.retain(|&i| !occluded[i]);
    }
    let sparse = ((c.sparse_ratio * n as f64).ceil() as usize).min(keep.len());
    if sparse < n {
        return Err(Error::SampleSizeExceedsCloud { requested: n, available: sparse });
    }
    let chosen: Vec<usize> = index::sample(&mut rng, keep.len(), sparse).into_iter().map(|j| keep[j]).collect();
    let noise = Normal::new(0.0, c.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noisy: Vec<Point3> = chosen
        .iter()
        .map(|&i| {
            let p = dense.points()[i];
            if c.noise_sigma > 0.0 {
                [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng), p[2] + noise.sample(&mut rng)]
            } else {
                p
            }
        })
        .collect();
    let sparse_cloud = PointCloud::new(noisy)?;
    let idx = farthest_point_sample(&sparse_cloud, n, rng.random())?;
    let cloud = normalize_unit_cube(&sparse_cloud.select(&idx)?);
    Ok((cloud, idx.iter().map(|&j| parts[chosen[j]]).collect()))
}

fn domain_seed(seed_: u64, domain: u64, i: usize) -> u64 {
    seed::derive(seed_, &[stream::GENERATE, domain, i as u64])
}

/// Generates the `(source, target)` classification datasets. Sample `i` of
/// each domain has class `i mod C`; the first `train_count` samples are the
/// training split, the rest the test split.
pub fn gen_benchmark(spec: &BenchSpec, seed_: u64) -> Result<(Dataset<LabeledCloud>, Dataset<LabeledCloud>)> {
    spec.validate()?;
    let total = spec.train_count + spec.test_count;
    let c = spec.classes.len();
    let make = |domain: u64, corrupt: Option<&Corruption>| -> Result<Dataset<LabeledCloud>> {
        let samples = (0..total)
            .map(|i| {
                let s = domain_seed(seed_, domain, i);
                let label = i % c;
                let surface = primitive_surface(spec.classes[label], spec.dense_points, &mut seed::rng(s));
                let (cloud, _) = finish(surface, spec.n_points, corrupt, s)?;
                Ok(LabeledCloud { cloud, label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: if corrupt.is_some() { "synthetic-target" } else { "synthetic-source" }.to_string(),
            samples,
            splits: (0..total).map(|i| if i < spec.train_count { Split::Train } else { Split::Test }).collect(),
            num_classes: c,
        })
    };
    Ok((make(0, None)?, make(1, Some(&spec.corruption))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegBenchSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub n_points: usize,
    pub dense_points: usize,
    pub corruption: Corruption,
}

impl Default for SegBenchSpec {
    fn default() -> Self {
        Self {
            train_count: 96,
            test_count: 64,
            n_points: 256,
            dense_points: 2048,
            corruption: BenchSpec::default().corruption,
        }
    }
}

/// Four-part segmentation benchmark with the same domain gap.
pub fn gen_segmentation_benchmark(spec: &SegBenchSpec, seed_: u64) -> Result<(Dataset<SegLabeledCloud>, Dataset<SegLabeledCloud>)> {
    if spec.n_points == 0 || spec.train_count == 0 {
        return Err(Error::InvalidArgument("n_points and train_count must be positive".into()));
    }
    spec.corruption.validate(spec.n_points, spec.dense_points)?;
    let total = spec.train_count + spec.test_count;
    let make = |domain: u64, corrupt: Option<&Corruption>| -> Result<Dataset<SegLabeledCloud>> {
        let samples = (0..total)
            .map(|i| {
                let s = domain_seed(seed_, domain + 2, i);
                let surface = part_object_surface(spec.dense_points, &mut seed::rng(s));
                let (cloud, labels) = finish(surface, spec.n_points, corrupt, s)?;
                SegLabeledCloud::new(cloud, labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: if corrupt.is_some() { "synthetic-parts-target" } else { "synthetic-parts-source" }.to_string(),
            samples,
            splits: (0..total).map(|i| if i < spec.train_count { Split::Train } else { Split::Test }).collect(),
            num_classes: SEGMENTATION_PARTS,
        })
    };
    Ok((make(0, None)?, make(1, Some(&spec.corruption))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chamfer::chamfer_distance;

    fn small() -> BenchSpec {
        BenchSpec {
            classes: vec![Primitive::Box, Primitive::Cylinder, Primitive::Cone, Primitive::Torus, Primitive::Ellipsoid, Primitive::Pyramid],
            train_count: 12,
            test_count: 6,
            n_points: 64,
            dense_points: 256,
            corruption: Corruption::default(),
        }
    }

    #[test]
    fn shapes_classes_and_sizes() {
        let (src, tgt) = gen_benchmark(&small(), 1).unwrap();
        assert_eq!(src.num_classes, tgt.num_classes);
        assert_eq!(src.samples.len(), 18);
        for s in src.samples.iter().chain(&tgt.samples) {
            assert_eq!(s.cloud.len(), 64);
            let (lo, hi) = s.cloud.bounds();
            let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
            assert!((ext - 1.0).abs() < 1e-12);
            assert!(lo.iter().chain(&hi).all(|v| v.abs() <= 0.5 + 1e-12));
        }
        let labels: Vec<usize> = src.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, tgt.samples.iter().map(|s| s.label).collect::<Vec<_>>());
        assert_eq!(src.subset(Split::Train).len(), 12);
        assert_eq!(src.subset(Split::Test).len(), 6);
    }

    #[test]
    fn targets_differ_from_every_source() {
        let (src, tgt) = gen_benchmark(&small(), 2).unwrap();
        for t in &tgt.samples {
            let min = src
                .samples
                .iter()
                .map(|s| chamfer_distance(t.cloud.points(), s.cloud.points()).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(min > 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_benchmark(&small(), 3).unwrap();
        let b = gen_benchmark(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_benchmark(&small(), 4).unwrap();
        assert_ne!(a.0.samples[0], c.0.samples[0]);
    }

    #[test]
    fn surface_normals_are_outward_units() {
        let mut rng = seed::rng(5);
        for kind in small().classes {
            let s = primitive_surface(kind, 500, &mut rng);
            let cloud = PointCloud::new(s.points.clone()).unwrap();
            let c = cloud.centroid();
            let outward = s
                .points
                .iter()
                .zip(&s.normals)
                .filter(|(p, nrm)| {
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    d[0] * nrm[0] + d[1] * nrm[1] + d[2] * nrm[2] >= 0.0
                })
                .count();
            // the inner half of a torus faces its axis
            if kind != Primitive::Torus {
                assert!(outward as f64 > 0.75 * 500.0, "{kind:?}: {outward}");
            }
            assert!(s.normals.iter().all(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn segmentation_benchmark_has_four_parts() {
        let spec = SegBenchSpec {
            train_count: 4,
            test_count: 2,
            n_points: 128,
            dense_points: 512,
            corruption: Corruption::default(),
        };
        let (src, tgt) = gen_segmentation_benchmark(&spec, 6).unwrap();
        for s in src.samples.iter().chain(&tgt.samples) {
            assert_eq!(s.labels.len(), 128);
            assert!(s.labels.iter().all(|&l| l < SEGMENTATION_PARTS));
        }
        for s in &src.samples {
            for part in 0..SEGMENTATION_PARTS {
                assert!(s.labels.contains(&part));
            }
        }
    }

    #[test]
    fn insufficient_dense_points_rejected() {
        let spec = BenchSpec {
            dense_points: 100,
            ..small()
        };
        assert!(gen_benchmark(&spec, 1).is_err());
    }
}
