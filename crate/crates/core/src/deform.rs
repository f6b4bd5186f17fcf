//! Region deformations for the reconstruction pretext task.
//!
//! Each deformation picks a region `I` of a cloud and replaces the points in
//! it with draws from an isotropic Gaussian, returning the deformed cloud
//! together with the original and the region. Points outside `I` are copied
//! bit for bit.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{self, dot, estimate_normals, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};
use crate::spatial::NeighborIndex;

pub const DEFAULT_RELOCATE_SIGMA: f64 = 0.05;
pub const DEFAULT_SAMPLE_CAP: f64 = 0.5;
pub const DEFAULT_NORMAL_K: usize = 10;
/// Attempts before a sample-based deformation gives up on an empty region.
pub const MAX_SAMPLE_RETRIES: usize = 16;
/// Shape parameters of the split cutoff distribution.
pub const SPLIT_CUTOFF_BETA: (f64, f64) = (2.0, 5.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeformKind {
    /// `k x k x k` voxels over the bounding box; one non-empty voxel is
    /// resampled around its center.
    VoxelGrid { k: usize },
    /// Ball of radius `r` around a random point of the cloud.
    Sphere { r: f64 },
    /// `k_pts` nearest neighbours of a random point in the feature space of
    /// encoder layer `layer` (1-based).
    FeatureKnn { layer: usize, k_pts: usize },
    SampleSplit,
    SampleGradient,
    SampleLambertian,
    /// One of the three families, each with probability 1/3.
    Mixed {
        volume: Box<DeformKind>,
        feature: Box<DeformKind>,
        sample: Box<DeformKind>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScheme {
    Split,
    Gradient,
    Lambertian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Volume,
    Feature,
    Sample,
}

impl DeformKind {
    pub fn family(&self) -> Option<Family> {
        match self {
            DeformKind::VoxelGrid { .. } | DeformKind::Sphere { .. } => Some(Family::Volume),
            DeformKind::FeatureKnn { .. } => Some(Family::Feature),
            DeformKind::SampleSplit | DeformKind::SampleGradient | DeformKind::SampleLambertian => {
                Some(Family::Sample)
            }
            DeformKind::Mixed { .. } => None,
        }
    }

    /// Encoder layer whose features the deformation needs, if any.
    pub fn feature_layer(&self) -> Option<usize> {
        match self {
            DeformKind::FeatureKnn { layer, .. } => Some(*layer),
            DeformKind::Mixed { feature, .. } => feature.feature_layer(),
            _ => None,
        }
    }

    /// The three family defaults used by the combined strategy: 3x3x3
    /// voxels, 150 feature neighbours at layer 3, Lambertian sampling.
    pub fn mixed_default() -> Self {
        DeformKind::Mixed {
            volume: Box::new(DeformKind::VoxelGrid { k: 3 }),
            feature: Box::new(DeformKind::FeatureKnn { layer: 3, k_pts: 150 }),
            sample: Box::new(DeformKind::SampleLambertian),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformSpec {
    #[serde(flatten)]
    pub kind: DeformKind,
    #[serde(default = "default_sigma")]
    pub relocate_sigma: f64,
    #[serde(default = "default_cap")]
    pub sample_cap_fraction: f64,
    /// Neighbourhood size for normal estimation in Lambertian sampling.
    #[serde(default = "default_normal_k")]
    pub normal_k: usize,
}

fn default_sigma() -> f64 {
    DEFAULT_RELOCATE_SIGMA
}
fn default_cap() -> f64 {
    DEFAULT_SAMPLE_CAP
}
fn default_normal_k() -> usize {
    DEFAULT_NORMAL_K
}

impl DeformSpec {
    pub fn new(kind: DeformKind) -> Self {
        Self {
            kind,
            relocate_sigma: DEFAULT_RELOCATE_SIGMA,
            sample_cap_fraction: DEFAULT_SAMPLE_CAP,
            normal_k: DEFAULT_NORMAL_K,
        }
    }

    pub fn with_kind(&self, kind: DeformKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.relocate_sigma >= 0.0 && self.relocate_sigma.is_finite()) {
            return bad(format!("relocate_sigma must be finite and >= 0, got {}", self.relocate_sigma));
        }
        if !(self.sample_cap_fraction > 0.0 && self.sample_cap_fraction <= 1.0) {
            return bad(format!("sample_cap_fraction must lie in (0, 1], got {}", self.sample_cap_fraction));
        }
        if self.normal_k < 3 {
            return Err(Error::InsufficientNeighbors(self.normal_k));
        }
        validate_kind(&self.kind)
    }
}

fn validate_kind(kind: &DeformKind) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    match kind {
        // k = 1 is accepted as the whole-box degenerate case
        DeformKind::VoxelGrid { k } if *k == 0 => bad("voxel grid needs k >= 1".into()),
        DeformKind::Sphere { r } if !(*r > 0.0) => bad(format!("sphere radius must be > 0, got {r}")),
        DeformKind::FeatureKnn { layer, k_pts } if *layer == 0 || *k_pts == 0 => {
            bad("feature deformation needs layer >= 1 and k_pts >= 1".into())
        }
        DeformKind::Mixed { volume, feature, sample } => {
            for (sub, fam) in [(volume, Family::Volume), (feature, Family::Feature), (sample, Family::Sample)] {
                if sub.family() != Some(fam) {
                    return bad(format!("mixed strategy expects a {fam:?} deformation, got {sub:?}"));
                }
                validate_kind(sub)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// `(x̂, x, I, center)`: the deformed cloud, the original, the sorted region
/// indices and the center the relocated points were drawn around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformedPair {
    pub deformed: PointCloud,
    pub original: PointCloud,
    pub region_indices: Vec<usize>,
    pub region_center: Point3,
}

/// Per-point features (row-major `n x dim`) for feature-space selection.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Features<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        Self { data, dim }
    }

    fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn relocate(cloud: &PointCloud, region: Vec<usize>, center: Point3, sigma: f64, rng: &mut Rng) -> DeformedPair {
    debug_assert!(!region.is_empty());
    let mut pts = cloud.points().to_vec();
    for &i in &region {
        for a in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            pts[i][a] = center[a] + sigma * z;
        }
    }
    DeformedPair {
        deformed: PointCloud::from_trusted(pts),
        original: cloud.clone(),
        region_indices: region,
        region_center: center,
    }
}

/// Volume-based deformation on a `k x k x k` voxelisation of the bounding box.
/// The voxel is chosen uniformly among the non-empty ones.
pub fn deform_voxel(cloud: &PointCloud, k: usize, relocate_sigma: f64, seed: u64) -> Result<DeformedPair> {
    if k == 0 {
        return Err(Error::InvalidArgument("voxel grid needs k >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let (lo, hi) = cloud.bounds();
    let cell = |p: Point3, a: usize| -> usize {
        let ext = hi[a] - lo[a];
        if ext <= 0.0 {
            0
        } else {
            (((p[a] - lo[a]) / ext * k as f64) as usize).min(k - 1)
        }
    };
    let voxel_of: Vec<usize> = cloud
        .points()
        .iter()
        .map(|&p| (cell(p, 0) * k + cell(p, 1)) * k + cell(p, 2))
        .collect();
    let mut occupied = voxel_of.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let voxel = occupied[rng.random_range(0..occupied.len())];
    let region: Vec<usize> = (0..cloud.len()).filter(|&i| voxel_of[i] == voxel).collect();
    let (ix, iy, iz) = (voxel / (k * k), (voxel / k) % k, voxel % k);
    let center_of = |a: usize, i: usize| lo[a] + (i as f64 + 0.5) * (hi[a] - lo[a]) / k as f64;
    let center = [center_of(0, ix), center_of(1, iy), center_of(2, iz)];
    Ok(relocate(cloud, region, center, relocate_sigma, &mut rng))
}

/// Volume-based deformation of the ball of radius `r` around a random point.
pub fn deform_sphere(cloud: &PointCloud, r: f64, relocate_sigma: f64, seed: u64) -> Result<DeformedPair> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("sphere radius must be > 0, got {r}")));
    }
    let mut rng = seed::rng(seed);
    let p = cloud.points()[rng.random_range(0..cloud.len())];
    let index = NeighborIndex::new(cloud.points().to_vec());
    let region = index.within_radius(p, r);
    Ok(relocate(cloud, region, p, relocate_sigma, &mut rng))
}

/// Feature-based deformation: a random point and its `k_pts - 1` nearest
/// neighbours in feature space (`|I| = k_pts`), relocated around the origin.
pub fn deform_feature_knn(
    cloud: &PointCloud,
    features: Features<'_>,
    k_pts: usize,
    relocate_sigma: f64,
    seed: u64,
) -> Result<DeformedPair> {
    let n = cloud.len();
    if features.dim == 0 || features.data.len() != n * features.dim {
        return Err(Error::DimensionMismatch {
            what: "feature rows",
            expected: n,
            found: features.rows(),
        });
    }
    if k_pts == 0 || k_pts >= n.max(2) {
        return Err(Error::InvalidArgument(format!(
            "k_pts must satisfy 1 <= k_pts < n ({k_pts} vs {n})"
        )));
    }
    let mut rng = seed::rng(seed);
    let anchor = rng.random_range(0..n);
    let f0 = features.row(anchor);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != anchor)
        .map(|i| {
            let d: f64 = features.row(i).iter().zip(f0).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    let take = k_pts - 1;
    if take > 0 && take < scored.len() {
        scored.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    let mut region: Vec<usize> = std::iter::once(anchor)
        .chain(scored.into_iter().take(take).map(|(_, i)| i))
        .collect();
    region.sort_unstable();
    Ok(relocate(cloud, region, [0.0; 3], relocate_sigma, &mut rng))
}

fn random_unit(rng: &mut Rng) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let len = cloud::norm(v);
        if len > 1e-12 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

fn select_split(cloud: &PointCloud, rng: &mut Rng) -> Vec<usize> {
    let dir = random_unit(rng);
    let c = cloud.centroid();
    let proj: Vec<f64> = cloud.points().iter().map(|p| dot(cloud::sub(*p, c), dir)).collect();
    let (lo, hi) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (a, b) = SPLIT_CUTOFF_BETA;
    let cutoff: f64 = Beta::new(a, b).expect("valid beta").sample(rng);
    let plane = lo + cutoff * (hi - lo);
    let below: Vec<usize> = (0..proj.len()).filter(|&i| proj[i] < plane).collect();
    let above: Vec<usize> = (0..proj.len()).filter(|&i| proj[i] >= plane).collect();
    let (small, large) = if below.len() <= above.len() { (below, above) } else { (above, below) };
    let keep_p: f64 = rng.random();
    let mut region = small;
    region.extend(large.into_iter().filter(|_| rng.random::<f64>() < keep_p));
    region.sort_unstable();
    region
}

fn select_gradient(cloud: &PointCloud, rng: &mut Rng) -> Vec<usize> {
    let (lo, hi) = cloud.bounds();
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    let ext = hi[axis] - lo[axis];
    let ascending = rng.random_bool(0.5);
    (0..cloud.len())
        .filter(|&i| {
            let t = if ext > 0.0 { (cloud.points()[i][axis] - lo[axis]) / ext } else { 0.5 };
            let p = if ascending { t } else { 1.0 - t };
            rng.random::<f64>() < p
        })
        .collect()
}

fn select_lambertian(normals: &[Point3], view: Point3, rng: &mut Rng) -> Vec<usize> {
    (0..normals.len())
        .filter(|&i| {
            let p = dot(normals[i], view).max(0.0);
            rng.random::<f64>() < p
        })
        .collect()
}

/// Largest admissible sample-based region.
pub fn sample_cap(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Sample-based deformation. Lambertian selection estimates normals with
/// `normal_k` neighbours when none are supplied. Regions larger than the cap
/// are subsampled uniformly; an empty region is redrawn with a fresh seed.
#[allow(clippy::too_many_arguments)]
pub fn deform_sample(
    cloud: &PointCloud,
    scheme: SampleScheme,
    sample_cap_fraction: f64,
    relocate_sigma: f64,
    seed: u64,
    normals: Option<&[Point3]>,
    normal_k: usize,
) -> Result<DeformedPair> {
    if !(sample_cap_fraction > 0.0 && sample_cap_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample_cap_fraction must lie in (0, 1], got {sample_cap_fraction}"
        )));
    }
    let owned;
    let normals = match (scheme, normals) {
        (SampleScheme::Lambertian, None) => {
            owned = estimate_normals(cloud, normal_k.min(cloud.len()))?;
            Some(owned.as_slice())
        }
        (_, n) => n,
    };
    if let Some(nrm) = normals {
        if nrm.len() != cloud.len() {
            return Err(Error::DimensionMismatch {
                what: "normals",
                expected: cloud.len(),
                found: nrm.len(),
            });
        }
    }
    let cap = sample_cap(cloud.len(), sample_cap_fraction);
    for attempt in 0..MAX_SAMPLE_RETRIES {
        let mut rng = seed::rng(if attempt == 0 {
            seed
        } else {
            seed::derive(seed, &[stream::RETRY, attempt as u64])
        });
        let mut region = match scheme {
            SampleScheme::Split => select_split(cloud, &mut rng),
            SampleScheme::Gradient => select_gradient(cloud, &mut rng),
            SampleScheme::Lambertian => {
                let view = random_unit(&mut rng);
                select_lambertian(normals.expect("normals resolved above"), view, &mut rng)
            }
        };
        if region.is_empty() {
            continue;
        }
        if region.len() > cap {
            let mut keep: Vec<usize> = index::sample(&mut rng, region.len(), cap)
                .into_iter()
                .map(|j| region[j])
                .collect();
            keep.sort_unstable();
            region = keep;
        }
        return Ok(relocate(cloud, region, [0.0; 3], relocate_sigma, &mut rng));
    }
    Err(Error::DegenerateSampling(MAX_SAMPLE_RETRIES))
}

/// Draws one of the three families with probability 1/3 each.
pub fn choose_family(seed: u64) -> Family {
    match seed::rng(seed).random_range(0..3) {
        0 => Family::Volume,
        1 => Family::Feature,
        _ => Family::Sample,
    }
}

/// The combined strategy: choose a family from `seed` and apply that
/// family's configured variant. Returns the chosen family with the pair.
pub fn deform_mixed(
    cloud: &PointCloud,
    spec: &DeformSpec,
    features: Option<Features<'_>>,
    seed: u64,
) -> Result<(Family, DeformedPair)> {
    let DeformKind::Mixed { volume, feature, sample } = &spec.kind else {
        return Err(Error::InvalidArgument("deform_mixed requires a mixed spec".into()));
    };
    let family = choose_family(seed::derive(seed, &[stream::FAMILY]));
    let kind = match family {
        Family::Volume => volume,
        Family::Feature => feature,
        Family::Sample => sample,
    };
    let pair = deform(cloud, &spec.with_kind((**kind).clone()), features, seed)?;
    Ok((family, pair))
}

/// Applies `spec` to `cloud`. Feature-based selection falls back to raw
/// coordinates when no features are supplied.
pub fn deform(cloud: &PointCloud, spec: &DeformSpec, features: Option<Features<'_>>, seed: u64) -> Result<DeformedPair> {
    let sigma = spec.relocate_sigma;
    match &spec.kind {
        DeformKind::VoxelGrid { k } => deform_voxel(cloud, *k, sigma, seed),
        DeformKind::Sphere { r } => deform_sphere(cloud, *r, sigma, seed),
        DeformKind::FeatureKnn { k_pts, .. } => {
            let flat;
            let feats = match features {
                Some(f) => f,
                None => {
                    flat = cloud.to_flat();
                    Features::new(&flat, 3)
                }
            };
            // clamp so small clouds still leave one point untouched
            let k = (*k_pts).min(cloud.len().saturating_sub(1)).max(1);
            deform_feature_knn(cloud, feats, k, sigma, seed)
        }
        DeformKind::SampleSplit => deform_sample(cloud, SampleScheme::Split, spec.sample_cap_fraction, sigma, seed, None, spec.normal_k),
        DeformKind::SampleGradient => deform_sample(cloud, SampleScheme::Gradient, spec.sample_cap_fraction, sigma, seed, None, spec.normal_k),
        DeformKind::SampleLambertian => deform_sample(cloud, SampleScheme::Lambertian, spec.sample_cap_fraction, sigma, seed, None, spec.normal_k),
        DeformKind::Mixed { .. } => deform_mixed(cloud, spec, features, seed).map(|(_, p)| p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize_unit_cube;

    fn random_cloud(n: usize, seed_: u64) -> PointCloud {
        let mut rng = seed::rng(seed_);
        let pts = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3)])
            .collect();
        normalize_unit_cube(&PointCloud::new(pts).unwrap())
    }

    fn check_pair(pair: &DeformedPair, cloud: &PointCloud) {
        assert_eq!(pair.deformed.len(), cloud.len());
        assert_eq!(&pair.original, cloud);
        assert!(!pair.region_indices.is_empty());
        let mut in_region = vec![false; cloud.len()];
        for &i in &pair.region_indices {
            in_region[i] = true;
        }
        for i in 0..cloud.len() {
            if !in_region[i] {
                assert_eq!(
                    pair.deformed.points()[i].map(f64::to_bits),
                    cloud.points()[i].map(f64::to_bits)
                );
            }
        }
    }

    #[test]
    fn voxel_k1_takes_everything() {
        let c = random_cloud(100, 1);
        let pair = deform_voxel(&c, 1, 0.05, 3).unwrap();
        assert_eq!(pair.region_indices, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn voxel_zero_sigma_collapses_to_center() {
        let c = random_cloud(200, 2);
        let pair = deform_voxel(&c, 3, 0.0, 9).unwrap();
        check_pair(&pair, &c);
        for &i in &pair.region_indices {
            assert_eq!(pair.deformed.points()[i], pair.region_center);
        }
    }

    #[test]
    fn voxel_cloud_in_single_voxel() {
        // all points but one share a voxel; the outlier stretches the box
        let mut pts = vec![[0.0, 0.0, 0.0]; 10];
        pts.push([1.0, 1.0, 1.0]);
        let c = PointCloud::new(pts).unwrap();
        let mut seen_big = false;
        for s in 0..20 {
            let pair = deform_voxel(&c, 3, 0.05, s).unwrap();
            check_pair(&pair, &c);
            seen_big |= pair.region_indices.len() == 10;
        }
        assert!(seen_big);
        let single = PointCloud::new(vec![[0.2, 0.2, 0.2]; 5]).unwrap();
        assert_eq!(deform_voxel(&single, 3, 0.05, 0).unwrap().region_indices.len(), 5);
    }

    #[test]
    fn sphere_covering_everything() {
        let c = random_cloud(64, 3);
        let pair = deform_sphere(&c, 2.0, 0.05, 1).unwrap();
        assert_eq!(pair.region_indices.len(), 64);
        assert!(c.points().contains(&pair.region_center));
    }

    #[test]
    fn feature_knn_region_size_and_reduction() {
        let c = random_cloud(120, 4);
        let flat = c.to_flat();
        for k in [1, 5, 37, 119] {
            let pair = deform_feature_knn(&c, Features::new(&flat, 3), k, 0.05, 11).unwrap();
            assert_eq!(pair.region_indices.len(), k);
            check_pair(&pair, &c);
        }
        // with coordinates as features the region equals an input-space kNN
        let pair = deform_feature_knn(&c, Features::new(&flat, 3), 20, 0.05, 11).unwrap();
        let anchor = seed::rng(11).random_range(0..120);
        let index = NeighborIndex::new(c.points().to_vec());
        let mut expect: Vec<usize> = index.knn(c.points()[anchor], 20).into_iter().map(|x| x.0).collect();
        expect.sort_unstable();
        assert_eq!(pair.region_indices, expect);
        assert_eq!(pair.region_center, [0.0; 3]);
    }

    #[test]
    fn feature_knn_dimension_mismatch() {
        let c = random_cloud(10, 4);
        let feats = vec![0.0; 27];
        assert!(matches!(
            deform_feature_knn(&c, Features::new(&feats, 3), 3, 0.05, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lambertian_on_plane_all_equally_eligible() {
        let mut pts = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                pts.push([i as f64 / 15.0, j as f64 / 15.0, 0.0]);
            }
        }
        let normals = vec![[0.0, 0.0, 1.0]; pts.len()];
        let mut rng = seed::rng(0);
        let sel = select_lambertian(&normals, [0.0, 0.0, 1.0], &mut rng);
        // probability 1 for every point
        assert_eq!(sel.len(), pts.len());
        let sel = select_lambertian(&normals, [0.0, 0.0, -1.0], &mut rng);
        assert!(sel.is_empty());
    }

    #[test]
    fn sample_cap_holds() {
        let c = random_cloud(1024, 5);
        for s in 0..30 {
            for scheme in [SampleScheme::Split, SampleScheme::Gradient, SampleScheme::Lambertian] {
                let pair = deform_sample(&c, scheme, 0.5, 0.05, s, None, 10).unwrap();
                assert!(pair.region_indices.len() <= 512);
                check_pair(&pair, &c);
            }
        }
    }

    #[test]
    fn degenerate_sampling_errors() {
        // every normal faces away from any view with positive weight only in
        // an empty set: zero normals give zero probability everywhere
        let c = random_cloud(20, 6);
        let normals = vec![[0.0; 3]; 20];
        let err = deform_sample(&c, SampleScheme::Lambertian, 0.5, 0.05, 0, Some(&normals), 10).unwrap_err();
        assert!(err.to_string().starts_with("degenerate sampling"));
    }

    #[test]
    fn mixed_is_deterministic_and_valid() {
        let c = random_cloud(256, 7);
        let spec = DeformSpec::new(DeformKind::mixed_default());
        spec.validate().unwrap();
        for s in 0..10 {
            let a = deform_mixed(&c, &spec, None, s).unwrap();
            let b = deform_mixed(&c, &spec, None, s).unwrap();
            assert_eq!(a, b);
            check_pair(&a.1, &c);
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = DeformSpec::new(DeformKind::Sphere { r: 0.2 });
        let js = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<DeformSpec>(&js).unwrap(), spec);
        let parsed: DeformSpec = serde_json::from_str(r#"{"kind":"voxel_grid","k":3}"#).unwrap();
        assert_eq!(parsed.kind, DeformKind::VoxelGrid { k: 3 });
        assert_eq!(parsed.relocate_sigma, DEFAULT_RELOCATE_SIGMA);
    }

    #[test]
    fn validate_rejects_bad_specs() {
        assert!(DeformSpec::new(DeformKind::Sphere { r: 0.0 }).validate().is_err());
        let mut s = DeformSpec::new(DeformKind::VoxelGrid { k: 3 });
        s.sample_cap_fraction = 0.0;
        assert!(s.validate().is_err());
        let wrong = DeformKind::Mixed {
            volume: Box::new(DeformKind::SampleSplit),
            feature: Box::new(DeformKind::FeatureKnn { layer: 1, k_pts: 5 }),
            sample: Box::new(DeformKind::SampleGradient),
        };
        assert!(DeformSpec::new(wrong).validate().is_err());
    }
}
