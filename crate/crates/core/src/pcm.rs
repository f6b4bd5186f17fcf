//! Point cloud mixup.
//!
//! A mixed cloud takes `m = round(γ n)` points sampled without replacement
//! from the first cloud and `n - m` from the second. The label weight is the
//! realised fraction `m / n`, so geometry and label always agree.

use rand::seq::index;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::cloud::{LabeledCloud, Point3, PointCloud, SegLabeledCloud};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixedLabel {
    /// Convex combination of the two one-hot labels.
    Soft(Vec<f64>),
    /// Each point keeps the label it had in its source cloud.
    PerPoint(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSample {
    pub cloud: PointCloud,
    pub label: MixedLabel,
    /// Realised mixing fraction `m / n`.
    pub gamma: f64,
    /// Number of points taken from the first cloud; they come first.
    pub from_first: usize,
    /// Indices into the first and second input clouds, in output order.
    pub picked: (Vec<usize>, Vec<usize>),
}

impl MixedSample {
    pub fn soft_label(&self) -> Option<&[f64]> {
        match &self.label {
            MixedLabel::Soft(v) => Some(v),
            MixedLabel::PerPoint(_) => None,
        }
    }

    pub fn point_labels(&self) -> Option<&[usize]> {
        match &self.label {
            MixedLabel::PerPoint(v) => Some(v),
            MixedLabel::Soft(_) => None,
        }
    }
}

pub fn sample_gamma(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Beta::new(alpha, beta).map_err(|e| Error::InvalidArgument(format!("mixup Beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Picks `m = round(gamma n)` indices of `a` and `n - m` of `b`.
fn split_indices(n: usize, gamma: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let m = ((gamma.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let from_a = index::sample(rng, n, m).into_vec();
    let from_b = index::sample(rng, n, n - m).into_vec();
    (from_a, from_b)
}

fn gather(a: &[Point3], ia: &[usize], b: &[Point3], ib: &[usize]) -> PointCloud {
    PointCloud::from_trusted(ia.iter().map(|&i| a[i]).chain(ib.iter().map(|&i| b[i])).collect())
}

fn check_sizes(na: usize, nb: usize) -> Result<()> {
    if na != nb {
        return Err(Error::DimensionMismatch {
            what: "mixup clouds",
            expected: na,
            found: nb,
        });
    }
    Ok(())
}

/// Classification mixup with an explicit coefficient.
pub fn pcm_classify_with_gamma(a: &LabeledCloud, b: &LabeledCloud, num_classes: usize, gamma: f64, rng: &mut Rng) -> Result<MixedSample> {
    let n = a.cloud.len();
    check_sizes(n, b.cloud.len())?;
    for l in [a.label, b.label] {
        if l >= num_classes {
            return Err(Error::UnknownClass(l));
        }
    }
    let (ia, ib) = split_indices(n, gamma, rng);
    let realised = ia.len() as f64 / n as f64;
    let mut soft = vec![0.0; num_classes];
    soft[a.label] += realised;
    soft[b.label] += ib.len() as f64 / n as f64;
    Ok(MixedSample {
        cloud: gather(a.cloud.points(), &ia, b.cloud.points(), &ib),
        label: MixedLabel::Soft(soft),
        gamma: realised,
        from_first: ia.len(),
        picked: (ia, ib),
    })
}

/// Classification mixup with `γ ~ Beta(alpha, beta)` drawn from `seed`.
pub fn pcm_classify(a: &LabeledCloud, b: &LabeledCloud, num_classes: usize, alpha: f64, beta: f64, seed: u64) -> Result<MixedSample> {
    let mut rng = seed::rng(seed);
    let gamma = sample_gamma(alpha, beta, &mut rng)?;
    pcm_classify_with_gamma(a, b, num_classes, gamma, &mut rng)
}

/// Segmentation mixup with an explicit coefficient; labels migrate with
/// their points.
pub fn pcm_segment_with_gamma(a: &SegLabeledCloud, b: &SegLabeledCloud, gamma: f64, rng: &mut Rng) -> Result<MixedSample> {
    let n = a.cloud.len();
    check_sizes(n, b.cloud.len())?;
    let (ia, ib) = split_indices(n, gamma, rng);
    let labels = ia.iter().map(|&i| a.labels[i]).chain(ib.iter().map(|&i| b.labels[i])).collect();
    Ok(MixedSample {
        cloud: gather(a.cloud.points(), &ia, b.cloud.points(), &ib),
        label: MixedLabel::PerPoint(labels),
        gamma: ia.len() as f64 / n as f64,
        from_first: ia.len(),
        picked: (ia, ib),
    })
}

/// Checks that every point of a segmentation mixup is a point of one of the
/// inputs carrying that input's label for it, and that the sample sizes add
/// up.
pub fn check_migration(a: &SegLabeledCloud, b: &SegLabeledCloud, m: &MixedSample) -> Result<()> {
    let labels = m
        .point_labels()
        .ok_or_else(|| Error::InvalidArgument("not a segmentation mixup".into()))?;
    let (ia, ib) = &m.picked;
    let n = m.cloud.len();
    if ia.len() != m.from_first || ia.len() + ib.len() != n || labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "mixed segmentation sample",
            expected: n,
            found: ia.len() + ib.len(),
        });
    }
    let sources = ia.iter().map(|&i| (a, i)).chain(ib.iter().map(|&i| (b, i)));
    for (k, (src, i)) in sources.enumerate() {
        let moved = src.cloud.points().get(i).zip(src.labels.get(i));
        if moved != Some((&m.cloud.points()[k], &labels[k])) {
            return Err(Error::InvalidArgument(format!("mixed point {k} lost its label")));
        }
    }
    Ok(())
}

pub fn pcm_segment(a: &SegLabeledCloud, b: &SegLabeledCloud, alpha: f64, beta: f64, seed: u64) -> Result<MixedSample> {
    let mut rng = seed::rng(seed);
    let gamma = sample_gamma(alpha, beta, &mut rng)?;
    pcm_segment_with_gamma(a, b, gamma, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn labeled(n: usize, offset: f64, label: usize) -> LabeledCloud {
        let pts = (0..n).map(|i| [i as f64 + offset, offset, 0.0]).collect();
        LabeledCloud {
            cloud: PointCloud::new(pts).unwrap(),
            label,
        }
    }

    fn seg(n: usize, offset: f64, classes: usize) -> SegLabeledCloud {
        let pts = (0..n).map(|i| [i as f64 + offset, offset, 1.0]).collect();
        SegLabeledCloud::new(PointCloud::new(pts).unwrap(), (0..n).map(|i| i % classes).collect()).unwrap()
    }

    fn sorted(c: &PointCloud) -> Vec<[u64; 3]> {
        let mut v: Vec<[u64; 3]> = c.points().iter().map(|p| p.map(f64::to_bits)).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn degenerate_gammas() {
        let a = labeled(64, 0.0, 0);
        let b = labeled(64, 1000.0, 2);
        let mut rng = seed::rng(1);
        let all_a = pcm_classify_with_gamma(&a, &b, 3, 1.0, &mut rng).unwrap();
        assert_eq!(sorted(&all_a.cloud), sorted(&a.cloud));
        assert_eq!(all_a.soft_label().unwrap(), &[1.0, 0.0, 0.0]);
        let all_b = pcm_classify_with_gamma(&a, &b, 3, 0.0, &mut rng).unwrap();
        assert_eq!(sorted(&all_b.cloud), sorted(&b.cloud));
        assert_eq!(all_b.soft_label().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_mix_counts() {
        let a = labeled(1024, 0.0, 0);
        let b = labeled(1024, 5000.0, 1);
        let mut rng = seed::rng(2);
        let m = pcm_classify_with_gamma(&a, &b, 2, 0.25, &mut rng).unwrap();
        let from_a = m.cloud.points().iter().filter(|p| p[1] == 0.0).count();
        assert_eq!(from_a, 256);
        assert_eq!(m.cloud.len() - from_a, 768);
        assert_eq!(m.soft_label().unwrap(), &[0.25, 0.75]);
        // without replacement: no point repeats
        let s = sorted(&m.cloud);
        assert!(s.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn size_mismatch_errors() {
        let err = pcm_classify(&labeled(10, 0.0, 0), &labeled(11, 0.0, 1), 2, 1.0, 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(pcm_segment(&seg(10, 0.0, 2), &seg(12, 0.0, 2), 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn segment_labels_migrate() {
        let a = seg(128, 0.0, 4);
        let b = seg(128, 1000.0, 3);
        for s in 0..20 {
            let m = pcm_segment(&a, &b, 1.0, 1.0, s).unwrap();
            let labels = m.point_labels().unwrap();
            assert_eq!(m.cloud.len(), 128);
            for (p, &l) in m.cloud.points().iter().zip(labels) {
                let (src, off) = if p[1] == 0.0 { (&a, 0.0) } else { (&b, 1000.0) };
                let i = (p[0] - off) as usize;
                assert_eq!(src.labels[i], l);
            }
            let from_a = m.cloud.points().iter().filter(|p| p[1] == 0.0).count();
            assert_eq!(from_a, m.from_first);
            check_migration(&a, &b, &m).unwrap();
            let mut broken = m.clone();
            if let MixedLabel::PerPoint(l) = &mut broken.label {
                l[0] = (l[0] + 1) % 4;
            }
            assert!(check_migration(&a, &b, &broken).is_err());
        }
        let mut rng = seed::rng(0);
        let whole = pcm_segment_with_gamma(&a, &b, 1.0, &mut rng).unwrap();
        let mut pairs: Vec<(u64, usize)> = whole.cloud.points().iter().zip(whole.point_labels().unwrap()).map(|(p, &l)| (p[0].to_bits(), l)).collect();
        pairs.sort_unstable();
        let mut expect: Vec<(u64, usize)> = a.cloud.points().iter().zip(&a.labels).map(|(p, &l)| (p[0].to_bits(), l)).collect();
        expect.sort_unstable();
        assert_eq!(pairs, expect);
    }

    #[test]
    fn soft_labels_sum_to_one() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let n = rng.random_range(1..300);
            let a = labeled(n, 0.0, rng.random_range(0..5));
            let b = labeled(n, 1.0, rng.random_range(0..5));
            let m = pcm_classify(&a, &b, 5, 1.0, 1.0, rng.random()).unwrap();
            let s: f64 = m.soft_label().unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(m.soft_label().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(m.cloud.len(), n);
        }
    }
}
