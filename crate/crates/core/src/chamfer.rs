//! Symmetric Chamfer distance and the region-restricted reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::spatial::NeighborIndex;

/// Loss value together with its gradient with respect to every predicted
/// point (zero outside the region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    pub value: f64,
    pub grad_pred: Vec<Point3>,
}

/// `d(A, B) = sum_a min_b |a-b|^2 + sum_b min_a |b-a|^2` (sums, not means).
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyChamferSet);
    }
    let ia = NeighborIndex::new(a.to_vec());
    let ib = NeighborIndex::new(b.to_vec());
    Ok(one_sided(a, &ib) + one_sided(b, &ia))
}

fn one_sided(from: &[Point3], to: &NeighborIndex) -> f64 {
    from.iter().map(|p| to.nearest(*p).map_or(0.0, |(_, d)| d)).sum()
}

/// Chamfer distance between `target[I]` and `pred[I]`, with the exact
/// gradient w.r.t. the predicted points.
///
/// A selected prediction receives `2 (p - t)` from its own nearest target
/// and `2 (p - t)` from every target that picks it as nearest. Nearest
/// neighbour ties resolve to the lowest region position.
pub fn chamfer_loss_region(pred: &PointCloud, target: &PointCloud, region: &[usize]) -> Result<ChamferResult> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction",
            expected: target.len(),
            found: pred.len(),
        });
    }
    if let Some(&bad) = region.iter().find(|&&i| i >= target.len()) {
        return Err(Error::InvalidArgument(format!(
            "region index {bad} out of range for {} points",
            target.len()
        )));
    }
    let p: Vec<Point3> = region.iter().map(|&i| pred.points()[i]).collect();
    let t: Vec<Point3> = region.iter().map(|&i| target.points()[i]).collect();
    let ip = NeighborIndex::new(p.clone());
    let it = NeighborIndex::new(t.clone());

    let mut grad_local = vec![[0.0; 3]; p.len()];
    let mut value = 0.0;
    for tj in &t {
        let (k, d) = ip.nearest(*tj).expect("non-empty");
        value += d;
        for a in 0..3 {
            grad_local[k][a] += 2.0 * (p[k][a] - tj[a]);
        }
    }
    for (k, pk) in p.iter().enumerate() {
        let (j, d) = it.nearest(*pk).expect("non-empty");
        value += d;
        for a in 0..3 {
            grad_local[k][a] += 2.0 * (pk[a] - t[j][a]);
        }
    }

    let mut grad_pred = vec![[0.0; 3]; pred.len()];
    for (k, &i) in region.iter().enumerate() {
        for a in 0..3 {
            grad_pred[i][a] += grad_local[k][a];
        }
    }
    Ok(ChamferResult { value, grad_pred })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::dist2;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute(a: &[Point3], b: &[Point3]) -> f64 {
        let fwd: f64 = a
            .iter()
            .map(|x| b.iter().map(|y| dist2(*x, *y)).fold(f64::INFINITY, f64::min))
            .sum();
        let bwd: f64 = b
            .iter()
            .map(|y| a.iter().map(|x| dist2(*y, *x)).fold(f64::INFINITY, f64::min))
            .sum();
        fwd + bwd
    }

    #[test]
    fn hand_examples() {
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(
            chamfer_distance(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(),
            3.0
        );
        let a = [[0.3, 0.1, -0.2], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        let err = chamfer_distance(&[], &[[0.0; 3]]).unwrap_err();
        assert_eq!(err.to_string(), "chamfer undefined for empty set");
    }

    #[test]
    fn single_pair_gradient() {
        let pred = PointCloud::new(vec![[0.0; 3], [5.0, 5.0, 5.0]]).unwrap();
        let target = PointCloud::new(vec![[1.0, 0.0, 0.0], [9.0, 9.0, 9.0]]).unwrap();
        let r = chamfer_loss_region(&pred, &target, &[0]).unwrap();
        assert_eq!(r.value, 2.0);
        assert_eq!(r.grad_pred, vec![[-4.0, 0.0, 0.0], [0.0; 3]]);
    }

    #[test]
    fn identical_region_has_zero_loss_and_gradient() {
        let target = PointCloud::new(vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]]).unwrap();
        let mut pts = target.points().to_vec();
        pts[1] = [9.0, 9.0, 9.0];
        let pred = PointCloud::new(pts).unwrap();
        let r = chamfer_loss_region(&pred, &target, &[0, 2]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_pred.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn empty_region_is_an_error() {
        let c = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let err = chamfer_loss_region(&c, &c, &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty deformation region");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(5);
        let (mut pass, mut total) = (0, 0);
        for _ in 0..20 {
            let n = 24;
            let rand_pts = |rng: &mut seed::Rng| -> Vec<Point3> {
                (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect()
            };
            let target = PointCloud::new(rand_pts(&mut rng)).unwrap();
            let pred_pts = rand_pts(&mut rng);
            let region: Vec<usize> = (0..n).filter(|i| i % 3 != 2).collect();
            let pred = PointCloud::new(pred_pts.clone()).unwrap();
            let r = chamfer_loss_region(&pred, &target, &region).unwrap();
            let h = 1e-5;
            for &i in &region {
                for a in 0..3 {
                    let mut plus = pred_pts.clone();
                    plus[i][a] += h;
                    let mut minus = pred_pts.clone();
                    minus[i][a] -= h;
                    let fp = chamfer_loss_region(&PointCloud::new(plus).unwrap(), &target, &region).unwrap().value;
                    let fm = chamfer_loss_region(&PointCloud::new(minus).unwrap(), &target, &region).unwrap().value;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = r.grad_pred[i][a];
                    total += 1;
                    if (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6) {
                        pass += 1;
                    }
                }
            }
        }
        assert!(pass as f64 >= 0.95 * total as f64, "{pass}/{total}");
    }

    proptest! {
        #[test]
        fn symmetric_and_matches_brute_force(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..64),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..64),
        ) {
            let ab = chamfer_distance(&a, &b).unwrap();
            let ba = chamfer_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((ab - brute(&a, &b)).abs() <= 1e-9);
            prop_assert!(ab >= 0.0);
        }
    }
}
