//! Inputs shared by the kernel benchmarks.

use defrec::{Point3, PointCloud};

/// `n` points on a Fibonacci spiral over an ellipsoid, slightly perturbed so
/// no two distances tie.
pub fn spiral_cloud(n: usize, phase: f64) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let points: Vec<Point3> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64 + phase;
            let wobble = 1e-3 * ((i * 7919) % 101) as f64 / 101.0;
            [0.5 * r * t.cos() + wobble, 0.4 * r * t.sin(), 0.3 * z]
        })
        .collect();
    PointCloud::new(points).expect("non-empty")
}
