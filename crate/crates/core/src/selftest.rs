//! Built-in verification suites: a finite-difference gradient check of the
//! full composite losses and brute-force oracles for the fast kernels.

use rand::Rng as _;
use serde::Serialize;

use crate::chamfer::{chamfer_distance, chamfer_loss_region};
use crate::cloud::{dist2, normalize_unit_cube, LabeledCloud, Point3, PointCloud, SegLabeledCloud};
use crate::deform::{deform_voxel, DeformedPair};
use crate::error::Result;
use crate::eval::{fit_class_gaussians, log_perplexity, GaussianClassModel};
use crate::network::{softmax_cross_entropy, pointwise_cross_entropy, Gradients, Group, Mode, ModelParams, NetworkConfig, OutputGrads, Task};
use crate::pcm::{pcm_classify_with_gamma, pcm_segment_with_gamma};
use crate::seed;
use crate::spatial::NeighborIndex;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so parameters whose true
/// gradient is (numerically) zero are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossPath {
    /// Cross-entropy on a mixup sample with soft labels, dropout active.
    CrossEntropy,
    /// Region Chamfer loss of the reconstruction of a deformed cloud.
    Chamfer,
    /// Cross-entropy plus `lambda` times the Chamfer loss in one update.
    Composite,
    /// Per-point cross-entropy on a mixed segmentation sample.
    Segmentation,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub path: LossPath,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// The toy network used by the gradient check.
pub fn toy_config(task: Task, num_classes: usize) -> NetworkConfig {
    NetworkConfig {
        task,
        num_classes,
        point_widths: vec![8, 8],
        global_width: 16,
        sup_widths: match task {
            Task::Classification => vec![16, 8],
            Task::Segmentation => vec![16, 8, 8],
        },
        ssl_widths: vec![16, 8],
        dropout: 0.5,
    }
}

fn random_cloud(n: usize, rng: &mut seed::Rng) -> PointCloud {
    let pts = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4)])
        .collect();
    normalize_unit_cube(&PointCloud::new(pts).expect("finite points"))
}

struct Problem {
    mixed: PointCloud,
    soft: Vec<f64>,
    pair: DeformedPair,
    seg: Option<(PointCloud, Vec<usize>)>,
    lambda: f64,
    dropout_seed: u64,
}

impl Problem {
    fn build(task: Task, num_classes: usize, n: usize, seed_: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_);
        let a = LabeledCloud { cloud: random_cloud(n, &mut rng), label: 0 };
        let b = LabeledCloud { cloud: random_cloud(n, &mut rng), label: 2 % num_classes };
        let m = pcm_classify_with_gamma(&a, &b, num_classes, 0.4, &mut rng)?;
        let soft = m.soft_label().expect("classification mixup").to_vec();
        let pair = deform_voxel(&random_cloud(n, &mut rng), 3, 0.05, rng.random())?;
        let seg = if task == Task::Segmentation {
            let la = (0..n).map(|i| i % num_classes).collect();
            let lb = (0..n).map(|i| (i / 3) % num_classes).collect();
            let sa = SegLabeledCloud::new(a.cloud.clone(), la)?;
            let sb = SegLabeledCloud::new(b.cloud.clone(), lb)?;
            let sm = pcm_segment_with_gamma(&sa, &sb, 0.6, &mut rng)?;
            let labels = sm.point_labels().expect("segmentation mixup").to_vec();
            Some((sm.cloud, labels))
        } else {
            None
        };
        Ok(Self {
            mixed: m.cloud,
            soft,
            pair,
            seg,
            lambda: 0.5,
            dropout_seed: rng.random(),
        })
    }

    /// Loss and (optionally) its analytic gradient.
    fn evaluate(&self, params: &ModelParams, path: LossPath, want_grad: bool) -> Result<(f64, Option<Gradients>)> {
        let mode = Mode::Train { seed: self.dropout_seed };
        let mut grads = want_grad.then(|| Gradients::zeros(&params.config));
        let mut loss = 0.0;
        if matches!(path, LossPath::CrossEntropy | LossPath::Composite) {
            let tr = params.forward(&self.mixed, Some(mode), false)?;
            let (l, d) = softmax_cross_entropy(tr.sup.as_ref().expect("sup head").output(), &self.soft);
            loss += l;
            if let Some(g) = grads.as_mut() {
                params.backward_into(&tr, &OutputGrads { sup: Some(d), ssl: None }, g)?;
            }
        }
        if matches!(path, LossPath::Chamfer | LossPath::Composite) {
            let w = if path == LossPath::Composite { self.lambda } else { 1.0 };
            let tr = params.forward(&self.pair.deformed, None, true)?;
            let out = tr.ssl.as_ref().expect("ssl head").output();
            let rec = PointCloud::from_trusted(out.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
            let r = chamfer_loss_region(&rec, &self.pair.original, &self.pair.region_indices)?;
            loss += w * r.value;
            if let Some(g) = grads.as_mut() {
                let d = r.grad_pred.iter().flatten().map(|v| w * v).collect();
                params.backward_into(&tr, &OutputGrads { sup: None, ssl: Some(d) }, g)?;
            }
        }
        if path == LossPath::Segmentation {
            let (cloud, labels) = self.seg.as_ref().expect("segmentation problem");
            let tr = params.forward(cloud, Some(mode), false)?;
            let (l, d) = pointwise_cross_entropy(tr.sup.as_ref().expect("sup head").output(), params.config.num_classes, labels);
            loss += l;
            if let Some(g) = grads.as_mut() {
                params.backward_into(&tr, &OutputGrads { sup: Some(d), ssl: None }, g)?;
            }
        }
        Ok((loss, grads))
    }
}

fn active_groups(path: LossPath) -> &'static [Group] {
    match path {
        LossPath::CrossEntropy | LossPath::Segmentation => &[Group::Encoder, Group::Sup],
        LossPath::Chamfer => &[Group::Encoder, Group::Ssl],
        LossPath::Composite => &[Group::Encoder, Group::Sup, Group::Ssl],
    }
}

/// Compares analytic gradients with central differences on every parameter
/// of the groups the loss path reaches.
pub fn gradient_check(path: LossPath, num_classes: usize, n: usize, seed_: u64) -> Result<GradCheck> {
    let task = if path == LossPath::Segmentation { Task::Segmentation } else { Task::Classification };
    let mut params = ModelParams::init(toy_config(task, num_classes), seed_)?;
    // Zero biases put rows with an all-zero input exactly on the ReLU kink,
    // where central differences report half a one-sided slope.
    let mut jitter = seed::rng(seed::derive(seed_, &[2]));
    for g in Group::ALL {
        for l in params.layers.group_mut(g) {
            l.bias.iter_mut().for_each(|b| *b = jitter.random_range(-0.1..0.1));
        }
    }
    let problem = Problem::build(task, num_classes, n, seed::derive(seed_, &[1]))?;
    let (_, grads) = problem.evaluate(&params, path, true)?;
    let grads = grads.expect("gradient requested");

    let mut report = GradCheck {
        path,
        checked: 0,
        passed: 0,
        max_rel_error: 0.0,
    };
    for &g in active_groups(path) {
        for li in 0..params.layers.group(g).len() {
            for which in 0..2 {
                let len = tensor(&params, g, li, which).len();
                for i in 0..len {
                    let original = tensor(&params, g, li, which)[i];
                    tensor_mut(&mut params, g, li, which)[i] = original + FD_STEP;
                    let (up, _) = problem.evaluate(&params, path, false)?;
                    tensor_mut(&mut params, g, li, which)[i] = original - FD_STEP;
                    let (down, _) = problem.evaluate(&params, path, false)?;
                    tensor_mut(&mut params, g, li, which)[i] = original;
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    let analytic = tensor_of(&grads, g, li, which)[i];
                    let err = relative_error(analytic, numeric);
                    report.checked += 1;
                    if err <= FD_TOLERANCE {
                        report.passed += 1;
                    }
                    report.max_rel_error = report.max_rel_error.max(err);
                }
            }
        }
    }
    Ok(report)
}

fn tensor(p: &ModelParams, g: Group, li: usize, which: usize) -> &[f64] {
    let l = &p.layers.group(g)[li];
    if which == 0 {
        &l.weight
    } else {
        &l.bias
    }
}

fn tensor_mut(p: &mut ModelParams, g: Group, li: usize, which: usize) -> &mut [f64] {
    let l = &mut p.layers.group_mut(g)[li];
    if which == 0 {
        &mut l.weight
    } else {
        &mut l.bias
    }
}

fn tensor_of(gr: &Gradients, g: Group, li: usize, which: usize) -> &[f64] {
    let l = &gr.layers.group(g)[li];
    if which == 0 {
        &l.weight
    } else {
        &l.bias
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |x: &[Point3], y: &[Point3]| -> f64 {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    one(a, b) + one(b, a)
}

/// Kd-tree Chamfer against the quadratic scan on `instances` random pairs.
pub fn chamfer_oracle(instances: usize, seed_: u64) -> CheckOutcome {
    let mut rng = seed::rng(seed_);
    let mut worst = 0.0f64;
    let mut symmetric = true;
    for _ in 0..instances {
        let na = rng.random_range(1..=64);
        let nb = rng.random_range(1..=64);
        let a: Vec<Point3> = (0..na).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let b: Vec<Point3> = (0..nb).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let ab = chamfer_distance(&a, &b).expect("non-empty");
        let ba = chamfer_distance(&b, &a).expect("non-empty");
        symmetric &= ab == ba;
        worst = worst.max((ab - brute_chamfer(&a, &b)).abs());
    }
    CheckOutcome::new(
        "chamfer matches brute force",
        worst <= 1e-9 && symmetric,
        format!("{instances} instances, max abs error {worst:.3e}, symmetric {symmetric}"),
    )
}

/// Kd-tree kNN and radius queries against brute force.
pub fn neighbor_oracle(instances: usize, seed_: u64) -> CheckOutcome {
    let mut rng = seed::rng(seed_);
    let mut ok = true;
    for _ in 0..instances {
        let n = rng.random_range(1..=96);
        let pts: Vec<Point3> = (0..n)
            .map(|_| [rng.random_range(0..4) as f64 * 0.25, rng.random(), rng.random()])
            .collect();
        let index = NeighborIndex::new(pts.clone());
        let q: Point3 = [rng.random(), rng.random(), rng.random()];
        let k = rng.random_range(1..=n);
        let mut order: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (dist2(q, *p), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = order.iter().take(k).map(|x| x.1).collect();
        let got: Vec<usize> = index.knn(q, k).into_iter().map(|x| x.0).collect();
        ok &= got == expect;
        let r = rng.random_range(0.0..0.6);
        let within: Vec<usize> = (0..n).filter(|&i| dist2(q, pts[i]) <= r * r).collect();
        ok &= index.within_radius(q, r) == within;
    }
    CheckOutcome::new("kd-tree matches brute force", ok, format!("{instances} instances"))
}

fn brute_perplexity(model: &GaussianClassModel, f: &[Vec<f64>], l: &[usize]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let d = model.dim;
    let mut total = 0.0;
    for (x, &c) in f.iter().zip(l) {
        let g = &model.classes[c];
        let cov = DMatrix::from_row_slice(d, d, &g.cov);
        let inv = cov.clone().try_inverse().expect("invertible covariance");
        let diff = DVector::from_iterator(d, x.iter().zip(&g.mean).map(|(a, b)| a - b));
        let q = (diff.transpose() * inv * &diff)[0];
        let dens = (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * cov.determinant()).sqrt();
        total += (dens * g.prior).ln();
    }
    -total / f.len() as f64
}

/// Cholesky log-perplexity against explicit inverse and determinant on
/// random 3-class, 4-dimensional problems.
pub fn perplexity_oracle(instances: usize, seed_: u64) -> CheckOutcome {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seed::rng(seed_);
    let mut worst = 0.0f64;
    let sample = |rng: &mut seed::Rng, counts: &[usize], shift: f64| {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                f.push(
                    (0..4)
                        .map(|j| {
                            let z: f64 = StandardNormal.sample(rng);
                            z * (0.5 + 0.25 * j as f64) + 1.5 * c as f64 + shift
                        })
                        .collect::<Vec<f64>>(),
                );
                l.push(c);
            }
        }
        (f, l)
    };
    for _ in 0..instances {
        let (src, sl) = sample(&mut rng, &[24, 30, 18], 0.0);
        let model = fit_class_gaussians(&src, &sl, 1e-6).expect("enough samples");
        let (tgt, tl) = sample(&mut rng, &[6, 11, 8], 0.3);
        let fast = log_perplexity(&model, &tgt, &tl, false).expect("valid input");
        worst = worst.max((fast - brute_perplexity(&model, &tgt, &tl)).abs());
    }
    CheckOutcome::new(
        "log-perplexity matches explicit inverse",
        worst <= 1e-9,
        format!("{instances} instances, max abs error {worst:.3e}"),
    )
}

/// Everything the `selftest` command runs.
pub fn run_all(seed_: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for path in [LossPath::CrossEntropy, LossPath::Chamfer, LossPath::Composite, LossPath::Segmentation] {
        let r = gradient_check(path, 3, 32, seed_)?;
        out.push(CheckOutcome::new(
            &format!("gradient check ({path:?})"),
            r.pass_fraction() >= 0.99,
            format!("{}/{} within {FD_TOLERANCE:e}, max relative error {:.3e}", r.passed, r.checked, r.max_rel_error),
        ));
    }
    out.push(chamfer_oracle(100, seed_));
    out.push(neighbor_oracle(100, seed_));
    out.push(perplexity_oracle(20, seed_));
    Ok(out)
}
