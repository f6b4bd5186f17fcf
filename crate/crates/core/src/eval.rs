//! Target-domain metrics: accuracy, mean IoU and the Gaussian
//! log-perplexity of learned representations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{LabeledCloud, SegLabeledCloud};
use crate::error::{Error, Result};
use crate::network::ModelParams;

pub const DEFAULT_COVARIANCE_REG: f64 = 1e-6;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    check_len(preds.len(), labels.len(), "accuracy labels")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_len(expected: usize, found: usize, what: &'static str) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

/// `num_classes x num_classes` confusion counts, rows are labels.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_len(preds.len(), labels.len(), "segmentation labels")?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes {
            return Err(Error::UnknownClass(p));
        }
        if l >= num_classes {
            return Err(Error::UnknownClass(l));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Mean over classes of `TP / (TP + FP + FN)`, pooled over all points given.
/// Classes absent from both predictions and labels are skipped.
pub fn mean_iou(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("mean IoU"));
    }
    let m = confusion_matrix(preds, labels, num_classes)?;
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let tp = m[c][c];
        let fn_: u64 = m[c].iter().sum::<u64>() - tp;
        let fp: u64 = m.iter().map(|row| row[c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        total += tp as f64 / denom as f64;
        present += 1;
    }
    Ok(total / present as f64)
}

/// Eval-mode accuracy of `params` on labelled clouds.
pub fn classifier_accuracy(params: &ModelParams, samples: &[LabeledCloud]) -> Result<f64> {
    let preds = samples.par_iter().map(|s| params.predict(&s.cloud)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy(&preds, &labels)
}

/// Eval-mode mean IoU of `params`, pooled over all points of all clouds.
pub fn segmenter_miou(params: &ModelParams, samples: &[SegLabeledCloud]) -> Result<f64> {
    let preds = samples.par_iter().map(|s| params.predict_points(&s.cloud)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = preds.into_iter().flatten().collect();
    let labels: Vec<usize> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    mean_iou(&preds, &labels, params.config.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub prior: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassModel {
    pub dim: usize,
    pub classes: Vec<ClassGaussian>,
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().ok_or(Error::EmptyInput("features"))?.len();
    if d == 0 {
        return Err(Error::EmptyInput("feature dimension"));
    }
    for f in features {
        check_len(d, f.len(), "feature dimension")?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
    }
    Ok(d)
}

/// Maximum-likelihood mean and covariance (divided by `n_c`) per class, with
/// `reg * I` added to each covariance. Classes are `0..=max(label)`.
pub fn fit_class_gaussians(features: &[Vec<f64>], labels: &[usize], reg: f64) -> Result<GaussianClassModel> {
    let d = check_features(features)?;
    check_len(features.len(), labels.len(), "feature labels")?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let total = features.len() as f64;
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let rows: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples { class: c, count: rows.len() });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in &rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / n;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
            cov[i * d + i] += reg;
        }
        classes.push(ClassGaussian {
            mean,
            cov,
            prior: n / total,
            count: rows.len(),
        });
    }
    Ok(GaussianClassModel { dim: d, classes })
}

impl GaussianClassModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `log(N(x; mu_c, Sigma_c) * pi_c)` for every row of `features`, using a
    /// Cholesky factor of each needed covariance.
    fn log_joint(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut factors: Vec<Option<(DMatrix<f64>, f64)>> = vec![None; self.classes.len()];
        let mut out = Vec::with_capacity(features.len());
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        for (x, &c) in features.iter().zip(labels) {
            let g = self.classes.get(c).ok_or(Error::UnknownClass(c))?;
            if factors[c].is_none() {
                let chol = DMatrix::from_row_slice(d, d, &g.cov)
                    .cholesky()
                    .ok_or_else(|| Error::NonFinite(format!("covariance of class {c} is not positive definite")))?;
                let l = chol.l();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                factors[c] = Some((l, log_det));
            }
            let (l, log_det) = factors[c].as_ref().expect("factor computed above");
            let diff = DVector::from_iterator(d, x.iter().zip(&g.mean).map(|(a, b)| a - b));
            let z = l
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::NonFinite(format!("singular factor for class {c}")))?;
            let maha = z.norm_squared();
            out.push(-0.5 * (d as f64 * log_2pi + log_det + maha) + g.prior.ln());
        }
        Ok(out)
    }
}

/// Negative average log-likelihood of labelled target features under the
/// class Gaussians (lower is better). The balanced variant first averages
/// within each target class, then across the classes present.
pub fn log_perplexity(model: &GaussianClassModel, features: &[Vec<f64>], labels: &[usize], balanced: bool) -> Result<f64> {
    let d = check_features(features)?;
    check_len(model.dim, d, "feature dimension")?;
    check_len(features.len(), labels.len(), "feature labels")?;
    let logs = model.log_joint(features, labels)?;
    if !balanced {
        return Ok(-logs.iter().sum::<f64>() / logs.len() as f64);
    }
    let mut sums = vec![0.0; model.num_classes()];
    let mut counts = vec![0usize; model.num_classes()];
    for (v, &c) in logs.iter().zip(labels) {
        sums[c] += v;
        counts[c] += 1;
    }
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let total: f64 = present.iter().map(|&c| sums[c] / counts[c] as f64).sum();
    Ok(-total / present.len() as f64)
}

/// Principal-component projection fitted on a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d_out` unit components, in order of decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &[Vec<f64>], d_out: usize) -> Result<Self> {
        let d = check_features(features)?;
        if d_out > d {
            return Err(Error::InvalidArgument(format!("projection to {d_out} dimensions from {d}")));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for f in features {
            let c = DVector::from_iterator(d, f.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &c * c.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(d_out);
        let mut variances = Vec::with_capacity(d_out);
        for &k in order.iter().take(d_out) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // fix the sign so the largest-magnitude coefficient is positive
            let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(Self { mean, components, variances })
    }

    pub fn transform(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features
            .iter()
            .map(|f| {
                check_len(self.mean.len(), f.len(), "feature dimension")?;
                Ok(self
                    .components
                    .iter()
                    .map(|c| c.iter().zip(f.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
                    .collect())
            })
            .collect()
    }
}

/// Centres the features and projects them onto their top `d_out` principal
/// components.
pub fn project_features(features: &[Vec<f64>], d_out: usize) -> Result<Vec<Vec<f64>>> {
    Pca::fit(features, d_out)?.transform(features)
}
