//! The alternating two-task optimisation: a supervised loss on labelled
//! source clouds and a weighted region-reconstruction loss on deformed
//! (target, optionally source) clouds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::chamfer::chamfer_loss_region;
use crate::cloud::{jitter, rotate_z, LabeledCloud, PointCloud, SegLabeledCloud, JITTER_CLIP, JITTER_SIGMA};
use crate::deform::{choose_family, deform, DeformKind, DeformSpec, Family, Features};
use crate::error::{Error, Result};
use crate::eval::{accuracy, mean_iou};
use crate::network::{
    accumulate_gradients, argmax, pointwise_cross_entropy, softmax_cross_entropy, Gradients, Mode, ModelParams,
    NetworkConfig, OutputGrads,
};
pub use crate::network::Task;
use crate::optim::{Adam, AdamConfig};
use crate::pcm::{check_migration, pcm_classify, pcm_segment, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::seed::{self, stream};

/// Which domains feed the reconstruction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefRecDomains {
    #[default]
    TargetOnly,
    SourceAndTarget,
}

/// When the optimizer steps within a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// One update after the source batch, another after the target batch.
    #[default]
    Alternating,
    /// A single update on the summed gradients of both batches.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Full-width encoder (global feature 1024).
    #[default]
    Reference,
    /// Quarter-width encoder for CPU-scale experiments.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task: Task,
    /// Weight of the reconstruction loss.
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::deform")]
    pub deform: DeformSpec,
    #[serde(default = "defaults::yes")]
    pub pcm_enabled: bool,
    #[serde(default)]
    pub defrec_on: DefRecDomains,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default)]
    pub architecture: Architecture,
    /// Fraction of each source class held out for validation.
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    /// Jitter and random z-rotation on every training cloud.
    #[serde(default = "defaults::yes")]
    pub augment: bool,
}

mod defaults {
    use crate::deform::{DeformKind, DeformSpec};

    pub fn lambda() -> f64 {
        1.0
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        5e-5
    }
    pub fn epochs() -> usize {
        150
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn alpha() -> f64 {
        crate::pcm::DEFAULT_ALPHA
    }
    pub fn beta() -> f64 {
        crate::pcm::DEFAULT_BETA
    }
    pub fn deform() -> DeformSpec {
        DeformSpec::new(DeformKind::VoxelGrid { k: 3 })
    }
    pub fn yes() -> bool {
        true
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
}

/// Learning rates searched by the grid.
pub const LR_GRID: [f64; 2] = [1e-4, 1e-3];
pub const WEIGHT_DECAY_GRID: [f64; 2] = [5e-5, 5e-4];
pub const LAMBDA_GRID: [f64; 2] = [0.25, 1.0];
pub const SEGMENTATION_LAMBDA_GRID: [f64; 3] = [0.05, 0.1, 0.2];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            lambda: defaults::lambda(),
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            deform: defaults::deform(),
            pcm_enabled: true,
            defrec_on: DefRecDomains::TargetOnly,
            seed: 0,
            schedule: StepSchedule::Alternating,
            architecture: Architecture::Reference,
            val_fraction: defaults::val_fraction(),
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Segmentation defaults: 16 clouds per domain per batch, 200 epochs,
    /// a smaller reconstruction weight.
    pub fn segmentation() -> Self {
        Self {
            task: Task::Segmentation,
            batch_size: 16,
            epochs: 200,
            lambda: 0.1,
            ..Self::default()
        }
    }

    /// Settings for the synthetic benchmark on a CPU: the compact network,
    /// 30 epochs and a higher learning rate to match.
    pub fn desk_scale() -> Self {
        Self {
            architecture: Architecture::Compact,
            epochs: 30,
            batch_size: 16,
            lr: 6e-3,
            lambda: 0.3,
            deform: DeformSpec::new(DeformKind::SampleLambertian),
            ..Self::default()
        }
    }

    /// The control arm: no reconstruction task and no mixup.
    pub fn baseline(&self) -> Self {
        Self {
            lambda: 0.0,
            pcm_enabled: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad(format!("mixup Beta parameters must be positive, got ({}, {})", self.alpha, self.beta));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        self.deform.validate()
    }

    pub fn network_config(&self, num_classes: usize) -> NetworkConfig {
        match self.architecture {
            Architecture::Reference => NetworkConfig::reference(self.task, num_classes),
            Architecture::Compact => NetworkConfig::compact(self.task, num_classes),
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `lr_max (1 + cos(pi step / total)) / 2`, floored at 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (lr_max * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean supervised loss over the epoch's source samples.
    pub sup_loss: f64,
    /// Mean (unweighted) reconstruction loss; zero when the task is off.
    pub ssl_loss: f64,
    /// Source-validation accuracy (classification) or mean IoU; NaN (written
    /// as `null`) when there is no validation split.
    #[serde(with = "nan_as_null")]
    pub val_metric: f64,
    #[serde(with = "nan_as_null")]
    pub val_loss: f64,
    /// Wall-clock seconds. Not serialised, so metric logs are reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Labelled source data for either task.
#[derive(Debug, Clone, Copy)]
pub enum SourceData<'a> {
    Classification { samples: &'a [LabeledCloud], num_classes: usize },
    Segmentation { samples: &'a [SegLabeledCloud], num_classes: usize },
}

impl<'a> SourceData<'a> {
    pub fn len(&self) -> usize {
        match self {
            SourceData::Classification { samples, .. } => samples.len(),
            SourceData::Segmentation { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SourceData::Classification { num_classes, .. } | SourceData::Segmentation { num_classes, .. } => *num_classes,
        }
    }

    fn task(&self) -> Task {
        match self {
            SourceData::Classification { .. } => Task::Classification,
            SourceData::Segmentation { .. } => Task::Segmentation,
        }
    }

    fn cloud(&self, i: usize) -> &'a PointCloud {
        match self {
            SourceData::Classification { samples, .. } => &samples[i].cloud,
            SourceData::Segmentation { samples, .. } => &samples[i].cloud,
        }
    }

    /// Stratum for the validation split: the class, or a single stratum
    /// for segmentation.
    fn stratum(&self, i: usize) -> usize {
        match self {
            SourceData::Classification { samples, .. } => samples[i].label,
            SourceData::Segmentation { .. } => 0,
        }
    }

    fn check(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        match self {
            SourceData::Classification { samples, .. } => {
                if let Some(s) = samples.iter().find(|s| s.label >= c) {
                    return Err(Error::UnknownClass(s.label));
                }
            }
            SourceData::Segmentation { samples, .. } => {
                for s in samples.iter() {
                    if let Some(&l) = s.labels.iter().find(|&&l| l >= c) {
                        return Err(Error::UnknownClass(l));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeded stratified split of `0..len` into (train, validation).
pub fn stratified_split(source: &SourceData<'_>, fraction: f64, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let strata = (0..source.len()).map(|i| source.stratum(i)).max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in 0..strata {
        let mut idx: Vec<usize> = (0..source.len()).filter(|&i| source.stratum(i) == s).collect();
        idx.shuffle(&mut seed::rng(seed::derive(seed_, &[stream::SPLIT, s as u64])));
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        let n_val = if idx.len() > 1 { n_val.min(idx.len() - 1) } else { 0 };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Best-validation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub metric: f64,
    pub loss: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestCheckpoint>,
    pub reports: Vec<EpochReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    pub state: TrainState,
    /// Segmentation mixup samples whose label migration was verified.
    pub migration_checks: usize,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    source: SourceData<'a>,
    target: &'a [PointCloud],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    state: TrainState,
    migration_checks: AtomicUsize,
}

/// Converts a numerical failure inside a step into a divergence report.
fn diverged(epoch: usize, step: usize, phase: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericalOverflow(what) => Error::Diverged {
            epoch,
            step,
            phase,
            detail: format!("numerical overflow in {what}"),
        },
        other => other,
    }
}

fn check_loss(losses: &[f64], epoch: usize, step: usize, phase: &'static str) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        None => Ok(()),
        Some(j) => Err(Error::Diverged {
            epoch,
            step,
            phase,
            detail: format!("loss {} for batch sample {j}", losses[j]),
        }),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, source: SourceData<'a>, target: &'a [PointCloud]) -> Result<Self> {
        let params = ModelParams::init(config.network_config(source.num_classes()), seed::derive(config.seed, &[stream::INIT]))?;
        let adam = Adam::new(&params, config.adam());
        let state = TrainState {
            params,
            adam,
            epoch: 0,
            best: None,
            reports: Vec::new(),
        };
        Self::resume(config, source, target, state)
    }

    pub fn resume(config: TrainConfig, source: SourceData<'a>, target: &'a [PointCloud], state: TrainState) -> Result<Self> {
        config.validate()?;
        source.check()?;
        if config.task != source.task() {
            return Err(Error::InvalidArgument(format!(
                "config task {:?} does not match the {:?} source data",
                config.task,
                source.task()
            )));
        }
        if source.is_empty() {
            return Err(Error::EmptyInput("source dataset"));
        }
        if target.is_empty() {
            return Err(Error::EmptyInput("target dataset"));
        }
        state.params.check_shapes()?;
        if state.params.config != config.network_config(source.num_classes()) {
            return Err(Error::InvalidArgument("checkpoint network does not match the configuration".into()));
        }
        if let Some(layer) = config.deform.kind.feature_layer() {
            if layer > state.params.layers.encoder.len() {
                return Err(Error::InvalidArgument(format!(
                    "feature deformation layer {layer} exceeds the {} encoder layers",
                    state.params.layers.encoder.len()
                )));
            }
        }
        let (train_idx, val_idx) = stratified_split(&source, config.val_fraction, config.seed);
        let batches = train_idx.len().min(target.len()) / config.batch_size;
        if batches == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds the smaller domain ({} source training, {} target clouds)",
                config.batch_size,
                train_idx.len(),
                target.len()
            )));
        }
        Ok(Self {
            config,
            source,
            target,
            train_idx,
            val_idx,
            state,
            migration_checks: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.train_idx, &self.val_idx)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_idx.len().min(self.target.len()) / self.config.batch_size
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    fn augmented(&self, cloud: &PointCloud, key: &[u64]) -> Result<PointCloud> {
        if !self.config.augment {
            return Ok(cloud.clone());
        }
        let s = seed::derive(self.config.seed, key);
        let j = jitter(cloud, JITTER_SIGMA, JITTER_CLIP, s)?;
        let angle = seed::rng(seed::derive(s, &[1])).random_range(0.0..std::f64::consts::TAU);
        Ok(rotate_z(&j, angle))
    }

    /// Supervised half-step gradients for one batch of source indices.
    fn source_gradients(&self, batch: &[usize], epoch: usize, step: usize) -> Result<(Gradients, Vec<f64>)> {
        let params = &self.state.params;
        let c = self.config.clone();
        let b = batch.len();
        let (e, s) = (epoch as u64, step as u64);
        let aug: Vec<PointCloud> = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| self.augmented(self.source.cloud(i), &[stream::AUGMENT, e, s, 0, j as u64]))
            .collect::<Result<_>>()?;
        let positions: Vec<usize> = (0..b).collect();
        let num_classes = self.source.num_classes();
        let source = self.source;
        accumulate_gradients(&params.config, &positions, |&j, grads| {
            let mix_seed = seed::derive(c.seed, &[stream::MIXUP, e, s, j as u64]);
            let partner = (j + 1) % b;
            let mode = Mode::Train {
                seed: seed::derive(c.seed, &[stream::DROPOUT, e, s, j as u64]),
            };
            match source {
                SourceData::Classification { samples, .. } => {
                    let a = LabeledCloud { cloud: aug[j].clone(), label: samples[batch[j]].label };
                    let (cloud, soft) = if c.pcm_enabled {
                        let other = LabeledCloud { cloud: aug[partner].clone(), label: samples[batch[partner]].label };
                        let m = pcm_classify(&a, &other, num_classes, c.alpha, c.beta, mix_seed)?;
                        let soft = m.soft_label().expect("classification mixup").to_vec();
                        (m.cloud, soft)
                    } else {
                        let mut onehot = vec![0.0; num_classes];
                        onehot[a.label] = 1.0;
                        (a.cloud, onehot)
                    };
                    let tr = params.forward(&cloud, Some(mode), false)?;
                    let (loss, mut d) = softmax_cross_entropy(tr.sup.as_ref().expect("sup head").output(), &soft);
                    d.iter_mut().for_each(|v| *v /= b as f64);
                    params.backward_into(&tr, &OutputGrads { sup: Some(d), ssl: None }, grads)?;
                    Ok(loss)
                }
                SourceData::Segmentation { samples, .. } => {
                    let a = SegLabeledCloud {
                        cloud: aug[j].clone(),
                        labels: samples[batch[j]].labels.clone(),
                    };
                    let (cloud, labels) = if c.pcm_enabled {
                        let other = SegLabeledCloud {
                            cloud: aug[partner].clone(),
                            labels: samples[batch[partner]].labels.clone(),
                        };
                        let m = pcm_segment(&a, &other, c.alpha, c.beta, mix_seed)?;
                        check_migration(&a, &other, &m)?;
                        self.migration_checks.fetch_add(1, Ordering::Relaxed);
                        let labels = m.point_labels().expect("segmentation mixup").to_vec();
                        (m.cloud, labels)
                    } else {
                        (a.cloud, a.labels)
                    };
                    let tr = params.forward(&cloud, Some(mode), false)?;
                    let (loss, mut d) = pointwise_cross_entropy(tr.sup.as_ref().expect("sup head").output(), num_classes, &labels);
                    d.iter_mut().for_each(|v| *v /= b as f64);
                    params.backward_into(&tr, &OutputGrads { sup: Some(d), ssl: None }, grads)?;
                    Ok(loss)
                }
            }
        })
    }

    /// Reconstruction half-step gradients for a batch of clouds (already
    /// augmented), weighted by `lambda / batch`.
    fn ssl_gradients(&self, clouds: &[PointCloud], epoch: usize, step: usize) -> Result<(Gradients, Vec<f64>)> {
        let params = &self.state.params;
        let c = &self.config;
        let (e, s) = (epoch as u64, step as u64);
        // the combined strategy picks one family for the whole batch
        let spec = match &c.deform.kind {
            DeformKind::Mixed { volume, feature, sample } => {
                let kind = match choose_family(seed::derive(c.seed, &[stream::FAMILY, e, s])) {
                    Family::Volume => volume,
                    Family::Feature => feature,
                    Family::Sample => sample,
                };
                c.deform.with_kind((**kind).clone())
            }
            _ => c.deform.clone(),
        };
        let weight = c.lambda / clouds.len() as f64;
        let positions: Vec<usize> = (0..clouds.len()).collect();
        accumulate_gradients(&params.config, &positions, |&j, grads| {
            let cloud = &clouds[j];
            let dseed = seed::derive(c.seed, &[stream::DEFORM, e, s, j as u64]);
            let pair = match spec.kind.feature_layer() {
                Some(layer) => {
                    let enc = params.encode(cloud)?;
                    let (data, dim) = enc.layer(layer).expect("layer validated at construction");
                    deform(cloud, &spec, Some(Features::new(data, dim)), dseed)?
                }
                None => deform(cloud, &spec, None, dseed)?,
            };
            let tr = params.forward(&pair.deformed, None, true)?;
            let out = tr.ssl.as_ref().expect("ssl head").output();
            let rec = PointCloud::from_trusted(out.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect());
            let r = chamfer_loss_region(&rec, &pair.original, &pair.region_indices)?;
            let d = r.grad_pred.iter().flatten().map(|v| weight * v).collect();
            params.backward_into(&tr, &OutputGrads { sup: None, ssl: Some(d) }, grads)?;
            Ok(r.value)
        })
    }

    fn val_metrics(&self) -> Result<(f64, f64)> {
        let params = &self.state.params;
        if self.val_idx.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let c = self.source.num_classes();
        match self.source {
            SourceData::Classification { samples, .. } => {
                let mut preds = Vec::with_capacity(self.val_idx.len());
                let mut labels = Vec::with_capacity(self.val_idx.len());
                let mut loss = 0.0;
                for &i in &self.val_idx {
                    let enc = params.encode(&samples[i].cloud)?;
                    let logits = params.head_sup(&enc, Mode::Eval)?;
                    let mut onehot = vec![0.0; c];
                    onehot[samples[i].label] = 1.0;
                    loss += softmax_cross_entropy(logits.output(), &onehot).0;
                    preds.push(argmax(logits.output()));
                    labels.push(samples[i].label);
                }
                Ok((accuracy(&preds, &labels)?, loss / self.val_idx.len() as f64))
            }
            SourceData::Segmentation { samples, .. } => {
                let mut preds = Vec::new();
                let mut labels = Vec::new();
                let mut loss = 0.0;
                for &i in &self.val_idx {
                    let enc = params.encode(&samples[i].cloud)?;
                    let logits = params.head_sup(&enc, Mode::Eval)?;
                    loss += pointwise_cross_entropy(logits.output(), c, &samples[i].labels).0;
                    preds.extend(logits.output().chunks_exact(c).map(argmax));
                    labels.extend_from_slice(&samples[i].labels);
                }
                Ok((mean_iou(&preds, &labels, c)?, loss / self.val_idx.len() as f64))
            }
        }
    }

    /// Runs one epoch and updates the best-validation snapshot.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let c = self.config.clone();
        let lr = cosine_lr(epoch, c.epochs, c.lr);
        let bsz = c.batch_size;
        let nb = self.batches_per_epoch();

        let mut src = self.train_idx.clone();
        src.shuffle(&mut seed::rng(seed::derive(c.seed, &[stream::SHUFFLE, epoch as u64, 0])));
        let mut tgt: Vec<usize> = (0..self.target.len()).collect();
        tgt.shuffle(&mut seed::rng(seed::derive(c.seed, &[stream::SHUFFLE, epoch as u64, 1])));

        let (mut sup_sum, mut sup_n, mut ssl_sum, mut ssl_n) = (0.0, 0usize, 0.0, 0usize);
        for step in 0..nb {
            let sb = &src[step * bsz..(step + 1) * bsz];
            let tb = &tgt[step * bsz..(step + 1) * bsz];

            let (g_sup, l_sup) = self
                .source_gradients(sb, epoch, step)
                .map_err(diverged(epoch, step, "source"))?;
            check_loss(&l_sup, epoch, step, "source")?;
            sup_sum += l_sup.iter().sum::<f64>();
            sup_n += l_sup.len();
            let mut pending = Some(g_sup);
            if c.schedule == StepSchedule::Alternating {
                let g = pending.take().expect("source gradients");
                self.state.adam.step(&mut self.state.params, &g, lr);
            }

            if c.lambda > 0.0 {
                let (e, s) = (epoch as u64, step as u64);
                let mut clouds: Vec<PointCloud> = tb
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| self.augmented(&self.target[i], &[stream::AUGMENT, e, s, 1, j as u64]))
                    .collect::<Result<_>>()?;
                if c.defrec_on == DefRecDomains::SourceAndTarget {
                    for (j, &i) in sb.iter().enumerate() {
                        clouds.push(self.augmented(self.source.cloud(i), &[stream::AUGMENT, e, s, 0, j as u64])?);
                    }
                }
                let (g_ssl, l_ssl) = self
                    .ssl_gradients(&clouds, epoch, step)
                    .map_err(diverged(epoch, step, "target"))?;
                check_loss(&l_ssl, epoch, step, "target")?;
                ssl_sum += l_ssl.iter().sum::<f64>();
                ssl_n += l_ssl.len();
                match pending.as_mut() {
                    Some(g) => g.add(&g_ssl),
                    None => self.state.adam.step(&mut self.state.params, &g_ssl, lr),
                }
            }
            if let Some(g) = pending {
                self.state.adam.step(&mut self.state.params, &g, lr);
            }
            if !self.state.params.layers.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    phase: "update",
                    detail: "non-finite parameters after the optimizer step".into(),
                });
            }
        }

        let (val_metric, val_loss) = self.val_metrics().map_err(diverged(epoch, nb, "validation"))?;
        let report = EpochReport {
            epoch,
            lr,
            steps: nb,
            sup_loss: sup_sum / sup_n.max(1) as f64,
            ssl_loss: if ssl_n == 0 { 0.0 } else { ssl_sum / ssl_n as f64 },
            val_metric,
            val_loss,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        let improves = match &self.state.best {
            None => true,
            Some(b) if val_metric.is_nan() => b.epoch < epoch,
            Some(b) => val_metric > b.metric || (val_metric == b.metric && val_loss < b.loss),
        };
        if improves {
            self.state.best = Some(BestCheckpoint {
                params: self.state.params.clone(),
                epoch,
                metric: val_metric,
                loss: val_loss,
            });
        }
        self.state.epoch += 1;
        self.state.reports.push(report.clone());
        Ok(report)
    }

    pub fn finish(self) -> TrainOutcome {
        let best = self.state.best.as_ref().expect("finish after at least one epoch");
        TrainOutcome {
            best: best.params.clone(),
            best_epoch: best.epoch,
            reports: self.state.reports.clone(),
            migration_checks: self.migration_checks.into_inner(),
            state: self.state,
        }
    }
}

/// Trains a classifier on labelled `source` and unlabelled `target` clouds
/// and returns the best source-validation checkpoint.
pub fn train(config: &TrainConfig, source: &[LabeledCloud], num_classes: usize, target: &[PointCloud]) -> Result<TrainOutcome> {
    run_to_end(Trainer::new(config.clone(), SourceData::Classification { samples: source, num_classes }, target)?)
}

/// Segmentation variant: per-point labels and a per-point supervised head.
pub fn train_segmentation(
    config: &TrainConfig,
    source: &[SegLabeledCloud],
    num_classes: usize,
    target: &[PointCloud],
) -> Result<TrainOutcome> {
    run_to_end(Trainer::new(config.clone(), SourceData::Segmentation { samples: source, num_classes }, target)?)
}

fn run_to_end(mut trainer: Trainer<'_>) -> Result<TrainOutcome> {
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize_unit_cube;
    use crate::network::Group;

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(12, 10, 0.1) >= 0.0);
    }

    #[test]
    fn defaults_match_the_grid() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 32);
        assert!(LAMBDA_GRID.contains(&c.lambda));
        assert!(LR_GRID.contains(&c.lr));
        assert!(WEIGHT_DECAY_GRID.contains(&c.weight_decay));
        assert_eq!(LAMBDA_GRID, [0.25, 1.0]);
        assert_eq!(TrainConfig::segmentation().batch_size, 16);
    }

    fn blob(n: usize, label: usize, rng: &mut seed::Rng) -> LabeledCloud {
        let scale = [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0]][label % 3];
        let pts = (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = rng.random_range(-1.0..1.0) * scale[a];
                }
                p
            })
            .collect();
        LabeledCloud {
            cloud: normalize_unit_cube(&PointCloud::new(pts).unwrap()),
            label,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            architecture: Architecture::Compact,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn data(seed_: u64) -> (Vec<LabeledCloud>, Vec<PointCloud>) {
        let mut rng = seed::rng(seed_);
        let source: Vec<LabeledCloud> = (0..15).map(|i| blob(24, i % 3, &mut rng)).collect();
        let target: Vec<PointCloud> = (0..11).map(|i| blob(24, i % 3, &mut rng).cloud).collect();
        (source, target)
    }

    #[test]
    fn stratified_split_is_balanced_and_disjoint() {
        let (source, _) = data(1);
        let sd = SourceData::Classification { samples: &source, num_classes: 3 };
        let (tr, va) = stratified_split(&sd, 0.2, 9);
        assert_eq!(tr.len() + va.len(), 15);
        assert_eq!(va.len(), 3);
        for c in 0..3 {
            assert_eq!(va.iter().filter(|&&i| source[i].label == c).count(), 1);
        }
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(stratified_split(&sd, 0.2, 9), (tr, va));
    }

    #[test]
    fn batches_follow_the_smaller_domain() {
        let (source, target) = data(2);
        let t = Trainer::new(tiny_config(), SourceData::Classification { samples: &source, num_classes: 3 }, &target).unwrap();
        // 12 training sources, 11 targets, batch 4
        assert_eq!(t.batches_per_epoch(), 2);
        let big = TrainConfig { batch_size: 12, ..tiny_config() };
        assert!(Trainer::new(big, SourceData::Classification { samples: &source, num_classes: 3 }, &target).is_err());
    }

    #[test]
    fn baseline_leaves_the_reconstruction_head_untouched() {
        let (source, target) = data(3);
        let cfg = tiny_config().baseline();
        let mut t = Trainer::new(cfg, SourceData::Classification { samples: &source, num_classes: 3 }, &target).unwrap();
        let before = t.state().params.layers.ssl.clone();
        let r = t.run_epoch().unwrap();
        assert_eq!(r.ssl_loss, 0.0);
        assert_eq!(t.state().params.layers.ssl, before);
        assert_eq!(t.state().adam.steps[Group::Ssl.index()], 0);
        assert_ne!(t.state().params.layers.sup, Trainer::new(tiny_config(), SourceData::Classification { samples: &source, num_classes: 3 }, &target).unwrap().state().params.layers.sup);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (source, target) = data(4);
        let a = train(&tiny_config(), &source, 3, &target).unwrap();
        let b = train(&tiny_config(), &source, 3, &target).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.reports, b.reports.iter().map(|r| EpochReport { wall_clock: a.reports[r.epoch].wall_clock, ..r.clone() }).collect::<Vec<_>>());
        assert!(a.reports.iter().all(|r| r.sup_loss.is_finite() && r.ssl_loss > 0.0));
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let (source, target) = data(5);
        let sd = SourceData::Classification { samples: &source, num_classes: 3 };
        let full = train(&tiny_config(), &source, 3, &target).unwrap();
        let mut first = Trainer::new(tiny_config(), sd, &target).unwrap();
        first.run_epoch().unwrap();
        let state = first.state().clone();
        let resumed = run_to_end(Trainer::resume(tiny_config(), sd, &target, state).unwrap()).unwrap();
        assert_eq!(resumed.best, full.best);
        assert_eq!(resumed.state.params, full.state.params);
    }

    #[test]
    fn alternatives_run() {
        let (source, target) = data(6);
        for cfg in [
            TrainConfig { schedule: StepSchedule::Combined, ..tiny_config() },
            TrainConfig { defrec_on: DefRecDomains::SourceAndTarget, ..tiny_config() },
            TrainConfig {
                deform: DeformSpec::new(DeformKind::mixed_default()),
                ..tiny_config()
            },
            TrainConfig {
                deform: DeformSpec::new(DeformKind::FeatureKnn { layer: 5, k_pts: 6 }),
                ..tiny_config()
            },
        ] {
            let out = train(&cfg, &source, 3, &target).unwrap();
            assert_eq!(out.reports.len(), 2);
        }
        let bad = TrainConfig {
            deform: DeformSpec::new(DeformKind::FeatureKnn { layer: 6, k_pts: 6 }),
            ..tiny_config()
        };
        assert!(train(&bad, &source, 3, &target).is_err());
    }

    #[test]
    fn segmentation_trains() {
        let mut rng = seed::rng(7);
        let source: Vec<SegLabeledCloud> = (0..10)
            .map(|_| {
                let c = blob(20, 0, &mut rng).cloud;
                let labels = c.points().iter().map(|p| usize::from(p[0] > 0.0) + 2 * usize::from(p[2] > 0.0)).collect();
                SegLabeledCloud::new(c, labels).unwrap()
            })
            .collect();
        let target: Vec<PointCloud> = (0..8).map(|_| blob(20, 1, &mut rng).cloud).collect();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            architecture: Architecture::Compact,
            ..TrainConfig::segmentation()
        };
        let out = train_segmentation(&cfg, &source, 4, &target).unwrap();
        assert!(out.reports.iter().all(|r| (0.0..=1.0).contains(&r.val_metric)));
        assert!(train(&cfg, &[], 4, &target).is_err());
    }
}
