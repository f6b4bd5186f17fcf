//! On-disk training runs.
//!
//! A run owns its output directory through a lock file and writes:
//!
//! - `config.json`: the resolved [`RunConfig`];
//! - `metrics.jsonl`: one [`EpochReport`] per line, without wall-clock
//!   fields, so two runs with the same seed produce identical files;
//! - `timing.log`: per-epoch wall-clock seconds;
//! - `last.dfck`: the full training state, used by `resume`;
//! - `best.dfck`: the best source-validation weights;
//! - `summary.json`: best epoch and target-test metric;
//! - `diverged.dfck` / `diverged.json` when training blows up.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{farthest_point_sample_from, normalize_unit_cube, LabeledCloud, PointCloud, SegLabeledCloud};
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{classifier_accuracy, segmenter_miou};
use crate::io::{load_archive, load_train_state, save_model, save_train_state, write_atomic, Archive};
use crate::network::{ModelParams, Task};
use crate::synth::{gen_benchmark, gen_segmentation_benchmark, Split};
use crate::train::{EpochReport, SourceData, TrainConfig, Trainer};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.log";
pub const LAST_CHECKPOINT: &str = "last.dfck";
pub const BEST_CHECKPOINT: &str = "best.dfck";
pub const SUMMARY_FILE: &str = "summary.json";

/// Exclusive ownership of an output directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Clouds ready for training and evaluation.
#[derive(Debug, Clone)]
pub enum PreparedData {
    Classification {
        source: Vec<LabeledCloud>,
        target: Vec<PointCloud>,
        target_test: Vec<LabeledCloud>,
        num_classes: usize,
    },
    Segmentation {
        source: Vec<SegLabeledCloud>,
        target: Vec<PointCloud>,
        target_test: Vec<SegLabeledCloud>,
        num_classes: usize,
    },
}

impl PreparedData {
    pub fn task(&self) -> Task {
        match self {
            PreparedData::Classification { .. } => Task::Classification,
            PreparedData::Segmentation { .. } => Task::Segmentation,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            PreparedData::Classification { num_classes, .. } | PreparedData::Segmentation { num_classes, .. } => *num_classes,
        }
    }

    pub fn source_data(&self) -> SourceData<'_> {
        match self {
            PreparedData::Classification { source, num_classes, .. } => SourceData::Classification {
                samples: source,
                num_classes: *num_classes,
            },
            PreparedData::Segmentation { source, num_classes, .. } => SourceData::Segmentation {
                samples: source,
                num_classes: *num_classes,
            },
        }
    }

    pub fn target(&self) -> &[PointCloud] {
        match self {
            PreparedData::Classification { target, .. } | PreparedData::Segmentation { target, .. } => target,
        }
    }

    /// Accuracy (classification) or mean IoU (segmentation) on the target
    /// test clouds.
    pub fn target_metric(&self, params: &ModelParams) -> Result<f64> {
        match self {
            PreparedData::Classification { target_test, .. } => classifier_accuracy(params, target_test),
            PreparedData::Segmentation { target_test, .. } => segmenter_miou(params, target_test),
        }
    }
}

/// Normalises a cloud and reduces it to `n` points by farthest point
/// sampling from the first point. Returns the kept indices.
fn resample(cloud: &PointCloud, n: usize) -> Result<(PointCloud, Vec<usize>)> {
    let idx = farthest_point_sample_from(cloud, n, 0)?;
    Ok((normalize_unit_cube(&cloud.select(&idx)?), idx))
}

fn archive_labels(archive: &Archive, what: &str) -> Result<Vec<usize>> {
    archive
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| Error::Format(format!("{what} sample {i} has no class label"))))
        .collect()
}

fn archive_classes(archives: &[&Archive], labels: impl Iterator<Item = usize>) -> usize {
    let header = archives.iter().map(|a| a.num_classes).max().unwrap_or(0);
    header.max(labels.max().map_or(0, |m| m + 1))
}

fn prepare_archives(task: Task, n: usize, source: &Path, target: &Path, target_test: &Path) -> Result<PreparedData> {
    let (src, tgt, test) = (load_archive(source)?, load_archive(target)?, load_archive(target_test)?);
    for (a, p) in [(&src, source), (&tgt, target), (&test, target_test)] {
        if a.samples.is_empty() {
            return Err(Error::Format(format!("{} holds no samples", p.display())));
        }
    }
    let target_clouds = tgt
        .samples
        .iter()
        .map(|s| resample(&s.cloud, n).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    match task {
        Task::Classification => {
            let (src_labels, test_labels) = (archive_labels(&src, "source")?, archive_labels(&test, "target test")?);
            let num_classes = archive_classes(&[&src, &test], src_labels.iter().chain(&test_labels).copied());
            let labelled = |a: &Archive, labels: &[usize]| -> Result<Vec<LabeledCloud>> {
                a.samples
                    .iter()
                    .zip(labels)
                    .map(|(s, &label)| Ok(LabeledCloud { cloud: resample(&s.cloud, n)?.0, label }))
                    .collect()
            };
            Ok(PreparedData::Classification {
                source: labelled(&src, &src_labels)?,
                target: target_clouds,
                target_test: labelled(&test, &test_labels)?,
                num_classes,
            })
        }
        Task::Segmentation => {
            let per_point = |a: &Archive, what: &str| -> Result<Vec<SegLabeledCloud>> {
                a.samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let labels = s
                            .point_labels
                            .as_ref()
                            .ok_or_else(|| Error::Format(format!("{what} sample {i} has no per-point labels")))?;
                        let (cloud, idx) = resample(&s.cloud, n)?;
                        SegLabeledCloud::new(cloud, idx.iter().map(|&j| labels[j]).collect())
                    })
                    .collect()
            };
            let (source, target_test) = (per_point(&src, "source")?, per_point(&test, "target test")?);
            let all = source.iter().chain(&target_test).flat_map(|s| s.labels.iter().copied());
            let num_classes = archive_classes(&[&src, &test], all);
            Ok(PreparedData::Segmentation {
                source,
                target: target_clouds,
                target_test,
                num_classes,
            })
        }
    }
}

/// Loads or generates the data a configuration describes.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    config.validate()?;
    match &config.data {
        DataConfig::Synthetic { seed, .. } => {
            let (source, target) = gen_benchmark(&config.synthetic_bench()?, *seed)?;
            Ok(PreparedData::Classification {
                num_classes: source.num_classes,
                source: source.subset(Split::Train),
                target: target.subset(Split::Train).into_iter().map(|s| s.cloud).collect(),
                target_test: target.subset(Split::Test),
            })
        }
        DataConfig::SyntheticSegmentation { seed, .. } => {
            let (source, target) = gen_segmentation_benchmark(&config.synthetic_seg_bench()?, *seed)?;
            Ok(PreparedData::Segmentation {
                num_classes: source.num_classes,
                source: source.subset(Split::Train),
                target: target.subset(Split::Train).into_iter().map(|s| s.cloud).collect(),
                target_test: target.subset(Split::Test),
            })
        }
        DataConfig::Archives { source, target, target_test } => {
            prepare_archives(config.train.task, config.n_points(), source, target, target_test)
        }
    }
}

/// What a finished run reports in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub epochs: usize,
    /// Target-test accuracy or mean IoU of the best checkpoint.
    pub target_metric: f64,
    /// The same metric for the last epoch's weights.
    pub last_target_metric: f64,
}

fn metrics_text(reports: &[EpochReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn dump_divergence(dir: &Path, config: &TrainConfig, trainer: &Trainer<'_>, err: &Error) -> Result<()> {
    save_train_state(&dir.join("diverged.dfck"), config, trainer.state())?;
    let report = serde_json::json!({
        "error": err.to_string(),
        "completed_epochs": trainer.state().epoch,
        "params_finite": trainer.state().params.layers.is_finite(),
    });
    write_atomic(&dir.join("diverged.json"), serde_json::to_string_pretty(&report)?.as_bytes())
}

/// Trains one configuration into `dir`. With `resume`, continues from
/// `dir/last.dfck` when it exists.
pub fn run_training(config: &TrainConfig, run: &RunConfig, data: &PreparedData, dir: &Path, resume: bool) -> Result<RunSummary> {
    let _lock = DirLock::acquire(dir)?;
    let resolved = RunConfig {
        train: config.clone(),
        grid: None,
        out_dir: Some(dir.to_path_buf()),
        ..run.clone()
    };
    write_atomic(&dir.join(CONFIG_FILE), resolved.to_json()?.as_bytes())?;

    let last = dir.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let (saved, state) = load_train_state(&last)?;
        if &saved != config {
            return Err(Error::InvalidArgument(format!(
                "{} was written with a different training configuration",
                last.display()
            )));
        }
        Trainer::resume(config.clone(), data.source_data(), data.target(), state)?
    } else {
        // a fresh run starts a fresh timing log
        write_atomic(&dir.join(TIMING_FILE), b"")?;
        Trainer::new(config.clone(), data.source_data(), data.target())?
    };

    while !trainer.is_finished() {
        let report = match trainer.run_epoch() {
            Ok(r) => r,
            Err(e) => {
                if e.is_numerical() {
                    dump_divergence(dir, config, &trainer, &e)?;
                }
                return Err(e);
            }
        };
        let state = trainer.state();
        write_atomic(&dir.join(METRICS_FILE), metrics_text(&state.reports)?.as_bytes())?;
        save_train_state(&last, config, state)?;
        if let Some(best) = &state.best {
            if best.epoch == report.epoch {
                save_model(&dir.join(BEST_CHECKPOINT), &best.params, Some(config))?;
            }
        }
        let mut timing = OpenOptions::new().create(true).append(true).open(dir.join(TIMING_FILE))?;
        writeln!(timing, "epoch {} {:.3}s", report.epoch, report.wall_clock)?;
    }

    let outcome = trainer.finish();
    let best_val = outcome.reports[outcome.best_epoch].val_metric;
    let summary = RunSummary {
        best_epoch: outcome.best_epoch,
        best_val_metric: (!best_val.is_nan()).then_some(best_val),
        epochs: outcome.reports.len(),
        target_metric: data.target_metric(&outcome.best)?,
        last_target_metric: data.target_metric(&outcome.state.params)?,
    };
    write_atomic(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Runs every grid point of `run` in `dir/grid-NNN` (or directly in `dir`
/// without a grid) and returns the index of the point with the best source
/// validation metric.
pub fn run_grid(run: &RunConfig, dir: &Path, resume: bool) -> Result<(usize, Vec<RunSummary>)> {
    let data = prepare_data(run)?;
    let configs = run.expand_grid();
    if run.grid.is_none() {
        let summary = run_training(&configs[0], run, &data, dir, resume)?;
        return Ok((0, vec![summary]));
    }
    let _lock = DirLock::acquire(dir)?;
    let mut summaries = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        summaries.push(run_training(c, run, &data, &dir.join(format!("grid-{i:03}")), resume)?);
    }
    let score = |s: &RunSummary| s.best_val_metric.unwrap_or(f64::NEG_INFINITY);
    let best = (0..summaries.len())
        .reduce(|a, b| if score(&summaries[b]) > score(&summaries[a]) { b } else { a })
        .expect("at least one grid point");
    let table = serde_json::json!({
        "selected": best,
        "runs": configs.iter().zip(&summaries).map(|(c, s)| serde_json::json!({
            "lambda": c.lambda,
            "lr": c.lr,
            "weight_decay": c.weight_decay,
            "summary": s,
        })).collect::<Vec<_>>(),
    });
    write_atomic(&dir.join("grid.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    Ok((best, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_model, save_archive, ArchiveSample};
    use crate::synth::{BenchSpec, Corruption};
    use crate::train::Architecture;

    fn small_run() -> RunConfig {
        RunConfig {
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                architecture: Architecture::Compact,
                ..TrainConfig::default()
            },
            data: DataConfig::Synthetic {
                seed: 3,
                bench: BenchSpec {
                    train_count: 12,
                    test_count: 6,
                    n_points: 32,
                    dense_points: 160,
                    corruption: Corruption::default(),
                    ..BenchSpec::default()
                },
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn run_writes_reproducible_outputs() {
        let run = small_run();
        let data = prepare_data(&run).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = run_training(&run.train, &run, &data, a.path(), false).unwrap();
        let sb = run_training(&run.train, &run, &data, b.path(), false).unwrap();
        assert_eq!(sa, sb);
        for f in [METRICS_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT, SUMMARY_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let metrics = fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        assert!(!metrics.contains("wall_clock"));
        assert!(!a.path().join(LOCK_FILE).exists());
        let (params, cfg) = load_model(&a.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(cfg.as_ref(), Some(&run.train));
        assert_eq!(data.target_metric(&params).unwrap(), sa.target_metric);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let run = small_run();
        let data = prepare_data(&run).unwrap();
        let full = tempfile::tempdir().unwrap();
        run_training(&run.train, &run, &data, full.path(), false).unwrap();

        // stop after the first epoch, then resume in the same directory
        let stop = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(run.train.clone(), data.source_data(), data.target()).unwrap();
        trainer.run_epoch().unwrap();
        save_train_state(&stop.path().join(LAST_CHECKPOINT), &run.train, trainer.state()).unwrap();
        run_training(&run.train, &run, &data, stop.path(), true).unwrap();
        for f in [METRICS_FILE, LAST_CHECKPOINT, SUMMARY_FILE] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(stop.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_rejects_other_config() {
        let run = small_run();
        let data = prepare_data(&run).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_training(&run.train, &run, &data, dir.path(), false).unwrap();
        let other = TrainConfig { lr: 0.5, ..run.train.clone() };
        assert!(run_training(&other, &run, &data, dir.path(), true).is_err());
    }

    #[test]
    fn divergence_leaves_a_diagnostic_dump() {
        let mut run = small_run();
        run.train.lr = 1e300;
        let data = prepare_data(&run).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_training(&run.train, &run, &data, dir.path(), false).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(dir.path().join("diverged.dfck").exists());
        let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("diverged.json")).unwrap()).unwrap();
        assert!(report["error"].as_str().unwrap().contains("diverged"));
    }

    #[test]
    fn grid_runs_every_point() {
        let mut run = small_run();
        run.train.epochs = 1;
        run.grid = Some(crate::config::Grid {
            lambda: vec![0.0, 1.0],
            lr: vec![],
            weight_decay: vec![],
        });
        let dir = tempfile::tempdir().unwrap();
        let (best, summaries) = run_grid(&run, dir.path(), false).unwrap();
        assert_eq!(summaries.len(), 2);
        assert!(best < 2);
        assert!(dir.path().join("grid-001").join(METRICS_FILE).exists());
        assert!(dir.path().join("grid.json").exists());
    }

    #[test]
    fn archives_are_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = |k: usize| {
            PointCloud::new((0..40).map(|j| [j as f64 * 0.1 + k as f64, (j % 7) as f64, (j % 3) as f64 * 2.0]).collect()).unwrap()
        };
        let archive = |labelled: bool| Archive {
            num_classes: 2,
            samples: (0..6)
                .map(|k| ArchiveSample {
                    cloud: cloud(k),
                    label: labelled.then_some(k % 2),
                    point_labels: None,
                })
                .collect(),
        };
        let paths: Vec<PathBuf> = ["s.dfrc", "t.dfrc", "tt.dfrc"].iter().map(|p| dir.path().join(p)).collect();
        save_archive(&paths[0], &archive(true)).unwrap();
        save_archive(&paths[1], &archive(false)).unwrap();
        save_archive(&paths[2], &archive(true)).unwrap();
        let run = RunConfig {
            data: DataConfig::Archives {
                source: paths[0].clone(),
                target: paths[1].clone(),
                target_test: paths[2].clone(),
            },
            n_points: Some(16),
            ..RunConfig::default()
        };
        let data = prepare_data(&run).unwrap();
        assert_eq!(data.num_classes(), 2);
        assert!(data.target().iter().all(|c| c.len() == 16));
        let (lo, hi) = data.target()[0].bounds();
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        assert!((extent - 1.0).abs() < 1e-12);

        let too_many = RunConfig { n_points: Some(41), ..run.clone() };
        assert!(matches!(prepare_data(&too_many), Err(Error::SampleSizeExceedsCloud { .. })));
        save_archive(&paths[0], &archive(false)).unwrap();
        assert!(matches!(prepare_data(&run), Err(Error::Format(_))));
    }
}
