//! Run configuration: a single JSON document holding the training
//! hyper-parameters, where the data comes from, the points per cloud and an
//! optional hyper-parameter grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Task;
use crate::synth::{BenchSpec, SegBenchSpec};
use crate::train::TrainConfig;

/// Points per cloud when the configuration does not say otherwise.
pub fn default_points(task: Task) -> usize {
    match task {
        Task::Classification => 1024,
        Task::Segmentation => 2048,
    }
}

/// Where the clouds come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// The synthetic classification benchmark, generated in memory.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        bench: BenchSpec,
    },
    /// The synthetic part-segmentation benchmark.
    SyntheticSegmentation {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        bench: SegBenchSpec,
    },
    /// `DFRC` archives: labelled source clouds, unlabelled target training
    /// clouds and labelled target test clouds.
    Archives {
        source: PathBuf,
        target: PathBuf,
        target_test: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            seed: 0,
            bench: BenchSpec::default(),
        }
    }
}

/// Lists of values to search over; every combination is one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lr: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight_decay: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Points per cloud. Defaults to the synthetic benchmark's own count, or
    /// to 1024 (classification) and 2048 (segmentation) for archives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
}

impl RunConfig {
    pub fn n_points(&self) -> usize {
        match (&self.n_points, &self.data) {
            (Some(n), _) => *n,
            (None, DataConfig::Synthetic { bench, .. }) => bench.n_points,
            (None, DataConfig::SyntheticSegmentation { bench, .. }) => bench.n_points,
            (None, DataConfig::Archives { .. }) => default_points(self.train.task),
        }
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.train.validate()?;
        let n = self.n_points();
        if n == 0 {
            return bad("n_points must be positive".into());
        }
        match &self.data {
            DataConfig::Synthetic { .. } => {
                if self.train.task != Task::Classification {
                    return bad("the synthetic classification benchmark needs task \"classification\"".into());
                }
                self.synthetic_bench()?.validate()?;
            }
            DataConfig::SyntheticSegmentation { .. } => {
                if self.train.task != Task::Segmentation {
                    return bad("the synthetic segmentation benchmark needs task \"segmentation\"".into());
                }
                let spec = self.synthetic_seg_bench()?;
                if spec.train_count == 0 {
                    return bad("train_count must be positive".into());
                }
            }
            DataConfig::Archives { .. } => {}
        }
        if let Some(g) = &self.grid {
            if g.lambda.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("grid lambda values must be finite and >= 0".into());
            }
            if g.lr.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("grid lr values must be finite and > 0".into());
            }
            if g.weight_decay.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("grid weight_decay values must be finite and >= 0".into());
            }
        }
        Ok(())
    }

    /// The classification benchmark spec with the run's point count.
    pub fn synthetic_bench(&self) -> Result<BenchSpec> {
        match &self.data {
            DataConfig::Synthetic { bench, .. } => Ok(BenchSpec {
                n_points: self.n_points(),
                ..bench.clone()
            }),
            _ => Err(Error::InvalidArgument("data source is not the synthetic classification benchmark".into())),
        }
    }

    pub fn synthetic_seg_bench(&self) -> Result<SegBenchSpec> {
        match &self.data {
            DataConfig::SyntheticSegmentation { bench, .. } => Ok(SegBenchSpec {
                n_points: self.n_points(),
                ..bench.clone()
            }),
            _ => Err(Error::InvalidArgument("data source is not the synthetic segmentation benchmark".into())),
        }
    }

    /// One training configuration per grid point, in row-major order over
    /// (lambda, lr, weight_decay). Without a grid this is just `[train]`.
    pub fn expand_grid(&self) -> Vec<TrainConfig> {
        let Some(g) = &self.grid else {
            return vec![self.train.clone()];
        };
        let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
        let mut out = Vec::new();
        for &lambda in &or_base(&g.lambda, self.train.lambda) {
            for &lr in &or_base(&g.lr, self.train.lr) {
                for &weight_decay in &or_base(&g.weight_decay, self.train.weight_decay) {
                    out.push(TrainConfig {
                        lambda,
                        lr,
                        weight_decay,
                        ..self.train.clone()
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{DeformKind, DeformSpec};
    use crate::train::{LAMBDA_GRID, LR_GRID, WEIGHT_DECAY_GRID};
    use proptest::prelude::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.n_points(), BenchSpec::default().n_points);
        let files = DataConfig::Archives {
            source: "s".into(),
            target: "t".into(),
            target_test: "tt".into(),
        };
        let cls = RunConfig { data: files.clone(), ..RunConfig::default() };
        assert_eq!(cls.n_points(), 1024);
        let seg = RunConfig {
            train: TrainConfig::segmentation(),
            data: files,
            ..RunConfig::default()
        };
        assert_eq!(seg.n_points(), 2048);
    }

    #[test]
    fn synthetic_bench_takes_run_point_count() {
        let c = RunConfig::from_json(r#"{"n_points": 128}"#).unwrap();
        assert_eq!(c.synthetic_bench().unwrap().n_points, 128);
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.synthetic_bench().unwrap().n_points, BenchSpec::default().n_points);
    }

    #[test]
    fn rejects_bad_documents() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"lr": -1}}"#,
            r#"{"train": {"lambda": "x"}}"#,
            r#"{"n_points": 0}"#,
            r#"{"train": {"task": "segmentation", "batch_size": 16}}"#,
            r#"{"data": {"kind": "archives", "source": "a"}}"#,
            r#"{"grid": {"lr": [0.001, 0]}}"#,
            r#"{"data": {"kind": "synthetic", "bench": {"classes": ["box"], "train_count": 10, "test_count": 1, "n_points": 8, "dense_points": 64, "corruption": {"occlusion": [], "occlusion_fraction": 0.0, "noise_sigma": 0.0, "sparse_ratio": 1.0}}}}"#,
            "not json",
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn grid_expansion() {
        let c = RunConfig {
            grid: Some(Grid {
                lambda: LAMBDA_GRID.to_vec(),
                lr: LR_GRID.to_vec(),
                weight_decay: WEIGHT_DECAY_GRID.to_vec(),
            }),
            ..RunConfig::default()
        };
        let runs = c.expand_grid();
        assert_eq!(runs.len(), LAMBDA_GRID.len() * LR_GRID.len() * WEIGHT_DECAY_GRID.len());
        assert_eq!(runs[0].lambda, LAMBDA_GRID[0]);
        assert_eq!(runs[1].weight_decay, WEIGHT_DECAY_GRID[1.min(WEIGHT_DECAY_GRID.len() - 1)]);
        let partial = RunConfig {
            grid: Some(Grid {
                lambda: vec![0.0, 0.5],
                lr: vec![],
                weight_decay: vec![],
            }),
            ..RunConfig::default()
        };
        let runs = partial.expand_grid();
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|r| r.lr == partial.train.lr));
        assert_eq!(RunConfig::default().expand_grid(), vec![TrainConfig::default()]);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            0.0f64..10.0,
            1e-6f64..1.0,
            0.0f64..1e-2,
            1usize..300,
            1usize..64,
            any::<u64>(),
            any::<bool>(),
            prop::option::of(1usize..300),
            prop::option::of("[a-z]{1,8}"),
            0usize..3,
        )
            .prop_map(|(lambda, lr, weight_decay, epochs, batch_size, seed, pcm, n, out, deform)| RunConfig {
                train: TrainConfig {
                    lambda,
                    lr,
                    weight_decay,
                    epochs,
                    batch_size,
                    seed,
                    pcm_enabled: pcm,
                    deform: DeformSpec::new(match deform {
                        0 => DeformKind::VoxelGrid { k: 3 },
                        1 => DeformKind::Sphere { r: 0.3 },
                        _ => DeformKind::mixed_default(),
                    }),
                    ..TrainConfig::default()
                },
                data: if seed % 2 == 0 {
                    DataConfig::default()
                } else {
                    DataConfig::Archives {
                        source: "s.dfrc".into(),
                        target: "t.dfrc".into(),
                        target_test: "tt.dfrc".into(),
                    }
                },
                n_points: n,
                out_dir: out.map(PathBuf::from),
                grid: (seed % 3 == 0).then(|| Grid {
                    lambda: vec![lambda, 0.0],
                    lr: vec![lr],
                    weight_decay: vec![],
                }),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn parse_serialize_parse_is_a_fixed_point(c in arb_config()) {
            let text = c.to_json().unwrap();
            let parsed = RunConfig::from_json(&text).unwrap();
            prop_assert_eq!(&parsed, &c);
            prop_assert_eq!(parsed.to_json().unwrap(), text);
        }
    }
}
