//! Runs the four adaptation arms (baseline, reconstruction only, mixup only,
//! both) on the synthetic benchmark and prints target test accuracy.
//!
//! Settings are `key=value` arguments, e.g.
//! `cargo run --release --example adaptation -- seeds=3 epochs=30 lambda=1`.

use std::collections::HashMap;
use std::time::Instant;

use defrec::deform::{DeformKind, DeformSpec};
use defrec::eval::{classifier_accuracy, confusion_matrix};
use defrec::synth::{gen_benchmark, BenchSpec, Split};
use defrec::train::{train, Architecture, DefRecDomains, StepSchedule, TrainConfig};

fn main() -> defrec::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("numeric setting"));
    let seeds = get("seeds", 3.0) as u64;
    let bench_seed = get("bench_seed", 0.0) as u64;

    let mut spec = BenchSpec::default();
    spec.corruption.occlusion_fraction = get("occlusion", spec.corruption.occlusion_fraction);
    spec.corruption.noise_sigma = get("noise", spec.corruption.noise_sigma);
    spec.corruption.sparse_ratio = get("sparse", spec.corruption.sparse_ratio);
    spec.test_count = get("test", spec.test_count as f64) as usize;
    spec.dense_points = get("dense", spec.dense_points as f64) as usize;
    if let Some(list) = args.get("classes") {
        spec.classes = list
            .split(',')
            .map(|c| serde_json::from_str(&format!("\"{c}\"")).expect("primitive name"))
            .collect();
    }
    if let Some(list) = args.get("occ") {
        spec.corruption.occlusion = list
            .split(',')
            .map(|c| serde_json::from_str(&format!("\"{c}\"")).expect("occlusion scheme"))
            .collect();
    }
    let (source, target) = gen_benchmark(&spec, bench_seed)?;
    let src_train = source.subset(Split::Train);
    let tgt_train: Vec<_> = target.subset(Split::Train).into_iter().map(|s| s.cloud).collect();
    let tgt_test = target.subset(Split::Test);

    let deform = match args.get("deform").map(String::as_str) {
        Some("sphere") => DeformKind::Sphere { r: get("r", 0.2) },
        Some("mixed") => DeformKind::mixed_default(),
        Some("lambertian") => DeformKind::SampleLambertian,
        Some("split") => DeformKind::SampleSplit,
        _ => DeformKind::VoxelGrid { k: 3 },
    };
    let base = TrainConfig {
        epochs: get("epochs", 30.0) as usize,
        lr: get("lr", 1e-3),
        batch_size: get("batch", 32.0) as usize,
        weight_decay: get("wd", 5e-5),
        lambda: get("lambda", 1.0),
        alpha: get("alpha", 1.0),
        beta: get("alpha", 1.0),
        architecture: match args.get("arch").map(String::as_str) {
            Some("reference") => Architecture::Reference,
            _ => Architecture::Compact,
        },
        deform: DeformSpec::new(deform),
        schedule: match args.get("schedule").map(String::as_str) {
            Some("combined") => StepSchedule::Combined,
            _ => StepSchedule::Alternating,
        },
        defrec_on: match args.get("on").map(String::as_str) {
            Some("both") => DefRecDomains::SourceAndTarget,
            _ => DefRecDomains::TargetOnly,
        },
        ..TrainConfig::default()
    };
    let arms = [
        ("baseline", base.baseline()),
        ("defrec", TrainConfig { pcm_enabled: false, ..base.clone() }),
        ("pcm", TrainConfig { lambda: 0.0, ..base.clone() }),
        ("defrec+pcm", base.clone()),
    ];
    let only = args.get("arms");
    for (name, cfg) in arms {
        if only.is_some_and(|o| !o.split(',').any(|a| a == name)) {
            continue;
        }
        let mut accs = Vec::new();
        for s in 0..seeds {
            let t = Instant::now();
            let out = train(&TrainConfig { seed: s, ..cfg.clone() }, &src_train, source.num_classes, &tgt_train)?;
            let acc = classifier_accuracy(&out.best, &tgt_test)?;
            let last = classifier_accuracy(&out.state.params, &tgt_test)?;
            println!(
                "{name:<11} seed {s}: target acc {acc:.3} (last epoch {last:.3}), best epoch {}, val {:.3}, {:.1}s",
                out.best_epoch,
                out.reports[out.best_epoch].val_metric,
                t.elapsed().as_secs_f64()
            );
            if args.contains_key("confusion") {
                let preds = tgt_test.iter().map(|t| out.best.predict(&t.cloud)).collect::<defrec::Result<Vec<_>>>()?;
                let labels: Vec<usize> = tgt_test.iter().map(|t| t.label).collect();
                println!("  target confusion (rows true) {:?}", confusion_matrix(&preds, &labels, source.num_classes)?);
            }
            accs.push(acc);
        }
        println!("{name:<11} mean {:.4}", accs.iter().sum::<f64>() / accs.len() as f64);
    }
    Ok(())
}
