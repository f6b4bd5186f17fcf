use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use defrec::config::{DataConfig, RunConfig};
use defrec::deform::{deform, DeformKind, DeformSpec, Features};
use defrec::eval::{fit_class_gaussians, log_perplexity, Pca, DEFAULT_COVARIANCE_REG};
use defrec::io::{
    load_cloud, load_features, load_model, save_archive, save_cloud, save_features, write_atomic, Archive, ArchiveSample,
    FeatureDump,
};
use defrec::network::Task;
use defrec::pcm::{pcm_classify, pcm_segment, DEFAULT_ALPHA, DEFAULT_BETA};
use defrec::run::{prepare_data, run_grid, PreparedData};
use defrec::synth::{gen_benchmark, gen_segmentation_benchmark, SegBenchSpec, Split};
use defrec::{seed, Error, LabeledCloud, SegLabeledCloud};

/// Deformation reconstruction and point cloud mixup for domain adaptation.
#[derive(Debug, Parser)]
#[command(name = "defrec", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as DFRC archives.
    GenBench(GenBenchArgs),
    /// Deform clouds and write (deformed, original, region) triples.
    Deform(DeformArgs),
    /// Mix two clouds.
    Mixup(MixupArgs),
    /// Train (or resume) a run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured target test data.
    Eval(EvalArgs),
    /// Log-perplexity of target features under source class Gaussians.
    Perplexity(PerplexityArgs),
    /// Gradient checks and oracle comparisons.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Debug, Args)]
struct GenBenchArgs {
    /// Which benchmark, when no configuration is given.
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Voxel,
    Sphere,
    Feature,
    Split,
    Gradient,
    Lambertian,
    Mixed,
}

#[derive(Debug, Args)]
struct DeformArgs {
    /// Input clouds (.xyz, .ply or single-sample .dfrc).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Voxels per axis.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Sphere radius.
    #[arg(long, default_value_t = 0.2)]
    r: f64,
    /// Encoder layer for feature neighbourhoods.
    #[arg(long, default_value_t = 3)]
    layer: usize,
    /// Points per feature neighbourhood.
    #[arg(long, default_value_t = 150)]
    k_pts: usize,
    /// Checkpoint supplying encoder features (feature and mixed kinds).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output extension: xyz or ply.
    #[arg(long, default_value = "xyz")]
    format: String,
}

#[derive(Debug, Args)]
struct MixupArgs {
    a: PathBuf,
    b: PathBuf,
    /// Class labels of the two clouds (ignored when both carry per-point
    /// labels).
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    labels: Option<Vec<usize>>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Disable point cloud mixup.
    #[arg(long)]
    no_pcm: bool,
    /// The control arm: no reconstruction and no mixup.
    #[arg(long)]
    baseline: bool,
    /// Continue from the output directory's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write last-hidden-layer features of this domain's labelled
    /// clouds to FILE.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "target")]
    domain: DomainArg,
}

#[derive(Debug, Args)]
struct PerplexityArgs {
    source: PathBuf,
    target: PathBuf,
    /// Average over classes instead of samples.
    #[arg(long)]
    balanced: bool,
    /// Ridge added to each class covariance.
    #[arg(long, default_value_t = DEFAULT_COVARIANCE_REG)]
    reg: f64,
    /// Project both sets onto the top principal components of the source.
    #[arg(long)]
    pca: Option<usize>,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = Some(o.clone());
    }
    Ok(config)
}

fn out_dir(cli: &Cli, config: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = config.out_dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn gen_bench(cli: &Cli, args: &GenBenchArgs) -> anyhow::Result<()> {
    let mut config = load_config(cli)?;
    if cli.config.is_none() {
        if let TaskArg::Segmentation = args.task {
            config.train = defrec::train::TrainConfig::segmentation();
            config.data = DataConfig::SyntheticSegmentation { seed: 0, bench: SegBenchSpec::default() };
        }
    }
    if let Some(s) = cli.seed {
        match &mut config.data {
            DataConfig::Synthetic { seed, .. } | DataConfig::SyntheticSegmentation { seed, .. } => *seed = s,
            DataConfig::Archives { .. } => {}
        }
    }
    config.validate()?;
    let dir = out_dir(cli, &config)?;
    let cls = |d: &defrec::synth::Dataset<LabeledCloud>, split: Split, labelled: bool| Archive {
        num_classes: d.num_classes,
        samples: d
            .subset(split)
            .into_iter()
            .map(|s| ArchiveSample { cloud: s.cloud, label: labelled.then_some(s.label), point_labels: None })
            .collect(),
    };
    let seg = |d: &defrec::synth::Dataset<SegLabeledCloud>, split: Split, labelled: bool| Archive {
        num_classes: d.num_classes,
        samples: d
            .subset(split)
            .into_iter()
            .map(|s| ArchiveSample { cloud: s.cloud, label: None, point_labels: labelled.then_some(s.labels) })
            .collect(),
    };
    let archives = match &config.data {
        DataConfig::Synthetic { seed, .. } => {
            let (s, t) = gen_benchmark(&config.synthetic_bench()?, *seed)?;
            [cls(&s, Split::Train, true), cls(&s, Split::Test, true), cls(&t, Split::Train, false), cls(&t, Split::Test, true)]
        }
        DataConfig::SyntheticSegmentation { seed, .. } => {
            let (s, t) = gen_segmentation_benchmark(&config.synthetic_seg_bench()?, *seed)?;
            [seg(&s, Split::Train, true), seg(&s, Split::Test, true), seg(&t, Split::Train, false), seg(&t, Split::Test, true)]
        }
        DataConfig::Archives { .. } => bail!(Error::InvalidArgument("gen-bench needs a synthetic data configuration".into())),
    };
    let names = ["source.dfrc", "source_test.dfrc", "target.dfrc", "target_test.dfrc"];
    for (name, a) in names.iter().zip(&archives) {
        save_archive(&dir.join(name), a)?;
        println!("{}: {} clouds", dir.join(name).display(), a.samples.len());
    }
    // a configuration that trains on the archives just written
    let n_points = config.n_points();
    let follow = RunConfig {
        data: DataConfig::Archives {
            source: dir.join(names[0]),
            target: dir.join(names[2]),
            target_test: dir.join(names[3]),
        },
        n_points: Some(n_points),
        out_dir: None,
        ..config
    };
    write_atomic(&dir.join("config.json"), follow.to_json()?.as_bytes())?;
    Ok(())
}

fn deform_kind(args: &DeformArgs) -> DeformKind {
    match args.kind {
        KindArg::Voxel => DeformKind::VoxelGrid { k: args.k },
        KindArg::Sphere => DeformKind::Sphere { r: args.r },
        KindArg::Feature => DeformKind::FeatureKnn { layer: args.layer, k_pts: args.k_pts },
        KindArg::Split => DeformKind::SampleSplit,
        KindArg::Gradient => DeformKind::SampleGradient,
        KindArg::Lambertian => DeformKind::SampleLambertian,
        KindArg::Mixed => DeformKind::Mixed {
            volume: Box::new(DeformKind::VoxelGrid { k: args.k }),
            feature: Box::new(DeformKind::FeatureKnn { layer: args.layer, k_pts: args.k_pts }),
            sample: Box::new(DeformKind::SampleLambertian),
        },
    }
}

fn deform_cmd(cli: &Cli, args: &DeformArgs) -> anyhow::Result<()> {
    if !matches!(args.format.as_str(), "xyz" | "ply") {
        bail!(Error::InvalidArgument(format!("unknown output format {:?} (use xyz or ply)", args.format)));
    }
    let spec = DeformSpec::new(deform_kind(args));
    spec.validate()?;
    let model = match &args.checkpoint {
        Some(p) => Some(load_model(p).with_context(|| format!("loading {}", p.display()))?.0),
        None => None,
    };
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let base = cli.seed.unwrap_or(0);
    for (i, input) in args.inputs.iter().enumerate() {
        let cloud = load_cloud(input).with_context(|| format!("loading {}", input.display()))?.cloud;
        let s = seed::derive(base, &[i as u64]);
        let pair = match (spec.kind.feature_layer(), &model) {
            (Some(layer), Some(m)) => {
                let enc = m.encode(&cloud)?;
                let (data, dim) = enc
                    .layer(layer)
                    .ok_or_else(|| Error::InvalidArgument(format!("the checkpoint has no encoder layer {layer}")))?;
                deform(&cloud, &spec, Some(Features::new(data, dim)), s)?
            }
            (Some(_), None) if matches!(args.kind, KindArg::Feature) => {
                bail!(Error::InvalidArgument("feature deformations need --checkpoint".into()))
            }
            _ => deform(&cloud, &spec, None, s)?,
        };
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
        let path = |what: &str, ext: &str| dir.join(format!("{stem}.{what}.{ext}"));
        save_cloud(&path("deformed", &args.format), &pair.deformed, None)?;
        save_cloud(&path("original", &args.format), &pair.original, None)?;
        let indices: String = pair.region_indices.iter().map(|i| format!("{i}\n")).collect();
        write_atomic(&path("indices", "txt"), indices.as_bytes())?;
        println!("{}: {} of {} points deformed", input.display(), pair.region_indices.len(), cloud.len());
    }
    Ok(())
}

fn mixup_cmd(cli: &Cli, args: &MixupArgs) -> anyhow::Result<()> {
    let load = |p: &Path| load_cloud(p).with_context(|| format!("loading {}", p.display()));
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let s = cli.seed.unwrap_or(0);
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let mixed = match (a.labels, b.labels) {
        (Some(la), Some(lb)) => {
            let a = SegLabeledCloud::new(a.cloud, la)?;
            let b = SegLabeledCloud::new(b.cloud, lb)?;
            pcm_segment(&a, &b, args.alpha, args.beta, s)?
        }
        _ => {
            let labels = args.labels.clone().unwrap_or_else(|| vec![0, 1]);
            let classes = args.classes.unwrap_or(labels[0].max(labels[1]) + 1);
            let a = LabeledCloud { cloud: a.cloud, label: labels[0] };
            let b = LabeledCloud { cloud: b.cloud, label: labels[1] };
            pcm_classify(&a, &b, classes, args.alpha, args.beta, s)?
        }
    };
    save_cloud(&dir.join("mixed.xyz"), &mixed.cloud, mixed.point_labels())?;
    write_json(
        &dir.join("mixed.json"),
        &serde_json::json!({
            "gamma": mixed.gamma,
            "from_first": mixed.from_first,
            "soft_label": mixed.soft_label(),
        }),
    )?;
    println!("gamma {:.6}, {} points from {}", mixed.gamma, mixed.from_first, args.a.display());
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = load_config(cli)?;
    let t = &mut config.train;
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if args.no_pcm {
        t.pcm_enabled = false;
    }
    if args.baseline {
        *t = t.baseline();
    }
    config.validate()?;
    let dir = out_dir(cli, &config)?;
    let (best, summaries) = run_grid(&config, &dir, args.resume)?;
    let s = &summaries[best];
    if summaries.len() > 1 {
        println!("grid point {best} of {} selected by source validation", summaries.len());
    }
    println!(
        "best epoch {} of {}, source val {}, target {:.4} (last epoch {:.4})",
        s.best_epoch,
        s.epochs,
        s.best_val_metric.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        s.target_metric,
        s.last_target_metric
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let (params, _) = load_model(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = prepare_data(&config)?;
    if params.config.task != data.task() {
        bail!(Error::InvalidArgument(format!(
            "checkpoint is a {:?} model but the data is {:?}",
            params.config.task,
            data.task()
        )));
    }
    let metric = data.target_metric(&params)?;
    let name = match data.task() {
        Task::Classification => "accuracy",
        Task::Segmentation => "miou",
    };
    println!("{}", serde_json::json!({ name: metric }));
    if let Some(path) = &args.features {
        let PreparedData::Classification { source, target_test, .. } = &data else {
            bail!(Error::InvalidArgument("feature dumps are only defined for classification".into()));
        };
        let set = match args.domain {
            DomainArg::Source => source,
            DomainArg::Target => target_test,
        };
        let features = set.iter().map(|s| params.embed(&s.cloud)).collect::<defrec::Result<Vec<_>>>()?;
        let dump = FeatureDump { labels: set.iter().map(|s| s.label).collect(), features };
        save_features(path, &dump)?;
    }
    Ok(())
}

fn perplexity_cmd(args: &PerplexityArgs) -> anyhow::Result<()> {
    let load = |p: &Path| load_features(p).with_context(|| format!("loading {}", p.display()));
    let (src, tgt) = (load(&args.source)?, load(&args.target)?);
    if src.dim() != tgt.dim() {
        bail!(Error::DimensionMismatch { what: "feature dumps", expected: src.dim(), found: tgt.dim() });
    }
    let (src_f, tgt_f) = match args.pca {
        Some(d) => {
            let pca = Pca::fit(&src.features, d)?;
            (pca.transform(&src.features)?, pca.transform(&tgt.features)?)
        }
        None => (src.features, tgt.features),
    };
    let model = fit_class_gaussians(&src_f, &src.labels, args.reg)?;
    let value = log_perplexity(&model, &tgt_f, &tgt.labels, args.balanced)?;
    println!("{}", serde_json::json!({ "log_perplexity": value, "balanced": args.balanced }));
    Ok(())
}

fn selftest_cmd(cli: &Cli) -> anyhow::Result<bool> {
    let outcomes = defrec::selftest::run_all(cli.seed.unwrap_or(0))?;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

/// 1 usage, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenBench(a) => gen_bench(&cli, a),
        Command::Deform(a) => deform_cmd(&cli, a),
        Command::Mixup(a) => mixup_cmd(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Perplexity(a) => perplexity_cmd(a),
        Command::Selftest => match selftest_cmd(&cli) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow!(Error::EmptyCloud)), 2);
        assert_eq!(exit_code(&anyhow!(Error::NumericalOverflow("x"))), 3);
        let wrapped = anyhow::Error::new(Error::Diverged { epoch: 0, step: 0, phase: "source", detail: String::new() })
            .context("training");
        assert_eq!(exit_code(&wrapped), 3);
        assert_eq!(exit_code(&anyhow!("plain")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
