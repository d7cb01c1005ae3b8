//! Subcommand implementations.
//!
//! Every command resolves its flags into an [`ExperimentConfig`], runs the
//! corresponding library pipeline, and writes its outputs plus a
//! `manifest.json` under `--out`. All randomness flows through fixed
//! stream ids of the user seed, so reruns with the same flags produce
//! byte-identical results apart from timing fields.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mvgp::data::{
    load_dataset, load_view_blocks, make_moons_multiview, noise_view_combinations, normalize,
    prepare_noisy_test, save_dataset, save_view_blocks, split, MoonsSpec, MultiViewDataset,
    NoiseMode, NoiseSpec, NormalizationStats,
};
use mvgp::kernel::KernelParams;
use mvgp::labels::transform_labels;
use mvgp::metrics::{accuracy, auroc, ece, MetricsReport, DEFAULT_ECE_BINS};
use mvgp::numerics::{DenseMatrix, RngStream};
use mvgp::poe::{ViewWeightPolicy, WeightMode};
use mvgp::predictor::{classify, predict, DirichletMoments, DEFAULT_MC_SAMPLES};
use mvgp::svgp::ExpertParams;
use mvgp::trainer::{train, LrSchedule, TrainConfig, TrainReport, UpdateMask};
use mvgp::{Error, Result};

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::{config_hash, ExperimentConfig};
use crate::records::{
    ensure_dir, mean_std, write_json, write_manifest, write_text, ResultRecord, SeedMetrics,
};

/// Stream ids for the per-command RNG coordinates. The trainer owns
/// (seed, 0) internally; everything else gets a distinct constant.
const SPLIT_STREAM: u64 = 101;
const PREDICT_STREAM: u64 = 102;
const NOISE_STREAM: u64 = 103;
const OOD_SAMPLE_STREAM: u64 = 104;
const OOD_PREDICT_STREAM: u64 = 105;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    /// Per-point weights from predictive entropy (softmax form).
    Entropy,
    /// Plain product of experts: every view weighs 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseModeArg {
    /// Z-score with train statistics, then add noise (paper default).
    NormalizeFirst,
    /// Add noise to raw features, then z-score.
    NoiseFirst,
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(m: NoiseModeArg) -> Self {
        match m {
            NoiseModeArg::NormalizeFirst => NoiseMode::NormalizeFirst,
            NoiseModeArg::NoiseFirst => NoiseMode::NoiseFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParamArg {
    /// Number of inducing points per view.
    M,
    /// Label-transform concentration offset.
    AlphaEps,
    /// Monte-Carlo samples at prediction time.
    McSamples,
}

/// Training hyperparameters shared by `train`, `noise-sweep`, and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Inducing points per view (capped at the training-set size).
    #[arg(long, default_value_t = 200)]
    pub m: usize,
    /// Dirichlet concentration offset of the label transform.
    #[arg(long, default_value_t = 0.001)]
    pub alpha_eps: f64,
    /// KL weight in the per-view objective.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr_start: f64,
    #[arg(long, default_value_t = 0.003)]
    pub lr_end: f64,
    #[arg(long, default_value_t = 0.003)]
    pub lr_main: f64,
    #[arg(long, default_value_t = 10)]
    pub warmup_epochs: usize,
    /// Train fraction of the shuffled split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Diagonal (instead of full lower-triangular) variational covariance.
    #[arg(long)]
    pub diag_cov: bool,
    /// Keep kernel hyperparameters at their initial values.
    #[arg(long)]
    pub freeze_kernel: bool,
    /// Keep inducing-point locations at their initial values.
    #[arg(long)]
    pub freeze_inducing: bool,
    /// Keep variational means and covariances at their initial values.
    #[arg(long)]
    pub freeze_variational: bool,
}

impl FitArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                warmup_epochs: self.warmup_epochs,
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                lr_main: self.lr_main,
            },
            beta: self.beta,
            adam: Default::default(),
            seed,
            update: UpdateMask {
                kernel: !self.freeze_kernel,
                inducing: !self.freeze_inducing,
                variational: !self.freeze_variational,
            },
        }
    }
}

/// Prediction/metric knobs shared by the evaluating commands.
#[derive(Debug, Clone, Args)]
pub struct EvalKnobs {
    /// Monte-Carlo samples per test point.
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Entropy)]
    pub weighting: WeightingArg,
    /// Softmax temperature of the entropy weighting.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Calibration bins.
    #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
    pub ece_bins: usize,
}

impl EvalKnobs {
    fn policy(&self) -> ViewWeightPolicy {
        ViewWeightPolicy {
            mode: match self.weighting {
                WeightingArg::Entropy => WeightMode::NegentropySoftmax,
                WeightingArg::Uniform => WeightMode::Uniform,
            },
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples per class (total N is twice this).
    #[arg(long, default_value_t = 1000)]
    pub n_per_class: usize,
    /// Std of the isotropic jitter on the base shape.
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 200)]
    pub ood_count: usize,
    #[arg(long, default_value_t = 0.04)]
    pub ood_std: f64,
    /// Make all three views identical (no rescaling, no class shift).
    #[arg(long)]
    pub views_equal: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (written by `synth` or in the same format).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, report, and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated dataset view indices to train on (default: all).
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the prediction sampling streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

#[derive(Debug, Args)]
pub struct NoiseSweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub views: Option<String>,
    /// Comma-separated training seeds; one model per seed.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Comma-separated ascending noise standard deviations.
    #[arg(long, default_value = "0.01,0.05,0.1,0.5,1,5,10")]
    pub stds: String,
    #[arg(long, value_enum, default_value_t = NoiseModeArg::NormalizeFirst)]
    pub mode: NoiseModeArg,
    /// Views corrupted at a time (default: half, rounded down).
    #[arg(long)]
    pub noisy_views: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of out-of-domain view blocks (default: <data>/ood).
    #[arg(long)]
    pub ood_dir: Option<PathBuf>,
    /// Subsample both score sets to at most this many points each.
    #[arg(long)]
    pub max_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub views: Option<String>,
    /// Axis to sweep.
    #[arg(long, value_enum)]
    pub param: SweepParamArg,
    /// Comma-separated grid values for the swept parameter.
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

fn parse_views(spec: Option<&str>, num_views: usize) -> Result<Vec<usize>> {
    let Some(spec) = spec else {
        return Ok((0..num_views).collect());
    };
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let v: usize = part
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad view index {part:?}")))?;
        if v >= num_views {
            return Err(Error::InvalidConfig(format!(
                "view index {v} out of range for {num_views} views"
            )));
        }
        if out.contains(&v) {
            return Err(Error::InvalidConfig(format!("duplicate view index {v}")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no views selected".into()));
    }
    Ok(out)
}

fn parse_u64_list(spec: &str, what: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} list is empty")));
    }
    Ok(out)
}

fn parse_f64_list(spec: &str, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} list is empty")));
    }
    Ok(out)
}

fn as_count(value: f64, what: &str) -> Result<usize> {
    if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
        Ok(value as usize)
    } else {
        Err(Error::InvalidConfig(format!(
            "{what} must be a positive integer, got {value}"
        )))
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "split fraction must be in (0, 1), got {f}"
        )))
    }
}

/// One trained model plus the data products evaluation needs.
struct Fitted {
    experts: Vec<ExpertParams>,
    stats: NormalizationStats,
    report: TrainReport,
    /// Held-out rows before normalization (noise-first injection needs raw).
    test_raw: MultiViewDataset,
    /// Held-out rows normalized with the train statistics.
    test: MultiViewDataset,
    n_train: usize,
}

fn fit_model(sub: &MultiViewDataset, fit: &FitArgs, seed: u64) -> Result<Fitted> {
    check_fraction(fit.split)?;
    if fit.m == 0 {
        return Err(Error::InvalidConfig(
            "need at least one inducing point".into(),
        ));
    }
    let (train_raw, test_raw) = split(sub, fit.split, RngStream::new(seed, SPLIT_STREAM));
    let (train_n, test, stats) = normalize(&train_raw, &test_raw)?;
    let m_eff = fit.m.min(train_n.len());
    let z_rows: Vec<usize> = (0..m_eff).collect();
    let mut experts: Vec<ExpertParams> = train_n
        .views()
        .iter()
        .map(|v| {
            ExpertParams::init(
                KernelParams::unit(v.cols()),
                v.gather_rows(&z_rows),
                sub.num_classes(),
                fit.diag_cov,
            )
        })
        .collect::<Result<_>>()?;
    let labels = transform_labels(train_n.labels(), sub.num_classes(), fit.alpha_eps)?;
    let cfg = fit.train_config(seed);
    let report = train(&train_n, &labels, &mut experts, &cfg)?;
    Ok(Fitted {
        experts,
        stats,
        report,
        test_raw,
        test,
        n_train: train_n.len(),
    })
}

struct Evaluated {
    metrics: MetricsReport,
    moments: DirichletMoments,
    predicted: Vec<usize>,
}

fn evaluate_on(
    experts: &[ExpertParams],
    test: &MultiViewDataset,
    knobs: &EvalKnobs,
    rng: RngStream,
) -> Result<Evaluated> {
    let moments = predict(experts, test.views(), &knobs.policy(), knobs.mc_samples, rng)?;
    let predicted = classify(&moments);
    let acc = accuracy(&predicted, test.labels())?;
    let confidences: Vec<f64> = (0..moments.batch_len())
        .map(|i| {
            moments
                .e_pi
                .row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let correct: Vec<bool> = predicted
        .iter()
        .zip(test.labels())
        .map(|(a, b)| a == b)
        .collect();
    let calibration = ece(&confidences, &correct, knobs.ece_bins)?;
    Ok(Evaluated {
        metrics: MetricsReport {
            accuracy: acc,
            ece: calibration,
            num_bins: knobs.ece_bins,
            auroc: None,
            n_eval: test.len(),
        },
        moments,
        predicted,
    })
}

fn predictions_csv(moments: &DirichletMoments, predicted: &[usize]) -> String {
    let c = moments.num_classes();
    let mut out = String::from("sample_id,predicted_class");
    for j in 0..c {
        out.push_str(&format!(",e_pi_{j}"));
    }
    out.push_str(",uncertainty\n");
    for i in 0..moments.batch_len() {
        out.push_str(&format!("{i},{}", predicted[i]));
        for j in 0..c {
            out.push_str(&format!(",{}", moments.e_pi.get(i, j)));
        }
        out.push_str(&format!(",{}\n", moments.uncertainty[i]));
    }
    out
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let started = Instant::now();
    if args.n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let mut spec = MoonsSpec {
        n_per_class: args.n_per_class,
        noise_std: args.noise_std,
        ood_count: args.ood_count,
        ood_std: args.ood_std,
        ..MoonsSpec::default()
    };
    if args.views_equal {
        spec.radii = [1.0, 1.0, 1.0];
        spec.class1_shift = [0.0, 0.0];
    }
    let (ds, ood) = make_moons_multiview(&spec, RngStream::new(args.seed, 0));
    ensure_dir(&args.out)?;
    save_dataset(
        &ds,
        "moons-3view",
        &args.out,
        Some(json!({"generator": "synthetic moons", "seed": args.seed, "spec": &spec})),
    )?;
    save_view_blocks(&ood, &args.out.join("ood"))?;

    let cfg = ExperimentConfig {
        command: "synth".into(),
        dataset: Some(args.out.clone()),
        synth: Some(spec),
        seed: Some(args.seed),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);
    let mut outputs = vec!["meta.json".to_string(), "labels.csv".to_string()];
    for v in 0..ds.num_views() {
        outputs.push(format!("view_{v}.csv"));
    }
    outputs.push("ood/blocks.json".into());
    for v in 0..ood.len() {
        outputs.push(format!("ood/view_{v}.csv"));
    }
    write_manifest(&args.out, &cfg, &hash, &outputs, started)?;
    println!(
        "wrote {}: {} samples, {} views, {} classes, {} ood points",
        args.out.display(),
        ds.len(),
        ds.num_views(),
        ds.num_classes(),
        args.ood_count
    );
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let views = parse_views(args.views.as_deref(), ds.num_views())?;
    let sub = ds.subset_views(&views);
    let fitted = fit_model(&sub, &args.fit, args.seed)?;

    let cfg = ExperimentConfig {
        command: "train".into(),
        dataset: Some(args.data.clone()),
        views: Some(views.clone()),
        num_inducing: Some(args.fit.m),
        alpha_eps: Some(args.fit.alpha_eps),
        diag_cov: Some(args.fit.diag_cov),
        split_fraction: Some(args.fit.split),
        train: Some(args.fit.train_config(args.seed)),
        seed: Some(args.seed),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);

    ensure_dir(&args.out)?;
    let ck = Checkpoint {
        format_version: FORMAT_VERSION,
        config_hash: hash.clone(),
        num_classes: sub.num_classes(),
        alpha_eps: args.fit.alpha_eps,
        view_indices: views,
        split_seed: args.seed,
        split_fraction: args.fit.split,
        stats: fitted.stats,
        experts: fitted.experts,
        train_report: fitted.report.clone(),
    };
    ck.save(&args.out.join("checkpoint.json"))?;
    write_json(&args.out.join("train_report.json"), &fitted.report)?;
    write_manifest(
        &args.out,
        &cfg,
        &hash,
        &["checkpoint.json".into(), "train_report.json".into()],
        started,
    )?;
    match fitted.report.epoch_losses.last() {
        Some(loss) => println!(
            "trained {} views on {} samples ({} epochs, final loss {loss:.4})",
            ck.experts.len(),
            fitted.n_train,
            fitted.report.epoch_losses.len()
        ),
        None => println!(
            "wrote initialized checkpoint for {} views ({} samples, 0 epochs)",
            ck.experts.len(),
            fitted.n_train
        ),
    }
    Ok(())
}

/// Rebuild the normalized test split a checkpoint was held out against.
fn checkpoint_test_split(ck: &Checkpoint, data: &Path) -> Result<MultiViewDataset> {
    check_fraction(ck.split_fraction)?;
    let ds = load_dataset(data)?;
    if ck.view_indices.iter().any(|&v| v >= ds.num_views()) {
        return Err(Error::InvalidConfig(format!(
            "checkpoint was trained on views {:?} but the dataset has {} views",
            ck.view_indices,
            ds.num_views()
        )));
    }
    let sub = ds.subset_views(&ck.view_indices);
    let (_, test_raw) = split(
        &sub,
        ck.split_fraction,
        RngStream::new(ck.split_seed, SPLIT_STREAM),
    );
    ck.stats.apply(&test_raw)
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let test = checkpoint_test_split(&ck, &args.data)?;
    let ev = evaluate_on(
        &ck.experts,
        &test,
        &args.knobs,
        RngStream::new(args.seed, PREDICT_STREAM),
    )?;

    let cfg = ExperimentConfig {
        command: "eval".into(),
        dataset: Some(args.data.clone()),
        checkpoint: Some(args.checkpoint.clone()),
        mc_samples: Some(args.knobs.mc_samples),
        weighting: Some(args.knobs.policy()),
        ece_bins: Some(args.knobs.ece_bins),
        seed: Some(args.seed),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);

    ensure_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &ev.metrics)?;
    write_text(
        &args.out.join("predictions.csv"),
        &predictions_csv(&ev.moments, &ev.predicted),
    )?;
    write_manifest(
        &args.out,
        &cfg,
        &hash,
        &["metrics.json".into(), "predictions.csv".into()],
        started,
    )?;
    println!(
        "evaluated {} test points: accuracy {:.4}, ece {:.4}",
        ev.metrics.n_eval, ev.metrics.accuracy, ev.metrics.ece
    );
    Ok(())
}

#[derive(Serialize)]
struct NoiseCurvePoint {
    noise_std: f64,
    mean_accuracy: f64,
    std_accuracy: f64,
    mean_ece: f64,
}

#[derive(Serialize)]
struct NoiseSummary {
    config_hash: String,
    /// One record per (std, view-subset) cell, aggregated across seeds.
    records: Vec<ResultRecord>,
    /// Accuracy per std, averaged over subsets and seeds.
    curve: Vec<NoiseCurvePoint>,
    /// Grand mean accuracy over the whole grid (the table-style summary).
    average_accuracy: f64,
}

pub fn cmd_noise_sweep(args: NoiseSweepArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let views = parse_views(args.views.as_deref(), ds.num_views())?;
    let sub = ds.subset_views(&views);
    let v = sub.num_views();

    let noisy_count = args.noisy_views.unwrap_or(v / 2);
    if noisy_count == 0 || noisy_count > v {
        return Err(Error::InvalidConfig(format!(
            "noisy view count {noisy_count} out of range for {v} views"
        )));
    }
    let noise = NoiseSpec {
        std_grid: parse_f64_list(&args.stds, "stds")?,
        mode: args.mode.into(),
        noisy_view_count: noisy_count,
    };
    noise.validate()?;
    let seeds = parse_u64_list(&args.seeds, "seeds")?;
    let combos = noise_view_combinations(v, noisy_count);

    let cfg = ExperimentConfig {
        command: "noise-sweep".into(),
        dataset: Some(args.data.clone()),
        views: Some(views.clone()),
        num_inducing: Some(args.fit.m),
        alpha_eps: Some(args.fit.alpha_eps),
        diag_cov: Some(args.fit.diag_cov),
        split_fraction: Some(args.fit.split),
        train: Some(args.fit.train_config(seeds[0])),
        mc_samples: Some(args.knobs.mc_samples),
        weighting: Some(args.knobs.policy()),
        ece_bins: Some(args.knobs.ece_bins),
        noise: Some(noise.clone()),
        seeds: Some(seeds.clone()),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);

    let mut csv = String::from("seed,noise_std,noisy_views,accuracy,ece\n");
    let mut cells: Vec<Vec<Vec<SeedMetrics>>> =
        vec![vec![Vec::new(); combos.len()]; noise.std_grid.len()];
    for &seed in &seeds {
        let t_train = Instant::now();
        let fitted = fit_model(&sub, &args.fit, seed)?;
        let train_seconds = t_train.elapsed().as_secs_f64();
        for (si, &std) in noise.std_grid.iter().enumerate() {
            for (ci, combo) in combos.iter().enumerate() {
                let tag = (si * combos.len() + ci) as u64;
                let noisy = prepare_noisy_test(
                    &fitted.test_raw,
                    &fitted.stats,
                    combo,
                    std,
                    noise.mode,
                    RngStream::new(seed, NOISE_STREAM).derive(tag),
                )?;
                let t_eval = Instant::now();
                let ev = evaluate_on(
                    &fitted.experts,
                    &noisy,
                    &args.knobs,
                    RngStream::new(seed, PREDICT_STREAM),
                )?;
                let label = combo
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                csv.push_str(&format!(
                    "{seed},{std},{label},{},{}\n",
                    ev.metrics.accuracy, ev.metrics.ece
                ));
                cells[si][ci].push(SeedMetrics {
                    seed,
                    accuracy: ev.metrics.accuracy,
                    ece: ev.metrics.ece,
                    auroc: None,
                    train_seconds,
                    eval_seconds: t_eval.elapsed().as_secs_f64(),
                });
            }
        }
    }

    let mut records = Vec::new();
    let mut curve = Vec::new();
    let mut all_accs = Vec::new();
    for (si, &std) in noise.std_grid.iter().enumerate() {
        let mut std_accs = Vec::new();
        let mut std_eces = Vec::new();
        for (ci, combo) in combos.iter().enumerate() {
            let label = combo
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("+");
            for s in &cells[si][ci] {
                std_accs.push(s.accuracy);
                std_eces.push(s.ece);
                all_accs.push(s.accuracy);
            }
            records.push(ResultRecord::from_seeds(
                format!("noise std={std} views={label}"),
                hash.clone(),
                std::mem::take(&mut cells[si][ci]),
            ));
        }
        let (mean_accuracy, std_accuracy) = mean_std(&std_accs);
        let (mean_ece, _) = mean_std(&std_eces);
        curve.push(NoiseCurvePoint {
            noise_std: std,
            mean_accuracy,
            std_accuracy,
            mean_ece,
        });
    }
    let summary = NoiseSummary {
        config_hash: hash.clone(),
        records,
        curve,
        average_accuracy: mean_std(&all_accs).0,
    };

    ensure_dir(&args.out)?;
    write_text(&args.out.join("noise_results.csv"), &csv)?;
    write_json(&args.out.join("noise_summary.json"), &summary)?;
    write_manifest(
        &args.out,
        &cfg,
        &hash,
        &["noise_results.csv".into(), "noise_summary.json".into()],
        started,
    )?;
    println!(
        "noise sweep over {} stds x {} subsets x {} seeds: average accuracy {:.4}",
        noise.std_grid.len(),
        combos.len(),
        seeds.len(),
        summary.average_accuracy
    );
    Ok(())
}

pub fn cmd_ood(args: OodArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut test = checkpoint_test_split(&ck, &args.data)?;

    let ood_dir = args
        .ood_dir
        .clone()
        .unwrap_or_else(|| args.data.join("ood"));
    let blocks = load_view_blocks(&ood_dir)?;
    if ck.view_indices.iter().any(|&v| v >= blocks.len()) {
        return Err(Error::InvalidConfig(format!(
            "checkpoint uses views {:?} but {} has {} blocks",
            ck.view_indices,
            ood_dir.display(),
            blocks.len()
        )));
    }
    let ood_raw: Vec<DenseMatrix> = ck
        .view_indices
        .iter()
        .map(|&v| blocks[v].clone())
        .collect();
    let mut ood_views = ck.stats.apply_views(&ood_raw)?;

    if let Some(cap) = args.max_count {
        if cap == 0 {
            return Err(Error::InvalidConfig("max_count must be at least 1".into()));
        }
        let sampler = RngStream::new(args.seed, OOD_SAMPLE_STREAM);
        if test.len() > cap {
            let keep = &sampler.derive(0).shuffled_indices(test.len())[..cap];
            test = test.gather(keep);
        }
        let n_ood = ood_views[0].rows();
        if n_ood > cap {
            let keep = &sampler.derive(1).shuffled_indices(n_ood)[..cap];
            for view in ood_views.iter_mut() {
                *view = view.gather_rows(keep);
            }
        }
    }

    let ev = evaluate_on(
        &ck.experts,
        &test,
        &args.knobs,
        RngStream::new(args.seed, PREDICT_STREAM),
    )?;
    let ood_moments = predict(
        &ck.experts,
        &ood_views,
        &args.knobs.policy(),
        args.knobs.mc_samples,
        RngStream::new(args.seed, OOD_PREDICT_STREAM),
    )?;
    let score = auroc(&ood_moments.uncertainty, &ev.moments.uncertainty)?;
    let metrics = MetricsReport {
        auroc: Some(score),
        ..ev.metrics
    };

    let mut scores_csv = String::from("set,sample_id,uncertainty\n");
    for (i, u) in ev.moments.uncertainty.iter().enumerate() {
        scores_csv.push_str(&format!("in_domain,{i},{u}\n"));
    }
    for (i, u) in ood_moments.uncertainty.iter().enumerate() {
        scores_csv.push_str(&format!("ood,{i},{u}\n"));
    }

    let cfg = ExperimentConfig {
        command: "ood".into(),
        dataset: Some(args.data.clone()),
        checkpoint: Some(args.checkpoint.clone()),
        ood_dir: Some(ood_dir),
        ood_max_count: args.max_count,
        mc_samples: Some(args.knobs.mc_samples),
        weighting: Some(args.knobs.policy()),
        ece_bins: Some(args.knobs.ece_bins),
        seed: Some(args.seed),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);
    ensure_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &metrics)?;
    write_text(&args.out.join("scores.csv"), &scores_csv)?;
    write_manifest(
        &args.out,
        &cfg,
        &hash,
        &["metrics.json".into(), "scores.csv".into()],
        started,
    )?;
    println!(
        "ood detection on {} in-domain vs {} ood points: auroc {:.4}",
        ev.moments.uncertainty.len(),
        ood_moments.uncertainty.len(),
        score
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary {
    config_hash: String,
    param: String,
    records: Vec<ResultRecord>,
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(&args.data)?;
    let views = parse_views(args.views.as_deref(), ds.num_views())?;
    let sub = ds.subset_views(&views);
    let values = parse_f64_list(&args.values, "values")?;
    let seeds = parse_u64_list(&args.seeds, "seeds")?;

    let param_name = match args.param {
        SweepParamArg::M => "m",
        SweepParamArg::AlphaEps => "alpha_eps",
        SweepParamArg::McSamples => "mc_samples",
    };
    let cfg = ExperimentConfig {
        command: "sweep".into(),
        dataset: Some(args.data.clone()),
        views: Some(views.clone()),
        num_inducing: Some(args.fit.m),
        alpha_eps: Some(args.fit.alpha_eps),
        diag_cov: Some(args.fit.diag_cov),
        split_fraction: Some(args.fit.split),
        train: Some(args.fit.train_config(seeds[0])),
        mc_samples: Some(args.knobs.mc_samples),
        weighting: Some(args.knobs.policy()),
        ece_bins: Some(args.knobs.ece_bins),
        sweep_param: Some(param_name.into()),
        sweep_values: Some(values.clone()),
        seeds: Some(seeds.clone()),
        ..ExperimentConfig::default()
    };
    let hash = config_hash(&cfg);

    let mut csv = String::from("param,value,seed,accuracy,ece,train_seconds,eval_seconds\n");
    let mut records = Vec::new();

    match args.param {
        SweepParamArg::McSamples => {
            // Training does not depend on S: fit once per seed, evaluate
            // the grid against the same model.
            let mut fits = Vec::with_capacity(seeds.len());
            for &seed in &seeds {
                let t = Instant::now();
                let fitted = fit_model(&sub, &args.fit, seed)?;
                fits.push((seed, fitted, t.elapsed().as_secs_f64()));
            }
            for &value in &values {
                let s = as_count(value, "mc_samples")?;
                let mut per_seed = Vec::new();
                for (seed, fitted, train_seconds) in &fits {
                    let mut knobs = args.knobs.clone();
                    knobs.mc_samples = s;
                    let t = Instant::now();
                    let ev = evaluate_on(
                        &fitted.experts,
                        &fitted.test,
                        &knobs,
                        RngStream::new(*seed, PREDICT_STREAM),
                    )?;
                    let eval_seconds = t.elapsed().as_secs_f64();
                    csv.push_str(&format!(
                        "{param_name},{value},{seed},{},{},{},{}\n",
                        ev.metrics.accuracy, ev.metrics.ece, train_seconds, eval_seconds
                    ));
                    per_seed.push(SeedMetrics {
                        seed: *seed,
                        accuracy: ev.metrics.accuracy,
                        ece: ev.metrics.ece,
                        auroc: None,
                        train_seconds: *train_seconds,
                        eval_seconds,
                    });
                }
                records.push(ResultRecord::from_seeds(
                    format!("{param_name}={value}"),
                    hash.clone(),
                    per_seed,
                ));
            }
        }
        SweepParamArg::M | SweepParamArg::AlphaEps => {
            for &value in &values {
                let mut fit = args.fit.clone();
                match args.param {
                    SweepParamArg::M => fit.m = as_count(value, "m")?,
                    SweepParamArg::AlphaEps => fit.alpha_eps = value,
                    SweepParamArg::McSamples => unreachable!(),
                }
                let mut per_seed = Vec::new();
                for &seed in &seeds {
                    let t = Instant::now();
                    let fitted = fit_model(&sub, &fit, seed)?;
                    let train_seconds = t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    let ev = evaluate_on(
                        &fitted.experts,
                        &fitted.test,
                        &args.knobs,
                        RngStream::new(seed, PREDICT_STREAM),
                    )?;
                    let eval_seconds = t.elapsed().as_secs_f64();
                    csv.push_str(&format!(
                        "{param_name},{value},{seed},{},{},{},{}\n",
                        ev.metrics.accuracy, ev.metrics.ece, train_seconds, eval_seconds
                    ));
                    per_seed.push(SeedMetrics {
                        seed,
                        accuracy: ev.metrics.accuracy,
                        ece: ev.metrics.ece,
                        auroc: None,
                        train_seconds,
                        eval_seconds,
                    });
                }
                records.push(ResultRecord::from_seeds(
                    format!("{param_name}={value}"),
                    hash.clone(),
                    per_seed,
                ));
            }
        }
    }

    let summary = SweepSummary {
        config_hash: hash.clone(),
        param: param_name.into(),
        records,
    };
    ensure_dir(&args.out)?;
    write_text(&args.out.join("sweep.csv"), &csv)?;
    write_json(&args.out.join("sweep.json"), &summary)?;
    write_manifest(
        &args.out,
        &cfg,
        &hash,
        &["sweep.csv".into(), "sweep.json".into()],
        started,
    )?;
    println!(
        "swept {param_name} over {} values x {} seeds",
        values.len(),
        seeds.len()
    );
    Ok(())
}
