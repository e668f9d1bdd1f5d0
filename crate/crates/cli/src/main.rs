//! `rainsense` command-line front end.
//!
//! Exit codes: 0 success, 1 domain error (one-line cause on stderr),
//! 2 usage error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rainsense::autoroi::{auto_roi, load_hints, AutoRoiConfig, RoiSet};
use rainsense::features::{read_feature_csv, write_feature_csv, MinuteFeature};
use rainsense::ingest::{open_stream, DirFrameSource, StreamManifest};
use rainsense::irrigation::{
    actuate, append_history, daily_requirements, fetch_et, plan_days, water_saving, write_plans, DailyRequirement,
    EtSource, IrrigationConfig, StopOverride,
};
use rainsense::model::{detector_threshold_sweep, predict_minute, train, LabeledRow, MlpModel, Task, TrainConfig};
use rainsense::pipeline::{
    extract_minutes, extract_minutes_with, labeled_rows, labels_by_minute_start, PipelineConfig,
};
use rainsense::rainfall::{
    daily_aggregate, daily_from_labels, default_label_window, detection_metrics, estimation_metrics, load_adjustments,
    minute_labels, parse_gauge, read_daily, read_labels, read_predictions, write_daily, DailyRainfall, DailyTotals,
    EvalReport, GaugeConfig, PredictionWriter, RainLabel,
};
use rainsense::synth::{gen_scene, RainProfile, SceneSpec};

#[derive(Parser, Debug)]
#[command(
    name = "rainsense",
    version,
    about = "Rainfall from camera video and audio, and the irrigation it saves"
)]
struct Cli {
    /// Pipeline configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Find reflection regions from rain-period hints.
    Autoroi(AutoroiArgs),
    /// Per-minute feature rows for one stream.
    Extract(ExtractArgs),
    /// Train a detector or estimator on feature rows.
    Train(TrainArgs),
    /// Per-minute predictions and daily totals for one stream.
    Infer(InferArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Plan (and optionally simulate) irrigation from ET and rainfall.
    Schedule(ScheduleArgs),
    /// Render a synthetic scene with known rain.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct AutoroiArgs {
    /// Stream manifest; repeat for several streams.
    #[arg(long)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    hints: PathBuf,
    /// Number of regions.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    rois: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Detector,
    Estimator,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Detector => Task::Detector,
            TaskArg::Estimator => Task::Estimator,
        }
    }
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Minute label CSV (end-stamped); repeatable.
    #[arg(long, conflicts_with = "gauge")]
    labels: Vec<PathBuf>,
    /// Tipping-bucket log to derive labels from.
    #[arg(long)]
    gauge: Option<PathBuf>,
    /// Manual event boundary corrections for `--gauge`.
    #[arg(long, requires = "gauge")]
    adjustments: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Training feature CSV; repeatable.
    #[arg(long, required = true)]
    features: Vec<PathBuf>,
    /// Validation feature CSV; repeatable.
    #[arg(long)]
    val: Vec<PathBuf>,
    #[command(flatten)]
    labels: LabelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 40)]
    patience: usize,
    /// Independent initializations; the best on validation is kept.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Skip minutes lacking a full set of pairs or audio.
    #[arg(long)]
    complete_only: bool,
    /// Detector only: pick the threshold maximizing validation F1.
    #[arg(long)]
    tune_threshold: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    rois: Option<PathBuf>,
    #[arg(long)]
    det: Option<PathBuf>,
    #[arg(long)]
    est: Option<PathBuf>,
    /// Detection threshold; defaults to the one stored in the detector.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Per-minute predictions CSV.
    #[arg(long)]
    out_minutes: PathBuf,
    /// Daily totals CSV.
    #[arg(long)]
    out_daily: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report CSV; the summary always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// ET source: JSON file or http(s) URL.
    #[arg(long)]
    et: Option<String>,
    #[arg(long)]
    zones: Option<PathBuf>,
    /// Daily rainfall CSV; without it rainfall is inferred from the stream.
    #[arg(long)]
    rain: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Reference rainfall (e.g. a weather station) to compute water saved.
    #[arg(long)]
    compare_rain: Option<PathBuf>,
    /// Credit surplus rain against later days.
    #[arg(long)]
    carryover: bool,
    /// Simulate the valves and append their events to this CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Manual stop as `ZONE@RFC3339-TIME`; repeatable.
    #[arg(long, requires = "history")]
    stop: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Per-minute rain intensities; dry if omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain on one line, skipping causes the message already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Autoroi(a) => {
            override_opt(&mut cfg.seed, a.seed);
            start(&cfg)?;
            autoroi(&cfg, a)
        }
        Command::Extract(a) => {
            override_path(&mut cfg.manifest, a.manifest.clone());
            override_path(&mut cfg.rois, a.rois.clone());
            start(&cfg)?;
            extract(&cfg, &a.out)
        }
        Command::Train(a) => {
            override_opt(&mut cfg.seed, a.seed);
            override_path(&mut cfg.gauge, a.labels.gauge.clone());
            start(&cfg)?;
            train_cmd(&cfg, a)
        }
        Command::Infer(a) => {
            apply_model_args(&mut cfg, &a.model);
            start(&cfg)?;
            let daily = infer(&cfg, a.model.threshold, Some(&a.out_minutes))?;
            write_daily(create(&a.out_daily)?, &daily)?;
            for d in &daily {
                log::info!(
                    "{}: {:.3} mm over {} raining minutes",
                    d.date,
                    d.total_mm,
                    d.raining_minutes
                );
            }
            Ok(())
        }
        Command::Evaluate(a) => {
            override_path(&mut cfg.gauge, a.labels.gauge.clone());
            override_opt(&mut cfg.detection_threshold, a.threshold);
            start(&cfg)?;
            evaluate(&cfg, a)
        }
        Command::Schedule(a) => {
            apply_model_args(&mut cfg, &a.model);
            if a.et.is_some() {
                cfg.et_source = a.et.clone();
            }
            override_path(&mut cfg.zones, a.zones.clone());
            start(&cfg)?;
            schedule_cmd(&cfg, a)
        }
        Command::Synth(a) => {
            start(&cfg)?;
            synth(a)
        }
    }
}

fn override_opt<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn override_path(field: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *field = value;
    }
}

fn apply_model_args(cfg: &mut PipelineConfig, m: &ModelArgs) {
    override_path(&mut cfg.manifest, m.manifest.clone());
    override_path(&mut cfg.rois, m.rois.clone());
    override_path(&mut cfg.detector, m.det.clone());
    override_path(&mut cfg.estimator, m.est.clone());
}

/// Validates the effective configuration and logs what reproduces the run.
fn start(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    log::info!("config {} seed {}", cfg.hash(), cfg.seed);
    Ok(())
}

fn required<'a>(field: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| anyhow!("--{flag} is required (or set it in --config)"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open_source(cfg: &PipelineConfig) -> Result<(StreamManifest, DirFrameSource)> {
    let manifest = StreamManifest::load(required(&cfg.manifest, "manifest")?)?;
    let source = open_stream(&manifest)?;
    Ok((manifest, source))
}

fn autoroi(cfg: &PipelineConfig, a: AutoroiArgs) -> Result<()> {
    let manifests: Vec<PathBuf> = if a.manifest.is_empty() {
        cfg.manifest.iter().cloned().collect()
    } else {
        a.manifest
    };
    if manifests.is_empty() {
        bail!("--manifest is required (or set it in --config)");
    }
    let sources = manifests
        .iter()
        .map(|m| open_stream(&StreamManifest::load(m)?))
        .collect::<rainsense::Result<Vec<_>>>()?;
    let hints = load_hints(&a.hints)?;
    let roi_cfg = AutoRoiConfig {
        tau_weak: cfg.tau_weak,
        pair_interval: cfg.pair_interval,
        ..AutoRoiConfig::default()
    };
    let rois = auto_roi(&hints, &sources, a.k, cfg.seed, &roi_cfg)?;
    for r in &rois.rois {
        log::info!("roi {}: x {}..{} y {}..{}", r.id, r.x_lo, r.x_hi, r.y_lo, r.y_hi);
    }
    rois.save(&a.out)?;
    Ok(())
}

fn extract(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (manifest, source) = open_source(cfg)?;
    let rois = RoiSet::load(required(&cfg.rois, "rois")?)?;
    let rows = extract_minutes(&source, manifest.audio_path.as_deref(), &rois, &cfg.extract())?;
    log::info!(
        "{} minutes, {} complete",
        rows.len(),
        rows.iter().filter(|r| r.complete).count()
    );
    write_feature_csv(create(out)?, &rows, rois.rois.len())?;
    Ok(())
}

/// Start-stamped labels from label files or a gauge log.
fn load_labels(a: &LabelArgs, gauge: Option<&Path>) -> Result<Vec<RainLabel>> {
    let mut labels = Vec::new();
    if let Some(gauge) = gauge.filter(|_| a.labels.is_empty()) {
        let gcfg = GaugeConfig::default();
        let records = parse_gauge(gauge, &gcfg)?;
        let adjustments = match &a.adjustments {
            Some(p) => load_adjustments(p)?,
            None => Vec::new(),
        };
        let (first, last) =
            default_label_window(&records).ok_or_else(|| anyhow!("gauge log {} has no records", gauge.display()))?;
        labels = minute_labels(&records, &adjustments, first, last, &gcfg)?;
    } else {
        for p in &a.labels {
            labels.extend(read_labels(p)?);
        }
    }
    if labels.is_empty() {
        bail!("no labels: pass --labels or --gauge");
    }
    Ok(labels_by_minute_start(&labels))
}

fn read_features(paths: &[PathBuf]) -> Result<Vec<MinuteFeature>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_feature_csv(p)?);
    }
    Ok(rows)
}

fn train_cmd(cfg: &PipelineConfig, a: TrainArgs) -> Result<()> {
    let task = Task::from(a.task);
    let labels = load_labels(&a.labels, cfg.gauge.as_deref())?;
    let rows = |paths: &[PathBuf]| -> Result<Vec<LabeledRow>> {
        Ok(labeled_rows(&read_features(paths)?, &labels, task, a.complete_only))
    };
    let train_rows = rows(&a.features)?;
    let val_rows = rows(&a.val)?;
    log::info!("{} training rows, {} validation rows", train_rows.len(), val_rows.len());
    let tcfg = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: cfg.seed,
        patience: a.patience,
        restarts: a.restarts,
        ..TrainConfig::default()
    };
    let outcome = train(task, &train_rows, &val_rows, &tcfg)?;
    let mut model = outcome.model;
    if task == Task::Detector {
        model.threshold = cfg.detection_threshold;
        if a.tune_threshold {
            let tuning = if val_rows.is_empty() { &train_rows } else { &val_rows };
            model.threshold = detector_threshold_sweep(&model, tuning)?;
        }
        log::info!("detection threshold {}", model.threshold);
    }
    if let Some(best) = outcome.history.get(outcome.best_epoch.saturating_sub(1)) {
        log::info!(
            "kept epoch {} of seed {}: validation loss {:.5}, metric {:.5}",
            outcome.best_epoch,
            outcome.seed,
            best.val_loss,
            best.val_metric
        );
    }
    model.save(&a.out)?;
    Ok(())
}

/// Streams the manifest through feature extraction and both models,
/// writing minute rows as they complete; returns daily totals.
fn infer(cfg: &PipelineConfig, threshold: Option<f64>, out_minutes: Option<&Path>) -> Result<Vec<DailyRainfall>> {
    let (manifest, source) = open_source(cfg)?;
    let rois = RoiSet::load(required(&cfg.rois, "rois")?)?;
    let det = MlpModel::load(required(&cfg.detector, "det")?)?;
    let est = MlpModel::load(required(&cfg.estimator, "est")?)?;
    if det.task != Task::Detector || est.task != Task::Estimator {
        bail!("--det must hold a detector and --est an estimator");
    }
    let threshold = threshold.unwrap_or(det.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        bail!("detection threshold {threshold} outside [0, 1]");
    }
    let mut writer = match out_minutes {
        Some(p) => Some(PredictionWriter::new(create(p)?)?),
        None => None,
    };
    let mut totals = DailyTotals::new(cfg.tz()?);
    let minutes = extract_minutes_with(&source, manifest.audio_path.as_deref(), &rois, &cfg.extract(), |row| {
        let p = predict_minute(&det, &est, &row)?;
        totals.add_prediction(&p, threshold);
        match writer.as_mut() {
            Some(w) => w.write(&p),
            None => Ok(()),
        }
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    log::info!("{minutes} minutes at detection threshold {threshold}");
    Ok(totals.finish())
}

fn evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let (Some(first), Some(last)) = (
        preds.iter().map(|p| p.minute).min(),
        preds.iter().map(|p| p.minute).max(),
    ) else {
        bail!("{} holds no predictions", a.predictions.display());
    };
    let labels: Vec<RainLabel> = load_labels(&a.labels, cfg.gauge.as_deref())?
        .into_iter()
        .filter(|l| (first..=last).contains(&l.minute))
        .collect();
    let threshold = cfg.detection_threshold;
    let tz = cfg.tz()?;
    let detection = detection_metrics(&preds, &labels, threshold)?;
    let truth = daily_from_labels(&labels, tz);
    let estimation = if truth.iter().any(|d| d.total_mm > 0.0) {
        Some(estimation_metrics(&daily_aggregate(&preds, threshold, tz), &truth)?)
    } else {
        None
    };
    let report = EvalReport { detection, estimation };
    print!("{}", report.summary());
    if let Some(out) = &a.out {
        report.write_csv(create(out)?)?;
    }
    Ok(())
}

fn parse_stop(s: &str) -> Result<StopOverride> {
    let (zone, at) = s
        .rsplit_once('@')
        .ok_or_else(|| anyhow!("stop override {s:?} is not ZONE@TIME"))?;
    let at = DateTime::parse_from_rfc3339(at)
        .with_context(|| format!("stop override time {at:?}"))?
        .with_timezone(&Utc);
    Ok(StopOverride {
        zone_id: zone.to_string(),
        at,
    })
}

fn schedule_cmd(cfg: &PipelineConfig, a: ScheduleArgs) -> Result<()> {
    let source = cfg
        .et_source
        .as_deref()
        .ok_or_else(|| anyhow!("--et is required (or set et_source in --config)"))?;
    let mut zones = IrrigationConfig::load(required(&cfg.zones, "zones")?)?;
    zones.carryover |= a.carryover;
    let stops = a.stop.iter().map(|s| parse_stop(s)).collect::<Result<Vec<_>>>()?;

    let rain = match &a.rain {
        Some(p) => read_daily(p)?,
        None => infer(cfg, a.model.threshold, None)?,
    };
    let et = fetch_et(&EtSource::parse(source), None)?;
    let mut plans = plan_days(&et, &rain, &zones);
    if let Some(history) = &a.history {
        let log = actuate(&plans, zones.cycle_start, &stops);
        append_history(history, &log.events)?;
        plans = log.plans;
    }
    write_plans(create(&a.out)?, &plans)?;
    let planned: f64 = plans.iter().map(|p| p.ir_mm).sum();
    log::info!("{} plans, {planned:.2} mm requested in total", plans.len());

    if let Some(reference) = &a.compare_rain {
        let ours = daily_requirements(&et, &rain, &zones);
        let theirs = daily_requirements(&et, &read_daily(reference)?, &zones);
        for zone in &zones.zones {
            let series = |reqs: &[DailyRequirement]| -> Vec<(NaiveDate, f64)> {
                reqs.iter()
                    .filter(|r| r.zone_id == zone.zone_id)
                    .map(|r| (r.date, r.ir_mm))
                    .collect()
            };
            let saving = water_saving(&series(&theirs), &series(&ours), zone.area_m2)?;
            println!(
                "{}: {:.1} L ({:.1} gal) difference against the reference rainfall",
                zone.zone_id, saving.liters, saving.gallons
            );
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec::load(&a.spec)?;
    let profile = match &a.profile {
        Some(p) => RainProfile::load(p)?,
        None => RainProfile::dry(spec.duration_min),
    };
    let out = gen_scene(&spec, &profile, &a.out)?;
    log::info!(
        "{} frames, {:.2} mm of rain, manifest {}",
        spec.frame_count(),
        profile.total_mm(),
        out.manifest.display()
    );
    Ok(())
}
