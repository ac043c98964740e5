use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vlp_core::config::{boolean, parse_flat, parse_override};
use vlp_core::data::{
    atomic_write, generate_samples, load_external_features, read_dataset, write_dataset, AlignedSample, Dataset,
    ExternalFeatures, SyntheticWorldConfig, WORLD_KEYS,
};
use vlp_core::encoders::Report;
use vlp_core::evaluation::{
    build_grounding_cases, evaluate_probe, export_heatmap, grounding_report, linear_probe_train, similarity_map,
    HeatmapOptions, ProbeConfig, ProbeData, PROBE_KEYS,
};
use vlp_core::model::{tiny_config, tiny_world, Model, PairInput};
use vlp_core::objectives::GradCheckConfig;
use vlp_core::training::{metrics_csv, train, Checkpoint, TrainConfig, TrainOptions, TrainSample, TRAIN_KEYS};

#[derive(Parser, Debug)]
#[command(name = "vlp", version, about = "Local/global contrastive vision-language pre-training on toy encoders")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization, training and probing.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $VLP_OUT or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for per-sample computation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Index of the first generated sample.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Pre-train on a dataset directory.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phrase grounding CNR report.
    EvalGrounding {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Linear-probe segmentation Dice on a frozen image encoder.
    EvalSegmentation {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write query/image similarity maps as PGM images.
    ExportHeatmap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Sample ids to export (default: the first sample with a query).
        #[arg(long = "id")]
        ids: Vec<String>,
        /// Query phrase (default: the sample's stored query).
        #[arg(long)]
        query: Option<String>,
    },
    /// Finite-difference check of the full loss gradient on a toy batch.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (synthetic layout or external features).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained checkpoint; without it a randomly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Bad input from the user; exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Every setting, whichever subcommand reads it.
#[derive(Debug, Clone, Default)]
struct Settings {
    world: SyntheticWorldConfig,
    train: TrainConfig,
    probe: ProbeConfig,
    heatmap_csv: bool,
    /// Upsample heatmaps to the image resolution.
    heatmap_upsample: bool,
    /// Effective `(key, value)` pairs in application order.
    applied: Vec<(String, String)>,
}

impl Settings {
    fn set(&mut self, key: &str, raw: &str) -> vlp_core::Result<()> {
        if WORLD_KEYS.contains(&key) {
            self.world.set(key, raw)?;
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, raw)?;
        } else if PROBE_KEYS.contains(&key) {
            self.probe.set(key, raw)?;
        } else if key == "heatmap.csv" {
            self.heatmap_csv = boolean(key, raw)?;
        } else if key == "heatmap.upsample" {
            self.heatmap_upsample = boolean(key, raw)?;
        } else {
            return Err(vlp_core::Error::config(key, "unknown key"));
        }
        self.applied.push((key.to_string(), raw.to_string()));
        Ok(())
    }

    fn load(cli: &Cli) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("config file {}: {e}", path.display())))?;
            for (k, v) in parse_flat(&text)? {
                s.set(&k, &v)?;
            }
        }
        for raw in &cli.overrides {
            let (k, v) = parse_override(raw)?;
            s.set(&k, &v)?;
        }
        if let Some(seed) = cli.seed {
            for key in ["world.seed", "train.seed", "probe.seed"] {
                s.set(key, &seed.to_string())?;
            }
        }
        s.world.validate()?;
        s.train.validate()?;
        s.probe.validate()?;
        Ok(s)
    }

    fn flat(&self) -> String {
        self.applied.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn seed(&self) -> u64 {
        self.train.seed
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("VLP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn dataset_dir(args: &DataArgs) -> Result<&Path> {
    let dir = args.dataset.as_deref().ok_or_else(|| invalid("missing --dataset: a dataset directory is required"))?;
    if !dir.join("manifest.json").is_file() {
        return Err(invalid(format!("dataset directory {} has no manifest.json", dir.display())));
    }
    Ok(dir)
}

enum Data {
    Synthetic(Dataset),
    External(ExternalFeatures),
}

fn load_data(args: &DataArgs) -> Result<Data> {
    let dir = dataset_dir(args)?;
    if dir.join("features").is_dir() {
        Ok(Data::External(load_external_features(dir)?))
    } else {
        Ok(Data::Synthetic(read_dataset(dir)?))
    }
}

fn load_synthetic(args: &DataArgs, what: &str) -> Result<Dataset> {
    match load_data(args)? {
        Data::Synthetic(d) => Ok(d),
        Data::External(_) => Err(invalid(format!("dataset: {what} needs images with ground-truth boxes, not feature files"))),
    }
}

fn load_model(args: &ModelArgs, settings: &Settings) -> Result<Model> {
    match &args.checkpoint {
        Some(path) => Ok(Checkpoint::load(path)?.model),
        None => {
            log::info!("no checkpoint given; using a randomly initialized model (seed {})", settings.seed());
            Ok(Model::init(settings.train.model.clone(), settings.seed())?)
        }
    }
}

fn write_run_manifest(dir: &Path, subcommand: &str, settings: &Settings, extra: serde_json::Value) -> Result<()> {
    let config_text = settings.flat();
    let manifest = json!({
        "subcommand": subcommand,
        "seed": settings.seed(),
        "config_hash": vlp_core::data::sha256_hex(config_text.as_bytes()),
        "config": config_text,
        "argv": argv_without_out(std::env::args().skip(1)),
        "code_version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    atomic_write(&dir.join("run_manifest.json"), text.as_bytes())?;
    Ok(())
}

/// Command line minus `--out`, so identical runs written to different
/// places produce identical manifests.
fn argv_without_out(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut kept = Vec::new();
    let mut skip_next = false;
    for a in args {
        if std::mem::take(&mut skip_next) {
            continue;
        }
        if a == "--out" {
            skip_next = true;
        } else if !a.starts_with("--out=") {
            kept.push(a);
        }
    }
    kept
}

fn gen_data(settings: &Settings, out: &Path, count: usize, start: u64) -> Result<serde_json::Value> {
    if count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    let samples = generate_samples(&settings.world, start, count)?;
    let dataset = Dataset::from_samples(Some(settings.world.clone()), settings.world.max_sentences, samples);
    write_dataset(out, &dataset)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(json!({ "count": count, "start": start }))
}

fn pretrain(settings: &Settings, out: &Path, data: &DataArgs, resume: Option<&Path>) -> Result<serde_json::Value> {
    let loaded = load_data(data)?;
    let samples: Vec<TrainSample<'_>> = match &loaded {
        Data::Synthetic(d) => d.samples.iter().map(TrainSample::from_aligned).collect(),
        Data::External(f) => f.pairs.iter().map(TrainSample::from_external).collect(),
    };
    let mut cfg = settings.train.clone();
    if let Data::External(f) = &loaded {
        // feature inputs bypass the toy encoders; heads read the given widths
        cfg.model.image_dim = f.image_dim;
        cfg.model.text_dim = f.text_dim;
        cfg.model.grid = f.grid;
    }
    let resume = resume.map(Checkpoint::load).transpose()?;
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume, ..Default::default() };
    let outcome = train(&samples, &cfg, &opts)?;
    let history = &outcome.checkpoint.history;
    atomic_write(&out.join("metrics.csv"), metrics_csv(history).as_bytes())?;
    if let Some(last) = history.last() {
        println!("epoch {}: total loss {:.6}", last.epoch, last.total);
    }
    Ok(json!({
        "dataset": data.dataset,
        "epochs_run": history.len(),
        "stopped_early": outcome.stopped_early,
        "train_config_hash": cfg.hash(),
    }))
}

fn eval_grounding(settings: &Settings, out: &Path, data: &DataArgs, model: &ModelArgs) -> Result<serde_json::Value> {
    let dataset = load_synthetic(data, "grounding")?;
    let model = load_model(model, settings)?;
    let (cases, mut excluded) = build_grounding_cases(&model, &dataset)?;
    let mut report = grounding_report(&cases)?;
    excluded.append(&mut report.excluded);
    atomic_write(&out.join("grounding.csv"), report.to_csv().as_bytes())?;
    let mut ex = String::from("id,reason\n");
    for e in &excluded {
        ex.push_str(&format!("{},\"{}\"\n", e.id, e.reason.replace('"', "'")));
    }
    atomic_write(&out.join("grounding_excluded.csv"), ex.as_bytes())?;
    print!("{}", report.to_csv());
    Ok(json!({ "cases": report.per_case.len(), "excluded": excluded.len() }))
}

fn eval_segmentation(settings: &Settings, out: &Path, data: &DataArgs, model: &ModelArgs) -> Result<serde_json::Value> {
    let dataset = load_synthetic(data, "segmentation")?;
    let model = load_model(model, settings)?;
    let cfg = &settings.probe;
    let (fit, held): (Vec<&AlignedSample>, Vec<&AlignedSample>) =
        dataset.samples.iter().partition(|s| !vlp_core::data::is_validation_id(&s.id, cfg.holdout_fraction));
    if fit.is_empty() || held.is_empty() {
        return Err(invalid(format!(
            "probe.holdout_fraction: split of {} samples left an empty side",
            dataset.samples.len()
        )));
    }
    let before = serde_json::to_vec(&model)?;
    let probe = linear_probe_train(&model, &fit, cfg)?;
    let data = ProbeData::from_samples(&model, &held, cfg.target_label.as_deref())?;
    let eval = evaluate_probe(&probe, &data)?;
    if serde_json::to_vec(&model)? != before {
        bail!("encoder parameters changed during probing");
    }
    let mut csv = String::from("metric,value,n\n");
    csv.push_str(&format!("dice,{},{}\n", eval.mean_dice, eval.per_image.len()));
    atomic_write(&out.join("segmentation.csv"), csv.as_bytes())?;
    let mut per = String::from("id,dice\n");
    for (s, d) in held.iter().zip(&eval.per_image) {
        per.push_str(&format!("{},{d}\n", s.id));
    }
    atomic_write(&out.join("segmentation_per_image.csv"), per.as_bytes())?;
    println!("mean Dice {:.4} over {} held-out images", eval.mean_dice, eval.per_image.len());
    Ok(json!({ "train_images": fit.len(), "test_images": held.len(), "mean_dice": eval.mean_dice }))
}

fn heatmaps(
    settings: &Settings,
    out: &Path,
    data: &DataArgs,
    model: &ModelArgs,
    ids: &[String],
    query: Option<&str>,
) -> Result<serde_json::Value> {
    let dataset = load_synthetic(data, "heatmap export")?;
    let model = load_model(model, settings)?;
    let chosen: Vec<&AlignedSample> = if ids.is_empty() {
        let first = dataset
            .samples
            .iter()
            .find(|s| query.is_some() || dataset.queries.contains_key(&s.id))
            .ok_or_else(|| invalid("dataset: no sample has a query"))?;
        vec![first]
    } else {
        ids.iter()
            .map(|id| {
                dataset.samples.iter().find(|s| &s.id == id).ok_or_else(|| invalid(format!("dataset: no sample `{id}`")))
            })
            .collect::<Result<_>>()?
    };
    let mut written = Vec::new();
    for s in chosen {
        let text = match query {
            Some(q) => q.to_string(),
            None => dataset.queries.get(&s.id).cloned().ok_or_else(|| invalid(format!("dataset: `{}` has no query", s.id)))?,
        };
        let q = model.text_joint_locals(&Report::parse(&text, 1)?)?;
        let map = similarity_map(&q.vectors().row(0).to_vec(), &model.image_joint_locals(&s.image)?)?;
        let opts = HeatmapOptions {
            csv: settings.heatmap_csv,
            upsample_to: settings.heatmap_upsample.then(|| (s.image.height(), s.image.width())),
        };
        let sidecar = export_heatmap(&map.values, &out.join("heatmaps").join(&s.id), &opts)?;
        written.push(json!({ "id": s.id, "query": text, "min": sidecar.min, "max": sidecar.max }));
    }
    println!("wrote {} heatmap(s) to {}", written.len(), out.join("heatmaps").display());
    Ok(json!({ "heatmaps": written }))
}

fn grad_check(settings: &Settings, out: &Path, tolerance: f64) -> Result<serde_json::Value> {
    let model = Model::init(tiny_config(), settings.seed())?;
    let world = SyntheticWorldConfig { seed: settings.seed(), ..tiny_world() };
    let samples = generate_samples(&world, 0, 2)?;
    let batch: Vec<_> = samples.iter().map(|s| PairInput::Raw { image: &s.image, report: &s.report }).collect();
    let report = model.gradient_check(&batch, &settings.train.loss, GradCheckConfig::default())?;
    let result = json!({
        "max_relative_error": report.max_relative_error,
        "max_absolute_error": report.max_absolute_error,
        "entries_checked": report.entries_checked,
        "worst": report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")),
        "tolerance": tolerance,
        "passed": report.passes(tolerance),
    });
    atomic_write(&out.join("grad_check.json"), (serde_json::to_string_pretty(&result)? + "\n").as_bytes())?;
    println!("max relative error {:.3e} over {} entries", report.max_relative_error, report.entries_checked);
    if !report.passes(tolerance) {
        bail!("gradient check failed: {:.3e} ≥ {tolerance:e}", report.max_relative_error);
    }
    Ok(result)
}

fn run(cli: &Cli) -> Result<()> {
    let settings = Settings::load(cli)?;
    if cli.workers == 0 {
        return Err(invalid("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global().ok();
    let out = out_dir(cli);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (name, details) = match &cli.command {
        Command::GenData { count, start } => ("gen-data", gen_data(&settings, &out, *count, *start)?),
        Command::Pretrain { data, resume } => ("pretrain", pretrain(&settings, &out, data, resume.as_deref())?),
        Command::EvalGrounding { data, model } => ("eval-grounding", eval_grounding(&settings, &out, data, model)?),
        Command::EvalSegmentation { data, model } => {
            ("eval-segmentation", eval_segmentation(&settings, &out, data, model)?)
        }
        Command::ExportHeatmap { data, model, ids, query } => {
            ("export-heatmap", heatmaps(&settings, &out, data, model, ids, query.as_deref())?)
        }
        Command::GradCheck { tolerance } => ("grad-check", grad_check(&settings, &out, *tolerance)?),
    };
    write_run_manifest(&out, name, &settings, details)
}

/// Validation errors (bad keys, values, or paths) exit 1, anything else 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<vlp_core::Error>() {
            let mut e = e;
            while let vlp_core::Error::Context { source, .. } = e {
                e = source;
            }
            return match e {
                vlp_core::Error::Config { .. } | vlp_core::Error::Dataset(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
