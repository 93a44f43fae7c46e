use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use brainalign::datahub::{
    export_features, import_features, load_checkpoint, load_dataset, perceiver_hash, save_checkpoint, save_dataset,
    sidecar_path, AnnotationFile, BoxRecord, Checkpoint, Dataset, CHECKPOINT_MANIFEST,
};
use brainalign::eval::{
    caption_report, grounding_accuracy, retrieval_embeddings, retrieval_report, Category, ExternalScorer, MetricValue,
    SalienceTaxonomy, ScorerRegistry, DEFAULT_POOL, DEFAULT_THRESHOLDS, DEFAULT_TRIALS, NATIVE_METRICS,
};
use brainalign::synthworld::{oracle_ceiling, WorldSpec};
use brainalign::trainer::LossConfig;
use brainalign::{
    adapt_subject, init_encoder, new_rng, train_align, validate_dataset, AdaptationConfig, AdaptationMode, BoundingBox,
    BrainSample, EncoderConfig, FeatureGrid, LabeledBox, LossKind, SamplingStrategy, SubjectSpec, TrainConfig,
};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::report::{num, opt, Report};
use crate::{Cli, Command, EvalKind, UsageError};

const ENCODER_FILE: &str = "encoder.json";
const TRAIN_FILE: &str = "train.json";

pub fn run(cli: Cli) -> Result<()> {
    let dir = cli.config_dir.as_deref();
    match cli.command {
        Command::Train(a) => train(&a, dir),
        Command::Adapt(a) => adapt(&a, dir),
        Command::Eval(e) => match e.kind {
            EvalKind::Retrieval(a) => eval_retrieval(&a),
            EvalKind::Grounding(a) => eval_grounding(&a),
            EvalKind::Caption(a) => eval_caption(&a),
        },
        Command::Simulate(a) => simulate(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

// ------------------------------------------------------------------ inputs

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// An explicit file wins over `<config_dir>/<name>`; `None` when neither exists.
fn config_file<T: DeserializeOwned>(explicit: Option<&Path>, dir: Option<&Path>, name: &str) -> Result<Option<T>> {
    if let Some(p) = explicit {
        existing(p, "config file")?;
        return read_json(p).map(Some);
    }
    match dir.map(|d| d.join(name)) {
        Some(p) if p.exists() => read_json(&p).map(Some),
        _ => Ok(None),
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    existing(path, "manifest")?;
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    existing(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Restricts a dataset to `subjects`; an empty list keeps every subject.
fn select(ds: Dataset, subjects: &[String]) -> Result<Dataset> {
    if subjects.is_empty() {
        return Ok(ds);
    }
    for id in subjects {
        if !ds.specs.iter().any(|s| &s.subject_id == id) {
            return Err(usage(format!("subject `{id}` is not in the dataset")));
        }
    }
    let keep = |s: &BrainSample| subjects.contains(&s.subject_id);
    Ok(Dataset {
        specs: ds
            .specs
            .into_iter()
            .filter(|s| subjects.contains(&s.subject_id))
            .collect(),
        train: ds.train.into_iter().filter(keep).collect(),
        test: ds.test.into_iter().filter(keep).collect(),
    })
}

fn of_subject(samples: &[BrainSample], id: &str) -> Vec<BrainSample> {
    samples.iter().filter(|s| s.subject_id == id).cloned().collect()
}

fn target_shape(samples: &[BrainSample]) -> Result<(usize, usize)> {
    samples
        .iter()
        .find_map(|s| s.target.as_ref().map(FeatureGrid::shape))
        .ok_or_else(|| anyhow!("no sample carries a target grid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The full-size encoder.
    Default,
    /// A small encoder that trains on one CPU core in minutes.
    Desk,
}

/// Training flags shared by `train` and `adapt`; unset flags fall back to
/// the train config file, then to built-in defaults.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// mse_encoder or nce_encoder.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON training config used as the base for these flags.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self, dir: Option<&Path>) -> Result<TrainConfig> {
        let mut tc: TrainConfig = config_file(self.train_config.as_deref(), dir, TRAIN_FILE)?.unwrap_or_default();
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        if let Some(v) = self.batch {
            tc.batch_size = v;
        }
        if let Some(v) = self.theta {
            tc.theta = v;
        }
        if let Some(v) = self.loss {
            tc.loss = v;
        }
        if let Some(v) = self.lr {
            tc.lr_max = v;
        }
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        tc.validate().map_err(|e| usage(e.to_string()))?;
        Ok(tc)
    }
}

// ------------------------------------------------------------------ train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated subject ids; all subjects when omitted.
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// ours, ours_r, random or stratified.
    #[arg(long, default_value = "ours")]
    pub strategy: SamplingStrategy,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// JSON encoder config; overrides the preset.
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn train(a: &TrainArgs, dir: Option<&Path>) -> Result<()> {
    let tc = a.train.resolve(dir)?;
    let ds = select(open_dataset(&a.manifest)?, &a.subjects)?;
    validate_dataset(&ds.train, &ds.specs).into_result()?;
    if ds.train.is_empty() {
        bail!("the training split is empty");
    }
    let (tokens, channels) = target_shape(&ds.train)?;
    let mut cfg = match config_file::<EncoderConfig>(a.encoder_config.as_deref(), dir, ENCODER_FILE)? {
        Some(c) => c,
        None if a.preset == Preset::Desk => EncoderConfig::desk(tokens, channels),
        None => EncoderConfig::default(),
    };
    // the output grid always follows the targets
    cfg.latent_query_count = tokens;
    cfg.output_channels = channels;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let state = init_encoder(&cfg, &ds.specs, &mut new_rng(tc.seed).fork())?;
    let (ckpt, log) = train_align(state, &ds.train, &tc, &LossConfig::for_kind(tc.loss), a.strategy)?;
    save_checkpoint(&ckpt, &a.out.join("checkpoint"))?;
    std::fs::write(a.out.join("train_log.jsonl"), log.to_jsonl())?;

    let mut report = Report::new("train", &["epoch", "mean_loss", "validation_loss"]);
    for e in &log.epochs {
        report.push(vec![e.epoch.to_string(), num(e.mean_loss), opt(e.validation_loss)]);
    }
    let meta = json!({
        "encoder": cfg,
        "train": tc,
        "strategy": a.strategy.to_string(),
        "subjects": ds.specs,
        "train_samples": ds.train.len(),
        "parameters": ckpt.state.count_parameters(),
        "provenance": ckpt.provenance,
    });
    let table = report.write(&a.out, &meta)?;
    println!("checkpoint\t{}", a.out.join("checkpoint").display());
    println!("report\t{}", table.display());
    println!("final_loss\t{}", opt(log.final_loss()));
    Ok(())
}

// ------------------------------------------------------------------ adapt

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Multi-subject checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// The new subject; must be in the dataset and absent from the checkpoint.
    #[arg(long)]
    pub subject: String,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.5,0.8,1.0")]
    pub ratios: Vec<f64>,
    /// frozen or finetuned.
    #[arg(long, default_value = "finetuned")]
    pub mode: AdaptationMode,
    /// Scale epochs by 1/ratio so every ratio gets the same number of steps.
    #[arg(long)]
    pub equal_steps: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    /// Also save each adapted checkpoint under `<out>/ratio_<r>`.
    #[arg(long)]
    pub keep_checkpoints: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn adapt(a: &AdaptArgs, dir: Option<&Path>) -> Result<()> {
    let tc = a.train.resolve(dir)?;
    if let Some(r) = a.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(usage(format!("ratio {r} outside (0, 1]")));
    }
    let base = open_checkpoint(&a.checkpoint)?;
    let ds = open_dataset(&a.manifest)?;
    let spec = ds
        .specs
        .iter()
        .find(|s| s.subject_id == a.subject)
        .cloned()
        .ok_or_else(|| usage(format!("subject `{}` is not in the dataset", a.subject)))?;
    if base.state.tokenizers.contains_key(&spec.subject_id) {
        return Err(usage(format!("checkpoint already has subject `{}`", spec.subject_id)));
    }
    let own = of_subject(&ds.train, &spec.subject_id);
    let test = of_subject(&ds.test, &spec.subject_id);
    if own.is_empty() || test.is_empty() {
        bail!("subject `{}` has no training or test samples", spec.subject_id);
    }
    let pool = a.pool.unwrap_or(DEFAULT_POOL.min(test.len()));
    let base_hash = perceiver_hash(&base.state);

    let mut report = Report::new(
        "adapt",
        &[
            "ratio",
            "mode",
            "samples",
            "epochs",
            "steps",
            "final_loss",
            "forward",
            "backward",
            "exemplar",
            "perceiver_hash",
            "perceiver_changed",
        ],
    );
    for &ratio in &a.ratios {
        let mut rtc = tc.clone();
        if a.equal_steps {
            rtc.epochs = (tc.epochs as f64 / ratio).round() as usize;
        }
        let ad = AdaptationConfig {
            mode: a.mode,
            data_ratio: ratio,
        };
        let (ckpt, log) = adapt_subject(&base, &spec, &own, &ad, &rtc, &LossConfig::for_kind(rtc.loss))?;
        let (brain, image) = retrieval_embeddings(&ckpt.state, &test)?;
        let r = retrieval_report(brain.view(), image.view(), pool, a.trials, tc.seed)?;
        let hash = perceiver_hash(&ckpt.state);
        let samples = ((ratio * own.len() as f64).round() as usize).clamp(1, own.len());
        report.push(vec![
            format!("{ratio}"),
            a.mode.to_string(),
            samples.to_string(),
            rtc.epochs.to_string(),
            log.steps.len().to_string(),
            opt(log.final_loss()),
            num(r.forward_acc),
            num(r.backward_acc),
            num(r.exemplar_acc),
            format!("{hash:016x}"),
            (hash != base_hash).to_string(),
        ]);
        if a.keep_checkpoints {
            save_checkpoint(&ckpt, &a.out.join(format!("ratio_{ratio}")))?;
        }
    }
    let meta = json!({
        "subject": spec,
        "train": tc,
        "equal_steps": a.equal_steps,
        "pool": pool,
        "trials": a.trials,
        "base_perceiver_hash": format!("{base_hash:016x}"),
        "base": base.provenance,
    });
    let table = report.write(&a.out, &meta)?;
    print!("{}", report.to_tsv());
    eprintln!("report written to {}", table.display());
    Ok(())
}

// ------------------------------------------------------------------ eval

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Subjects to evaluate; defaults to every subject in both inputs.
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Candidate pool size; defaults to min(300, samples per subject).
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the encoded grids as a feature container for downstream models.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn eval_retrieval(a: &RetrievalArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let ds = select(open_dataset(&a.manifest)?, &a.subjects)?;
    let samples = ds.split(&a.split).map_err(|e| usage(e.to_string()))?;
    let subjects: Vec<&SubjectSpec> = ds
        .specs
        .iter()
        .filter(|s| ckpt.state.tokenizers.contains_key(&s.subject_id))
        .collect();
    if subjects.is_empty() {
        return Err(usage("no subject is shared by the checkpoint and the dataset"));
    }
    let mut report = Report::new(
        "retrieval",
        &["subject", "count", "pool", "trials", "forward", "backward", "exemplar"],
    );
    let mut exported = Vec::new();
    for spec in subjects {
        let rows = of_subject(samples, &spec.subject_id);
        if rows.is_empty() {
            bail!("subject `{}` has no samples in split `{}`", spec.subject_id, a.split);
        }
        let pool = a.pool.unwrap_or(DEFAULT_POOL.min(rows.len()));
        let (brain, image) = retrieval_embeddings(&ckpt.state, &rows)?;
        let r = retrieval_report(brain.view(), image.view(), pool, a.trials, a.seed)?;
        report.push(vec![
            spec.subject_id.clone(),
            r.count.to_string(),
            r.pool_size.to_string(),
            r.trials.to_string(),
            num(r.forward_acc),
            num(r.backward_acc),
            num(r.exemplar_acc),
        ]);
        if a.export.is_some() {
            for s in &rows {
                exported.push(ckpt.state.forward(&s.subject_id, &s.voxels)?);
            }
        }
    }
    if let Some(path) = &a.export {
        export_features(&exported, path)?;
    }
    let meta = json!({ "split": a.split, "seed": a.seed, "checkpoint": ckpt.provenance });
    report.write(&a.out, &meta)?;
    print!("{}", report.to_tsv());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GroundingArgs {
    /// Predicted boxes: a JSON list of box records or an annotation file.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth boxes in the same layout, paired with predictions by position.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    existing(path, "box file")?;
    let value: serde_json::Value = read_json(path)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(serde_json::from_value::<AnnotationFile>(value)?.annotations)
    }
}

fn labeled(r: &BoxRecord) -> LabeledBox {
    LabeledBox {
        label: r.label.clone(),
        bbox: BoundingBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
    }
}

fn eval_grounding(a: &GroundingArgs) -> Result<()> {
    let preds = read_boxes(&a.predictions)?;
    let gts = read_boxes(&a.annotations)?;
    if preds.len() != gts.len() {
        bail!("{} predictions for {} ground-truth boxes", preds.len(), gts.len());
    }
    if let Some(i) = (0..preds.len()).find(|&i| preds[i].stimulus_id != gts[i].stimulus_id) {
        bail!(
            "row {i}: prediction for `{}` paired with `{}`",
            preds[i].stimulus_id,
            gts[i].stimulus_id
        );
    }
    let preds: Vec<LabeledBox> = preds.iter().map(labeled).collect();
    let gts: Vec<LabeledBox> = gts.iter().map(labeled).collect();
    let report_data = grounding_accuracy(&preds, &gts, &SalienceTaxonomy::default(), &a.thresholds)?;
    let mut header = vec!["category".to_string(), "count".to_string()];
    header.extend(a.thresholds.iter().map(|m| format!("acc@{m}")));
    header.push("mean_iou".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut report = Report::new("grounding", &header);
    for cat in Category::ALL {
        let s = report_data.get(cat);
        let mut row = vec![cat.to_string(), s.count.to_string()];
        row.extend(s.accuracy.iter().map(|v| num(*v)));
        row.push(num(s.mean_iou));
        report.push(row);
    }
    report.write(&a.out, &json!({ "thresholds": a.thresholds, "boxes": gts.len() }))?;
    print!("{}", report.to_tsv());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// One candidate caption per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// One line per candidate holding its tab-separated references.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = NATIVE_METRICS.map(String::from))]
    pub metrics: Vec<String>,
    /// External scorer as `name=program [args...]`; repeatable.
    #[arg(long = "scorer")]
    pub scorers: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_scorer(spec: &str) -> Result<(String, ExternalScorer)> {
    let (name, cmd) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("scorer `{spec}` is not of the form name=program")))?;
    let mut parts = cmd.split_whitespace().map(String::from);
    let program = parts
        .next()
        .ok_or_else(|| usage(format!("scorer `{name}` has no program")))?;
    Ok((
        name.trim().to_string(),
        ExternalScorer {
            program,
            args: parts.collect(),
        },
    ))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    existing(path, "input")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(String::from).collect())
}

fn eval_caption(a: &CaptionArgs) -> Result<()> {
    let candidates = read_lines(&a.candidates)?;
    let references: Vec<Vec<String>> = read_lines(&a.references)?
        .iter()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect();
    if candidates.len() != references.len() {
        bail!(
            "{} candidates for {} reference lines",
            candidates.len(),
            references.len()
        );
    }
    let mut registry = ScorerRegistry::default();
    for s in &a.scorers {
        let (name, scorer) = parse_scorer(s)?;
        registry.register_scorer(&name, scorer);
    }
    let r = caption_report(&candidates, &references, &a.metrics, &registry)?;
    let mut report = Report::new("caption", &["metric", "value"]);
    for name in &a.metrics {
        let cell = match &r.metrics[name] {
            MetricValue::Value(v) => num(*v),
            MetricValue::Unavailable(tag) => tag.clone(),
        };
        report.push(vec![name.clone(), cell]);
    }
    report.write(
        &a.out,
        &json!({ "count": r.count, "scorers": registry.names().collect::<Vec<_>>() }),
    )?;
    print!("{}", report.to_tsv());
    Ok(())
}

// ------------------------------------------------------------------ simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_delimiter = ',', default_value = "512,640,768")]
    pub voxel_dims: Vec<usize>,
    /// Target grid as TOKENSxCHANNELS.
    #[arg(long, default_value = "16x32", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 1200)]
    pub gallery: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gallery items held out as the shared test split.
    #[arg(long, default_value_t = 300)]
    pub test_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (t, c) = s.split_once(['x', 'X']).ok_or("expected TOKENSxCHANNELS")?;
    let t = t.trim().parse().map_err(|e| format!("tokens: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("channels: {e}"))?;
    Ok((t, c))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let spec = WorldSpec {
        voxel_dims: a.voxel_dims.clone(),
        grid_shape: a.grid,
        gallery_size: a.gallery,
        noise: a.noise,
        seed: a.seed,
    };
    let world = spec.build().map_err(|e| usage(e.to_string()))?;
    let ds = world
        .split_dataset(a.test_size, &mut new_rng(a.seed).fork())
        .map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    spec.save(&a.out.join("world.json"))?;
    let manifest = save_dataset(&a.out, &ds)?;
    let pool = DEFAULT_POOL.min(a.gallery);
    let ceiling = oracle_ceiling(&world, pool, &mut new_rng(a.seed))?;

    let mut report = Report::new("simulate", &["subject", "voxel_dim", "train", "test"]);
    for s in &ds.specs {
        report.push(vec![
            s.subject_id.clone(),
            s.voxel_dim.to_string(),
            of_subject(&ds.train, &s.subject_id).len().to_string(),
            of_subject(&ds.test, &s.subject_id).len().to_string(),
        ]);
    }
    report.write(
        &a.out,
        &json!({ "world": spec, "latent_dim": world.latent_dim, "oracle_ceiling": ceiling, "ceiling_pool": pool }),
    )?;
    println!("manifest\t{}", manifest.display());
    println!("oracle_ceiling\t{}", num(ceiling));
    Ok(())
}

// ------------------------------------------------------------------ inspect

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A checkpoint directory, dataset manifest or exported feature file.
    pub path: PathBuf,
    /// Print JSON instead of key/value lines.
    #[arg(long)]
    pub json: bool,
}

fn inspect(a: &InspectArgs) -> Result<()> {
    existing(&a.path, "path")?;
    let summary = if a.path.is_dir() && a.path.join(CHECKPOINT_MANIFEST).exists() {
        let c = load_checkpoint(&a.path)?;
        let dims: BTreeMap<String, usize> = c
            .state
            .specs()
            .into_iter()
            .map(|s| (s.subject_id, s.voxel_dim))
            .collect();
        json!({
            "kind": "checkpoint",
            "format_version": c.format_version,
            "encoder": c.state.config,
            "subjects": dims,
            "parameters": c.state.count_parameters(),
            "perceiver_hash": format!("{:016x}", perceiver_hash(&c.state)),
            "has_optimizer": c.optimizer.is_some(),
            "provenance": c.provenance,
        })
    } else if sidecar_path(&a.path).exists() {
        let (h, _) = import_features(&a.path)?;
        json!({ "kind": "features", "header": h })
    } else if a.path.is_file() {
        let ds = load_dataset(&a.path)?;
        let counts: BTreeMap<String, (usize, usize)> = ds
            .specs
            .iter()
            .map(|s| {
                let id = &s.subject_id;
                (
                    id.clone(),
                    (of_subject(&ds.train, id).len(), of_subject(&ds.test, id).len()),
                )
            })
            .collect();
        json!({
            "kind": "dataset",
            "subjects": ds.specs,
            "train": ds.train.len(),
            "test": ds.test.len(),
            "per_subject_train_test": counts,
            "target_shape": target_shape(&ds.train).ok(),
        })
    } else {
        return Err(usage(format!(
            "`{}` is not a checkpoint, manifest or feature file",
            a.path.display()
        )));
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if let serde_json::Value::Object(map) = &summary {
        for (k, v) in map {
            println!("{k}\t{v}");
        }
    }
    Ok(())
}
