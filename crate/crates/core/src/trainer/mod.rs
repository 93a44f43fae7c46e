//! Alignment training, optimizer and schedule, and new-subject adaptation.

pub mod loss;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use loss::{infonce_loss, infonce_with_grad, mse_loss, soft_infonce_with_grad, LossConfig, MixcoDraw};
pub use optim::AdamW;
pub use schedule::{learning_rate, one_cycle_lr};

use crate::datahub::{config_hash, Checkpoint, Provenance};
use crate::domain::{validate_dataset, BrainSample, LossKind, SubjectSpec, TrainConfig};
use crate::encoder::{EncoderState, Gradients, PERCEIVER_PREFIX, TOKENIZER_PREFIX};
use crate::error::{Error, Result};
use crate::rng::{new_rng, RngHandle};
use crate::sampler::{compose_batch, epoch_batches, SamplingStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Only the new subject's tokenizer is trained.
    Frozen,
    /// The new tokenizer and the shared encoder are trained.
    Finetuned,
}

impl std::str::FromStr for AdaptationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "finetuned" => Ok(Self::Finetuned),
            other => Err(Error::Argument(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub mode: AdaptationMode,
    /// Fraction of the new subject's samples used, in `(0, 1]`.
    pub data_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub dominant_subject: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Element-mean squared error on the held-out validation samples.
    pub validation_mse: Option<f64>,
    /// Training objective on the validation samples, without mixing. Absent
    /// when the objective needs more samples than were held out.
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line: every step record, then every epoch record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({"type": "step", "record": s})).expect("serializable"),
            );
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({"type": "epoch", "record": e})).expect("serializable"),
            );
            out.push('\n');
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Training samples split per subject into train and validation indices.
struct Partition<'a> {
    train: BTreeMap<String, Vec<&'a BrainSample>>,
    validation: Vec<&'a BrainSample>,
}

fn partition<'a>(samples: &'a [BrainSample], fraction: f64, rng: &mut RngHandle) -> Partition<'a> {
    let mut by_subject: BTreeMap<String, Vec<&BrainSample>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(s.subject_id.clone()).or_default().push(s);
    }
    let mut train = BTreeMap::new();
    let mut validation = Vec::new();
    for (id, list) in by_subject {
        let held = ((fraction * list.len() as f64).floor() as usize).min(list.len().saturating_sub(1));
        let mut held_idx = index::sample(rng, list.len(), held).into_vec();
        held_idx.sort_unstable();
        let mut keep = Vec::with_capacity(list.len() - held);
        let mut h = held_idx.iter().peekable();
        for (i, s) in list.into_iter().enumerate() {
            if h.peek() == Some(&&i) {
                h.next();
                validation.push(s);
            } else {
                keep.push(s);
            }
        }
        train.insert(id, keep);
    }
    Partition { train, validation }
}

fn stack_targets(samples: &[&BrainSample], tokens: usize, channels: usize) -> Array2<f32> {
    let mut out = Array2::zeros((samples.len() * tokens, channels));
    for (b, s) in samples.iter().enumerate() {
        let t = s.target.as_ref().expect("targets checked before training");
        out.slice_mut(s![b * tokens..(b + 1) * tokens, ..]).assign(t.values());
    }
    out
}

/// Batch loss and gradient with respect to the stacked encoder output.
/// `mixco` carries input-level mixing already applied to the batch.
fn batch_loss(
    out: &Array2<f32>,
    targets: &Array2<f32>,
    batch: usize,
    loss_cfg: &LossConfig,
    mixco: Option<&MixcoDraw>,
) -> Result<(f32, Array2<f32>)> {
    match loss_cfg.kind {
        LossKind::MseEncoder => loss::mse_with_grad(out, targets),
        LossKind::NceEncoder => {
            let width = out.len() / batch;
            let brain = out
                .mapv(|v| v as f64)
                .into_shape_with_order((batch, width))
                .expect("stacked rows");
            let image = targets
                .mapv(|v| v as f64)
                .into_shape_with_order((batch, width))
                .expect("stacked rows");
            let soft = match mixco {
                Some(draw) => draw.targets(),
                None => Array2::eye(batch),
            };
            let (value, grad) = soft_infonce_with_grad(&brain.view(), &image.view(), loss_cfg.temperature, &soft)?;
            let grad = grad
                .mapv(|v| v as f32)
                .into_shape_with_order(out.raw_dim())
                .expect("same size");
            Ok((value as f32, grad))
        }
    }
}

/// Convexly mixes each voxel vector with its drawn same-subject partner.
fn mix_inputs(batch: &[&BrainSample], draw: &MixcoDraw) -> Vec<Vec<f32>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = draw.weights[i] as f32;
            let partner = &batch[draw.partners[i]].voxels;
            s.voxels
                .iter()
                .zip(partner)
                .map(|(&a, &b)| w * a + (1.0 - w) * b)
                .collect()
        })
        .collect()
}

/// Element-mean squared error of the encoder over `samples`.
pub fn evaluate_mse(state: &EncoderState<f32>, samples: &[&BrainSample]) -> Result<f64> {
    const CHUNK: usize = 64;
    let (t, c) = (state.config.latent_query_count, state.config.output_channels);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(CHUNK) {
        let items: Vec<(&str, &[f32])> = chunk
            .iter()
            .map(|s| (s.subject_id.as_str(), s.voxels.as_slice()))
            .collect();
        let out = state.forward_stacked(&items)?;
        let targets = stack_targets(chunk, t, c);
        sum += out
            .iter()
            .zip(targets.iter())
            .map(|(&p, &q)| {
                let d = p as f64 - q as f64;
                d * d
            })
            .sum::<f64>();
        count += out.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Symmetric InfoNCE over all `samples` as one batch, without mixing.
pub fn evaluate_nce(state: &EncoderState<f32>, samples: &[&BrainSample], temperature: f64) -> Result<f64> {
    let owned: Vec<BrainSample> = samples.iter().map(|&s| s.clone()).collect();
    let (brain, image) = crate::eval::retrieval_embeddings(state, &owned)?;
    let eye = Array2::eye(samples.len());
    Ok(soft_infonce_with_grad(&brain.view(), &image.view(), temperature, &eye)?.0)
}

fn check_configs(train_cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<()> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if train_cfg.loss != loss_cfg.kind {
        return Err(Error::Config(format!(
            "train config asks for {:?} but loss config is {:?}",
            train_cfg.loss, loss_cfg.kind
        )));
    }
    Ok(())
}

fn check_training_data(state: &EncoderState<f32>, samples: &[BrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    if let Some(i) = samples.iter().position(|s| s.target.is_none()) {
        return Err(Error::Argument(format!("sample {i} has no target grid")));
    }
    validate_dataset(samples, &state.specs()).into_result()?;
    let expected = (state.config.latent_query_count, state.config.output_channels);
    if let Some(t) = samples
        .iter()
        .filter_map(|s| s.target.as_ref())
        .find(|t| t.shape() != expected)
    {
        return Err(Error::shape(&[expected.0, expected.1], &[t.tokens(), t.channels()]));
    }
    Ok(())
}

struct RunSpec<'a> {
    train_cfg: &'a TrainConfig,
    loss_cfg: &'a LossConfig,
    strategy: SamplingStrategy,
    trainable: &'a dyn Fn(&str) -> bool,
}

fn run_training(
    state: &mut EncoderState<f32>,
    optimizer: &mut AdamW,
    samples: &[BrainSample],
    spec: RunSpec<'_>,
    rng: &mut RngHandle,
) -> Result<TrainLog> {
    let cfg = spec.train_cfg;
    let part = partition(samples, cfg.validation_fraction, rng);
    let sizes: BTreeMap<String, usize> = part.train.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let per_epoch = epoch_batches(&sizes, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let (t, c) = (state.config.latent_query_count, state.config.output_channels);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        for _ in 0..per_epoch {
            let plan = compose_batch(&sizes, cfg.batch_size, cfg.theta, spec.strategy, rng)?;
            let batch: Vec<&BrainSample> = plan
                .entries
                .iter()
                .map(|e| part.train[&e.subject_id][e.sample_index])
                .collect();
            let mixco = if spec.loss_cfg.kind == LossKind::NceEncoder && spec.loss_cfg.mixco_enabled {
                let groups: Vec<&str> = batch.iter().map(|s| s.subject_id.as_str()).collect();
                Some(MixcoDraw::sample_grouped(rng, &groups, spec.loss_cfg.mixco_alpha)?)
            } else {
                None
            };
            let mixed = mixco.as_ref().map(|d| mix_inputs(&batch, d));
            let items: Vec<(&str, &[f32])> = batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let v = mixed.as_ref().map_or(s.voxels.as_slice(), |m| m[i].as_slice());
                    (s.subject_id.as_str(), v)
                })
                .collect();
            let targets = stack_targets(&batch, t, c);
            let lr = learning_rate(cfg.schedule, step, total, cfg.lr_max)?;
            let (value, mut grads): (f32, Gradients<f32>) = state.backprop(&items, |out| {
                batch_loss(out, &targets, batch.len(), spec.loss_cfg, mixco.as_ref())
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "loss {value} at lr {lr:e}, dominant subject `{}`",
                        plan.dominant_subject
                    ),
                });
            }
            let grad_norm = optim::clip_global_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("gradient norm {grad_norm}"),
                });
            }
            optimizer.step(state, &grads, lr, spec.trainable);
            loss_sum += value as f64;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: value as f64,
                lr,
                grad_norm,
                dominant_subject: plan.dominant_subject,
            });
            step += 1;
        }
        let validation_mse = if part.validation.is_empty() {
            None
        } else {
            Some(evaluate_mse(state, &part.validation)?)
        };
        let validation_loss = match spec.loss_cfg.kind {
            LossKind::MseEncoder => validation_mse,
            LossKind::NceEncoder if part.validation.len() >= 2 => {
                Some(evaluate_nce(state, &part.validation, spec.loss_cfg.temperature)?)
            }
            LossKind::NceEncoder => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch.max(1) as f64,
            validation_mse,
            validation_loss,
        });
        log::debug!("epoch {epoch}: loss {:.6}", loss_sum / per_epoch.max(1) as f64);
    }
    Ok(log)
}

fn provenance(
    state: &EncoderState<f32>,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    strategy: SamplingStrategy,
    steps: usize,
    parent: Option<String>,
) -> Provenance {
    let hash = config_hash(&serde_json::json!({
        "encoder": state.config,
        "train": train_cfg,
        "loss": loss_cfg,
        "strategy": strategy,
    }));
    Provenance {
        seed: train_cfg.seed,
        config_hash: format!("{hash:016x}"),
        subject_ids: state.subject_ids(),
        steps,
        strategy: strategy.to_string(),
        parent,
    }
}

/// Trains every parameter of `state` to map each sample's voxels onto its
/// target grid.
pub fn train_align(
    state: EncoderState<f32>,
    samples: &[BrainSample],
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    strategy: SamplingStrategy,
) -> Result<(Checkpoint, TrainLog)> {
    check_configs(train_cfg, loss_cfg)?;
    check_training_data(&state, samples)?;
    let mut state = state;
    let mut rng = new_rng(train_cfg.seed);
    let mut optimizer = AdamW::new(train_cfg.beta1, train_cfg.beta2, train_cfg.weight_decay);
    let all = |_: &str| true;
    let log = run_training(
        &mut state,
        &mut optimizer,
        samples,
        RunSpec {
            train_cfg,
            loss_cfg,
            strategy,
            trainable: &all,
        },
        &mut rng,
    )?;
    let prov = provenance(&state, train_cfg, loss_cfg, strategy, log.steps.len(), None);
    Ok((Checkpoint::new(state, Some(optimizer), prov), log))
}

/// Seeded subset of `ratio · n` indices (at least one), in ascending order.
pub fn subsample_indices(n: usize, ratio: f64, rng: &mut RngHandle) -> Vec<usize> {
    let keep = ((ratio * n as f64).round() as usize).clamp(1.min(n), n);
    let mut idx = index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Registers `new_spec` on a copy of the base encoder with a fresh tokenizer
/// and trains it on a seeded `data_ratio` subset of `new_data`. In frozen
/// mode only that tokenizer changes; in finetuned mode the shared encoder is
/// trained too.
pub fn adapt_subject(
    base: &Checkpoint,
    new_spec: &SubjectSpec,
    new_data: &[BrainSample],
    cfg: &AdaptationConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Checkpoint, TrainLog)> {
    check_configs(train_cfg, loss_cfg)?;
    if !(cfg.data_ratio > 0.0 && cfg.data_ratio <= 1.0) {
        return Err(Error::Config(format!("data_ratio {} outside (0, 1]", cfg.data_ratio)));
    }
    if base.state.tokenizers.contains_key(&new_spec.subject_id) {
        return Err(Error::DuplicateSubject(new_spec.subject_id.clone()));
    }
    if let Some(s) = new_data.iter().find(|s| s.subject_id != new_spec.subject_id) {
        return Err(Error::Argument(format!(
            "adaptation data contains subject `{}`, expected `{}`",
            s.subject_id, new_spec.subject_id
        )));
    }
    let mut rng = new_rng(train_cfg.seed);
    let mut state = base.state.clone();
    state.register_subject(new_spec, &mut rng.fork())?;
    let subset: Vec<BrainSample> = subsample_indices(new_data.len(), cfg.data_ratio, &mut rng)
        .into_iter()
        .map(|i| new_data[i].clone())
        .collect();
    check_training_data(&state, &subset)?;

    let own = format!("{TOKENIZER_PREFIX}.{}.", new_spec.subject_id);
    let shared = format!("{PERCEIVER_PREFIX}.");
    let mode = cfg.mode;
    let trainable =
        move |name: &str| name.starts_with(&own) || (mode == AdaptationMode::Finetuned && name.starts_with(&shared));
    let mut optimizer = AdamW::new(train_cfg.beta1, train_cfg.beta2, train_cfg.weight_decay);
    let log = run_training(
        &mut state,
        &mut optimizer,
        &subset,
        RunSpec {
            train_cfg,
            loss_cfg,
            strategy: SamplingStrategy::Ours,
            trainable: &trainable,
        },
        &mut rng,
    )?;
    let parent = Some(base.provenance.config_hash.clone());
    let prov = provenance(
        &state,
        train_cfg,
        loss_cfg,
        SamplingStrategy::Ours,
        log.steps.len(),
        parent,
    );
    Ok((Checkpoint::new(state, Some(optimizer), prov), log))
}
