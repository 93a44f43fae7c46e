//! Domain types and configuration shared by every module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity and voxel dimensionality of one subject's signal space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub voxel_dim: usize,
}

impl SubjectSpec {
    pub fn new(subject_id: impl Into<String>, voxel_dim: usize) -> Self {
        Self {
            subject_id: subject_id.into(),
            voxel_dim,
        }
    }
}

/// Fixed-shape `tokens × channels` feature matrix: the encoder output and the
/// alignment target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    values: Array2<f32>,
}

impl FeatureGrid {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(tokens: usize, channels: usize) -> Self {
        Self {
            values: Array2::zeros((tokens, channels)),
        }
    }

    pub fn tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    /// Row-major flattened view, as consumed by retrieval and export.
    pub fn as_slice(&self) -> &[f32] {
        self.values.as_slice().expect("grid is kept in standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2)
    }

    pub fn in_unit_square(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|c| (0.0..=1.0).contains(c))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

/// One recorded brain response with its optional alignment target and
/// annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainSample {
    pub subject_id: String,
    /// Identifier of the stimulus shown; shared across subjects viewing the
    /// same image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus_id: Option<String>,
    pub voxels: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<FeatureGrid>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<LabeledBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
}

impl BrainSample {
    pub fn new(subject_id: impl Into<String>, voxels: Vec<f32>) -> Self {
        Self {
            subject_id: subject_id.into(),
            stimulus_id: None,
            voxels,
            target: None,
            boxes: Vec::new(),
            captions: Vec::new(),
        }
    }

    pub fn with_target(mut self, target: FeatureGrid) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_stimulus(mut self, id: impl Into<String>) -> Self {
        self.stimulus_id = Some(id.into());
        self
    }
}

/// Averages repeated presentations of the same stimulus per subject.
///
/// Samples without a stimulus id are passed through untouched. Targets,
/// boxes and captions are taken from the first repetition.
pub fn average_repetitions(samples: &[BrainSample]) -> Vec<BrainSample> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&BrainSample>> = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        match &s.stimulus_id {
            Some(stim) => {
                let key = (s.subject_id.clone(), stim.clone());
                let group = groups.entry(key.clone()).or_default();
                if group.is_empty() {
                    order.push(key);
                }
                group.push(s);
            }
            None => out.push(s.clone()),
        }
    }
    for key in order {
        let group = &groups[&key];
        let mut merged = group[0].clone();
        let n = group.len() as f32;
        for (i, v) in merged.voxels.iter_mut().enumerate() {
            *v = group
                .iter()
                .map(|g| g.voxels.get(i).copied().unwrap_or(0.0))
                .sum::<f32>()
                / n;
        }
        out.push(merged);
    }
    out
}

/// Shape hyperparameters of the subject tokenizers and the shared encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Brain tokens produced by each subject tokenizer (L).
    pub token_count: usize,
    /// Token width consumed by the shared encoder (D).
    pub token_dim: usize,
    /// Learnable subject tokens prepended to the brain tokens (M).
    pub subject_token_count: usize,
    /// Latent queries, i.e. output token count.
    pub latent_query_count: usize,
    /// Latent self-attention blocks after the single cross-attention block.
    pub encoder_depth: usize,
    pub attention_heads: usize,
    /// Output channel width (D_t).
    pub output_channels: usize,
    /// Feed-forward hidden width as a multiple of `token_dim`.
    #[serde(default = "default_ff_multiplier")]
    pub ff_multiplier: usize,
}

fn default_ff_multiplier() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_count: 256,
            token_dim: 1024,
            subject_token_count: 5,
            latent_query_count: 256,
            encoder_depth: 4,
            attention_heads: 8,
            output_channels: 1024,
            ff_multiplier: 4,
        }
    }
}

impl EncoderConfig {
    /// Small preset that trains in minutes on one CPU core.
    pub fn desk(latent_query_count: usize, output_channels: usize) -> Self {
        Self {
            token_count: 16,
            token_dim: 64,
            subject_token_count: 2,
            latent_query_count,
            encoder_depth: 1,
            attention_heads: 4,
            output_channels,
            ff_multiplier: 2,
        }
    }

    pub fn input_rows(&self) -> usize {
        self.subject_token_count + self.token_count
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.attention_heads
    }

    pub fn ff_hidden(&self) -> usize {
        self.token_dim * self.ff_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_count", self.token_count),
            ("token_dim", self.token_dim),
            ("subject_token_count", self.subject_token_count),
            ("latent_query_count", self.latent_query_count),
            ("attention_heads", self.attention_heads),
            ("output_channels", self.output_channels),
            ("ff_multiplier", self.ff_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.token_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by attention_heads {}",
                self.token_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MseEncoder,
    NceEncoder,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::MseEncoder => "mse_encoder",
            LossKind::NceEncoder => "nce_encoder",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse_encoder" | "mse" => Ok(LossKind::MseEncoder),
            "nce_encoder" | "nce" => Ok(LossKind::NceEncoder),
            other => Err(Error::Argument(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneCycle,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_cycle" => Ok(Schedule::OneCycle),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Argument(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fraction of each batch drawn from the dominant subject.
    pub theta: f64,
    pub epochs: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub schedule: Schedule,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Per-subject fraction of training samples held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            theta: 0.5,
            epochs: 240,
            lr_max: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            loss: LossKind::MseEncoder,
            schedule: Schedule::OneCycle,
            grad_clip: 1.0,
            validation_fraction: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.lr_max >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr_max and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    DuplicateSubject {
        subject_id: String,
    },
    ZeroVoxelDim {
        subject_id: String,
    },
    UnknownSubject {
        sample: usize,
        subject_id: String,
    },
    VoxelLength {
        sample: usize,
        expected: usize,
        got: usize,
    },
    NonFiniteVoxels {
        sample: usize,
    },
    NonFiniteTarget {
        sample: usize,
    },
    TargetShape {
        sample: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    DegenerateBox {
        sample: usize,
        index: usize,
    },
    BoxOutOfRange {
        sample: usize,
        index: usize,
    },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::DuplicateSubject { subject_id } => write!(f, "duplicate subject `{subject_id}`"),
            Issue::ZeroVoxelDim { subject_id } => write!(f, "subject `{subject_id}` has voxel_dim 0"),
            Issue::UnknownSubject { sample, subject_id } => {
                write!(f, "sample {sample}: unknown subject `{subject_id}`")
            }
            Issue::VoxelLength { sample, expected, got } => {
                write!(f, "sample {sample}: {got} voxels, expected {expected}")
            }
            Issue::NonFiniteVoxels { sample } => write!(f, "sample {sample}: non-finite voxel"),
            Issue::NonFiniteTarget { sample } => write!(f, "sample {sample}: non-finite target"),
            Issue::TargetShape { sample, expected, got } => {
                write!(f, "sample {sample}: target shape {got:?}, expected {expected:?}")
            }
            Issue::DegenerateBox { sample, index } => {
                write!(f, "sample {sample}: box {index} is degenerate")
            }
            Issue::BoxOutOfRange { sample, index } => {
                write!(f, "sample {sample}: box {index} leaves the unit square")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        match self.issues.first() {
            None => Ok(()),
            Some(first) => Err(Error::Dataset(self.issues.len(), first.to_string())),
        }
    }
}

/// Lists every violated invariant of a dataset. Target grids must all share
/// the shape of the first target encountered.
pub fn validate_dataset(samples: &[BrainSample], specs: &[SubjectSpec]) -> ValidationReport {
    let mut issues = Vec::new();
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for spec in specs {
        if !seen.insert(spec.subject_id.as_str()) {
            issues.push(Issue::DuplicateSubject {
                subject_id: spec.subject_id.clone(),
            });
        }
        if spec.voxel_dim == 0 {
            issues.push(Issue::ZeroVoxelDim {
                subject_id: spec.subject_id.clone(),
            });
        }
        dims.entry(&spec.subject_id).or_insert(spec.voxel_dim);
    }

    let mut grid_shape = None;
    for (i, s) in samples.iter().enumerate() {
        match dims.get(s.subject_id.as_str()) {
            None => issues.push(Issue::UnknownSubject {
                sample: i,
                subject_id: s.subject_id.clone(),
            }),
            Some(&expected) if expected != s.voxels.len() => issues.push(Issue::VoxelLength {
                sample: i,
                expected,
                got: s.voxels.len(),
            }),
            Some(_) => {}
        }
        if s.voxels.iter().any(|v| !v.is_finite()) {
            issues.push(Issue::NonFiniteVoxels { sample: i });
        }
        if let Some(t) = &s.target {
            if !t.is_finite() {
                issues.push(Issue::NonFiniteTarget { sample: i });
            }
            let shape = t.shape();
            match grid_shape {
                None => grid_shape = Some(shape),
                Some(expected) if expected != shape => issues.push(Issue::TargetShape {
                    sample: i,
                    expected,
                    got: shape,
                }),
                Some(_) => {}
            }
        }
        for (j, b) in s.boxes.iter().enumerate() {
            if b.bbox.is_degenerate() {
                issues.push(Issue::DegenerateBox { sample: i, index: j });
            }
            if !b.bbox.in_unit_square() {
                issues.push(Issue::BoxOutOfRange { sample: i, index: j });
            }
        }
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specs() -> Vec<SubjectSpec> {
        vec![SubjectSpec::new("s1", 12), SubjectSpec::new("s2", 4)]
    }

    fn good_sample(subject: &str, n: usize) -> BrainSample {
        let mut s = BrainSample::new(subject, vec![0.5; n]);
        s.target = Some(FeatureGrid::zeros(2, 3));
        s.boxes.push(LabeledBox {
            label: "cat".into(),
            bbox: BoundingBox::new(0.1, 0.2, 0.5, 0.9),
        });
        s
    }

    #[test]
    fn conforming_dataset_has_empty_report() {
        let samples = vec![good_sample("s1", 12), good_sample("s2", 4)];
        assert!(validate_dataset(&samples, &specs()).is_empty());
    }

    #[test]
    fn length_mismatch_is_reported_once() {
        let samples = vec![good_sample("s1", 10)];
        let report = validate_dataset(&samples, &specs());
        assert_eq!(
            report.issues,
            vec![Issue::VoxelLength {
                sample: 0,
                expected: 12,
                got: 10
            }]
        );
    }

    #[test]
    fn inverted_box_is_degenerate() {
        let mut s = good_sample("s1", 12);
        s.boxes[0].bbox = BoundingBox::new(0.5, 0.5, 0.4, 0.9);
        let report = validate_dataset(&[s], &specs());
        assert_eq!(report.issues, vec![Issue::DegenerateBox { sample: 0, index: 0 }]);
    }

    #[test]
    fn unknown_subject_and_duplicate_spec() {
        let mut sp = specs();
        sp.push(SubjectSpec::new("s1", 12));
        let report = validate_dataset(&[good_sample("s9", 3)], &sp);
        assert_eq!(report.issues.len(), 2);
        assert!(report.into_result().is_err());
    }

    #[test]
    fn repetitions_are_averaged_before_encoding() {
        let a = BrainSample::new("s1", vec![1.0, 3.0]).with_stimulus("img7");
        let b = BrainSample::new("s1", vec![3.0, 5.0]).with_stimulus("img7");
        let c = BrainSample::new("s2", vec![9.0, 9.0]).with_stimulus("img7");
        let out = average_repetitions(&[a, b, c]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].voxels, vec![2.0, 4.0]);
        assert_eq!(out[1].voxels, vec![9.0, 9.0]);
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let t = TrainConfig::default();
        assert_eq!(t.batch_size, 256);
        assert_eq!(t.theta, 0.5);
        assert_eq!(t.epochs, 240);
        assert_eq!(t.lr_max, 3e-4);
        assert_eq!((t.beta1, t.beta2, t.weight_decay), (0.9, 0.95, 0.01));
        let e = EncoderConfig::default();
        assert_eq!((e.subject_token_count, e.token_dim), (5, 1024));
        assert_eq!((e.latent_query_count, e.output_channels), (256, 1024));
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut c = EncoderConfig::desk(4, 4);
        c.attention_heads = 3;
        assert!(c.validate().is_err());
        let mut t = TrainConfig::default();
        t.theta = 1.5;
        assert!(t.validate().is_err());
    }

    // Corruption kinds injected at random; the report must list exactly the
    // injected ones.
    #[derive(Debug, Clone, Copy)]
    enum Corruption {
        None,
        Length,
        Unknown,
        Degenerate,
        OutOfRange,
        NonFinite,
    }

    fn corruption() -> impl Strategy<Value = Corruption> {
        prop_oneof![
            Just(Corruption::None),
            Just(Corruption::Length),
            Just(Corruption::Unknown),
            Just(Corruption::Degenerate),
            Just(Corruption::OutOfRange),
            Just(Corruption::NonFinite),
        ]
    }

    proptest! {
        #[test]
        fn report_matches_injected_corruptions(kinds in prop::collection::vec(corruption(), 0..20)) {
            let sp = specs();
            let mut samples = Vec::new();
            let mut expected = 0usize;
            for (i, kind) in kinds.iter().enumerate() {
                let subject = if i % 2 == 0 { "s1" } else { "s2" };
                let dim = if i % 2 == 0 { 12 } else { 4 };
                let mut s = good_sample(subject, dim);
                match kind {
                    Corruption::None => {}
                    Corruption::Length => { s.voxels.push(0.0); expected += 1; }
                    Corruption::Unknown => { s.subject_id = "ghost".into(); expected += 1; }
                    Corruption::Degenerate => { s.boxes[0].bbox.x2 = 0.05; expected += 1; }
                    Corruption::OutOfRange => { s.boxes[0].bbox.y2 = 1.5; expected += 1; }
                    Corruption::NonFinite => { s.voxels[0] = f32::NAN; expected += 1; }
                }
                samples.push(s);
            }
            let report = validate_dataset(&samples, &sp);
            prop_assert_eq!(report.issues.len(), expected);
            prop_assert_eq!(report.is_empty(), expected == 0);
        }

        #[test]
        fn sample_json_round_trip(voxels in prop::collection::vec(-1e3f32..1e3, 1..16),
                                  x1 in 0.0f64..0.5, y1 in 0.0f64..0.5) {
            let mut s = BrainSample::new("s1", voxels).with_stimulus("73");
            s.target = Some(FeatureGrid::new(Array2::from_elem((2, 2), 0.25)).unwrap());
            s.boxes.push(LabeledBox { label: "dog".into(), bbox: BoundingBox::new(x1, y1, x1 + 0.25, y1 + 0.5) });
            s.captions.push("A dog on grass.".into());
            let text = serde_json::to_string(&s).unwrap();
            let back: BrainSample = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let e = EncoderConfig::desk(16, 32);
        let back: EncoderConfig = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
        let t = TrainConfig {
            loss: LossKind::NceEncoder,
            ..TrainConfig::default()
        };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 256);
    }
}
