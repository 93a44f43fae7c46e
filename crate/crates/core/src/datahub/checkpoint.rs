//! Checkpoint directories: `checkpoint.json` (text manifest), `params.bin`
//! and, when optimizer state is kept, `optimizer.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{fnv1a64, read_ref, write_locked, BlobWriter, TensorRef};
use crate::domain::{EncoderConfig, SubjectSpec};
use crate::encoder::{EncoderState, PERCEIVER_PREFIX};
use crate::error::{Error, Result};
use crate::trainer::optim::{AdamW, Moments};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
const PARAMS_FILE: &str = "params.bin";
const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub subject_ids: Vec<String>,
    pub steps: usize,
    pub strategy: String,
    /// Config hash of the checkpoint this one was adapted from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub state: EncoderState<f32>,
    pub optimizer: Option<AdamW>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    #[serde(flatten)]
    location: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    step: u64,
    first: TensorRef,
    second: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    encoder_config: EncoderConfig,
    subjects: Vec<SubjectSpec>,
    provenance: Provenance,
    parameters: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerEntry>,
}

impl Checkpoint {
    pub fn new(state: EncoderState<f32>, optimizer: Option<AdamW>, provenance: Provenance) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            state,
            optimizer,
            provenance,
        }
    }

    /// Wraps an untrained state.
    pub fn initial(state: EncoderState<f32>, seed: u64) -> Self {
        let provenance = Provenance {
            seed,
            config_hash: format!(
                "{:016x}",
                super::config_hash(&serde_json::json!({ "encoder": state.config }))
            ),
            subject_ids: state.subject_ids(),
            steps: 0,
            strategy: "none".into(),
            parent: None,
        };
        Self::new(state, None, provenance)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = BlobWriter::new(PARAMS_FILE);
    let mut parameters = Vec::new();
    ckpt.state.walk(&mut |name: &str, shape: &[usize], values: &[f32]| {
        let location = params.push(shape, values);
        parameters.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            location,
        });
    });
    params.finish(dir)?;

    let optimizer = match &ckpt.optimizer {
        Some(opt) => {
            let mut blob = BlobWriter::new(OPTIMIZER_FILE);
            let moments = opt
                .moments
                .iter()
                .map(|(name, m)| MomentEntry {
                    name: name.clone(),
                    step: m.step,
                    first: blob.push(&[m.first.len()], &m.first),
                    second: blob.push(&[m.second.len()], &m.second),
                })
                .collect();
            blob.finish(dir)?;
            Some(OptimizerEntry {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                moments,
            })
        }
        None => None,
    };

    let manifest = CheckpointManifest {
        format_version: ckpt.format_version,
        encoder_config: ckpt.state.config.clone(),
        subjects: ckpt.state.specs(),
        provenance: ckpt.provenance.clone(),
        parameters,
        optimizer,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_locked(&dir.join(CHECKPOINT_MANIFEST), text.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(probe)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut blob = |file: &str| -> Result<Vec<u8>> {
        if !blobs.contains_key(file) {
            blobs.insert(file.to_string(), fs::read(dir.join(file))?);
        }
        Ok(blobs[file].clone())
    };

    let mut named = BTreeMap::new();
    for t in &manifest.parameters {
        let data = blob(&t.location.file)?;
        let (shape, values) = read_ref(&data, &t.location, &t.name)?;
        if shape != t.shape {
            return Err(Error::Format(format!(
                "`{}`: stored shape {:?}, manifest {:?}",
                t.name, shape, t.shape
            )));
        }
        named.insert(t.name.clone(), values.into_iter().map(f64::from).collect::<Vec<_>>());
    }
    let state = EncoderState::<f32>::from_named(&manifest.encoder_config, &manifest.subjects, &named)?;

    let optimizer = match manifest.optimizer {
        Some(o) => {
            let mut opt = AdamW::new(o.beta1, o.beta2, o.weight_decay);
            opt.eps = o.eps;
            for m in o.moments {
                let (_, first) = read_ref(&blob(&m.first.file)?, &m.first, &m.name)?;
                let (_, second) = read_ref(&blob(&m.second.file)?, &m.second, &m.name)?;
                opt.moments.insert(
                    m.name,
                    Moments {
                        step: m.step,
                        first,
                        second,
                    },
                );
            }
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        format_version: manifest.format_version,
        state,
        optimizer,
        provenance: manifest.provenance,
    })
}

/// FNV-1a over the encoded shared-encoder parameters.
pub fn perceiver_hash(state: &EncoderState<f32>) -> u64 {
    let mut bytes = Vec::new();
    state.walk(&mut |name: &str, shape: &[usize], values: &[f32]| {
        if name.starts_with(PERCEIVER_PREFIX) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&super::tensor::encode_tensor(shape, values));
        }
    });
    fnv1a64(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::rng::new_rng;

    fn toy() -> EncoderState<f32> {
        let cfg = EncoderConfig {
            token_count: 2,
            token_dim: 4,
            subject_token_count: 1,
            latent_query_count: 3,
            encoder_depth: 1,
            attention_heads: 2,
            output_channels: 2,
            ff_multiplier: 2,
        };
        let specs = [
            SubjectSpec::new("S1", 6),
            SubjectSpec::new("S2", 5),
            SubjectSpec::new("S3", 7),
        ];
        init_encoder(&cfg, &specs, &mut new_rng(3)).unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let state = toy();
        let mut opt = AdamW::new(0.9, 0.95, 0.01);
        opt.moments.insert(
            "perceiver.head.bias".into(),
            Moments {
                step: 3,
                first: vec![0.1, 0.2],
                second: vec![0.3, 0.4],
            },
        );
        let ckpt = Checkpoint::new(
            state.clone(),
            Some(opt),
            Checkpoint::initial(state.clone(), 1).provenance,
        );
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let v = [0.5f32, -0.25, 1.0, 0.0, 2.0, -1.0];
        let a = state.forward("S1", &v).unwrap();
        let b = back.state.forward("S1", &v).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn version_mismatch_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::initial(toy(), 0).save(dir.path()).unwrap();
        let path = dir.path().join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn corrupted_params_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::initial(toy(), 0).save(dir.path()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn adding_a_subject_after_reload_keeps_existing_tokenizers() {
        let dir = tempfile::tempdir().unwrap();
        let state = toy();
        Checkpoint::initial(state.clone(), 0).save(dir.path()).unwrap();
        let mut back = Checkpoint::load(dir.path()).unwrap().state;
        back.register_subject(&SubjectSpec::new("S4", 9), &mut new_rng(1))
            .unwrap();
        for id in ["S1", "S2", "S3"] {
            let a = state.tokenizers[id].projection.weight.iter().map(|x| x.to_bits());
            let b = back.tokenizers[id].projection.weight.iter().map(|x| x.to_bits());
            assert!(a.eq(b));
            assert_eq!(state.tokenizers[id], back.tokenizers[id]);
        }
        assert_eq!(perceiver_hash(&state), perceiver_hash(&back));
    }

    #[test]
    fn identical_states_write_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        Checkpoint::initial(toy(), 0).save(a.path()).unwrap();
        Checkpoint::initial(toy(), 0).save(b.path()).unwrap();
        for f in [CHECKPOINT_MANIFEST, PARAMS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
