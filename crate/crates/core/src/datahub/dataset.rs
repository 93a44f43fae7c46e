//! Dataset manifests: a JSON text file listing subjects and, per split, one
//! record per sample pointing at its voxel and target tensors in per-split,
//! per-subject blob files. Annotations live in an optional COCO-style JSON
//! file joined to samples by stimulus id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tensor::{read_ref, write_locked, BlobWriter, TensorRef};
use crate::domain::{validate_dataset, BoundingBox, BrainSample, FeatureGrid, LabeledBox, SubjectSpec};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus_id: Option<String>,
    pub voxels: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TensorRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub subjects: Vec<SubjectSpec>,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    /// Annotation file, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    #[serde(alias = "image_id")]
    pub stimulus_id: String,
    #[serde(alias = "category")]
    pub label: String,
    /// `[x1, y1, x2, y2]`, normalized.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    #[serde(alias = "image_id")]
    pub stimulus_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default)]
    pub annotations: Vec<BoxRecord>,
    #[serde(default)]
    pub captions: Vec<CaptionRecord>,
}

impl AnnotationFile {
    /// Collects the boxes and captions attached to samples, one entry per
    /// stimulus id.
    pub fn from_samples(samples: &[BrainSample]) -> Self {
        let mut seen = BTreeSet::new();
        let mut out = Self::default();
        for s in samples {
            let Some(stim) = &s.stimulus_id else { continue };
            if !seen.insert(stim.clone()) {
                continue;
            }
            for b in &s.boxes {
                out.annotations.push(BoxRecord {
                    stimulus_id: stim.clone(),
                    label: b.label.clone(),
                    bbox: [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2],
                });
            }
            for c in &s.captions {
                out.captions.push(CaptionRecord {
                    stimulus_id: stim.clone(),
                    caption: c.clone(),
                });
            }
        }
        out
    }

    fn attach(&self, samples: &mut [BrainSample]) {
        let mut boxes: BTreeMap<&str, Vec<LabeledBox>> = BTreeMap::new();
        for b in &self.annotations {
            boxes.entry(&b.stimulus_id).or_default().push(LabeledBox {
                label: b.label.clone(),
                bbox: BoundingBox::new(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]),
            });
        }
        let mut captions: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for c in &self.captions {
            captions.entry(&c.stimulus_id).or_default().push(c.caption.clone());
        }
        for s in samples {
            if let Some(stim) = &s.stimulus_id {
                s.boxes = boxes.get(stim.as_str()).cloned().unwrap_or_default();
                s.captions = captions.get(stim.as_str()).cloned().unwrap_or_default();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub specs: Vec<SubjectSpec>,
    pub train: Vec<BrainSample>,
    pub test: Vec<BrainSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[BrainSample]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

fn write_split(split: &str, samples: &[BrainSample], blobs: &mut BTreeMap<String, BlobWriter>) -> Vec<SampleRecord> {
    samples
        .iter()
        .map(|s| {
            let file = format!("{split}_{}.bin", s.subject_id);
            let blob = blobs.entry(file.clone()).or_insert_with(|| BlobWriter::new(file));
            let voxels = blob.push(&[s.voxels.len()], &s.voxels);
            let target = s.target.as_ref().map(|t| {
                let (r, c) = t.shape();
                blob.push(&[r, c], t.as_slice())
            });
            SampleRecord {
                subject_id: s.subject_id.clone(),
                stimulus_id: s.stimulus_id.clone(),
                voxels,
                target,
            }
        })
        .collect()
}

/// Writes a dataset directory and returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let mut blobs = BTreeMap::new();
    let train = write_split("train", &dataset.train, &mut blobs);
    let test = write_split("test", &dataset.test, &mut blobs);
    for (_, blob) in blobs {
        blob.finish(dir)?;
    }
    let mut all = dataset.train.clone();
    all.extend(dataset.test.iter().cloned());
    let ann = AnnotationFile::from_samples(&all);
    let annotations = if ann.annotations.is_empty() && ann.captions.is_empty() {
        None
    } else {
        let name = "annotations.json".to_string();
        write_locked(&dir.join(&name), serde_json::to_string_pretty(&ann)?.as_bytes())?;
        Some(name)
    };
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        subjects: dataset.specs.clone(),
        train,
        test,
        annotations,
    };
    let path = dir.join(DATASET_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_locked(&path, text.as_bytes())?;
    Ok(path)
}

fn read_split(
    dir: &Path,
    records: &[SampleRecord],
    split: &str,
    blobs: &mut BTreeMap<String, Vec<u8>>,
) -> Result<Vec<BrainSample>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut load = |t: &TensorRef, what: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            if !blobs.contains_key(&t.file) {
                let bytes = fs::read(dir.join(&t.file)).map_err(|e| {
                    Error::Io(std::io::Error::new(
                        e.kind(),
                        format!("{}: {e}", dir.join(&t.file).display()),
                    ))
                })?;
                blobs.insert(t.file.clone(), bytes);
            }
            read_ref(&blobs[&t.file], t, &format!("{split}[{i}].{what}"))
        };
        let (vshape, voxels) = load(&r.voxels, "voxels")?;
        if vshape.len() != 1 {
            return Err(Error::Format(format!("{split}[{i}].voxels has rank {}", vshape.len())));
        }
        let target = match &r.target {
            Some(t) => {
                let (shape, values) = load(t, "target")?;
                if shape.len() != 2 {
                    return Err(Error::Format(format!("{split}[{i}].target has rank {}", shape.len())));
                }
                let grid =
                    Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Format(e.to_string()))?;
                Some(FeatureGrid::new(grid)?)
            }
            None => None,
        };
        out.push(BrainSample {
            subject_id: r.subject_id.clone(),
            stimulus_id: r.stimulus_id.clone(),
            voxels,
            target,
            boxes: Vec::new(),
            captions: Vec::new(),
        });
    }
    Ok(out)
}

/// Loads, checksums and validates the dataset behind a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest_path.display()),
        ))
    })?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(Error::Version {
            found,
            expected: DATASET_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(probe)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut blobs = BTreeMap::new();
    let mut train = read_split(dir, &manifest.train, "train", &mut blobs)?;
    let mut test = read_split(dir, &manifest.test, "test", &mut blobs)?;
    if let Some(ann) = &manifest.annotations {
        let ann: AnnotationFile = serde_json::from_str(&fs::read_to_string(dir.join(ann))?)?;
        ann.attach(&mut train);
        ann.attach(&mut test);
    }
    validate_dataset(&train, &manifest.subjects).into_result()?;
    validate_dataset(&test, &manifest.subjects).into_result()?;
    check_shared_test_split(&test)?;
    Ok(Dataset {
        specs: manifest.subjects,
        train,
        test,
    })
}

/// Every subject's test split must cover the same stimuli.
fn check_shared_test_split(test: &[BrainSample]) -> Result<()> {
    let mut per_subject: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in test {
        if let Some(stim) = &s.stimulus_id {
            per_subject.entry(&s.subject_id).or_default().insert(stim);
        }
    }
    let mut sets = per_subject.iter();
    if let Some((first_id, first)) = sets.next() {
        for (id, set) in sets {
            if set != first {
                return Err(Error::Format(format!(
                    "test stimuli of `{id}` differ from those of `{first_id}`"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: &str, dim: usize, stim: usize) -> BrainSample {
        let voxels = (0..dim).map(|i| (i * stim) as f32 * 0.01).collect();
        let target = FeatureGrid::new(Array2::from_elem((2, 3), stim as f32)).unwrap();
        BrainSample::new(subject, voxels)
            .with_stimulus(stim.to_string())
            .with_target(target)
    }

    fn nsd_like_subjects() -> Vec<SubjectSpec> {
        vec![
            SubjectSpec::new("S1", 15724),
            SubjectSpec::new("S2", 14278),
            SubjectSpec::new("S5", 13039),
            SubjectSpec::new("S7", 12682),
        ]
    }

    #[test]
    fn round_trip_equals_original() {
        let dir = tempfile::tempdir().unwrap();
        let specs = nsd_like_subjects();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for spec in &specs {
            train.push(sample(&spec.subject_id, spec.voxel_dim, 1));
            test.push(sample(&spec.subject_id, spec.voxel_dim, 2));
        }
        test[0].boxes.push(LabeledBox {
            label: "person".into(),
            bbox: BoundingBox::new(0.1, 0.1, 0.6, 0.9),
        });
        test[0].captions.push("A person standing.".into());
        // annotations are shared by stimulus, so every subject's copy gets them
        for t in test.iter_mut().skip(1) {
            t.boxes = test_boxes();
            t.captions = vec!["A person standing.".into()];
        }
        let ds = Dataset {
            specs: specs.clone(),
            train,
            test,
        };
        let path = save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(
            back.specs.iter().map(|s| s.voxel_dim).collect::<Vec<_>>(),
            vec![15724, 14278, 13039, 12682]
        );
    }

    fn test_boxes() -> Vec<LabeledBox> {
        vec![LabeledBox {
            label: "person".into(),
            bbox: BoundingBox::new(0.1, 0.1, 0.6, 0.9),
        }]
    }

    #[test]
    fn corrupted_checksum_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            specs: vec![SubjectSpec::new("a", 4)],
            train: vec![sample("a", 4, 1), sample("a", 4, 2)],
            test: vec![],
        };
        let path = save_dataset(dir.path(), &ds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut manifest: DatasetManifest = serde_json::from_str(&text).unwrap();
        manifest.train[1].voxels.fnv1a64 = "0000000000000000".into();
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn missing_blob_and_invalid_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            specs: vec![SubjectSpec::new("a", 4)],
            train: vec![sample("a", 5, 1)],
            test: vec![],
        };
        let path = save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(..))));
        fs::remove_file(dir.path().join("train_a.bin")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Io(_))));
        assert!(load_dataset(&dir.path().join("nope.json")).is_err());
    }

    #[test]
    fn test_split_must_be_shared() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            specs: vec![SubjectSpec::new("a", 4), SubjectSpec::new("b", 4)],
            train: vec![],
            test: vec![sample("a", 4, 1), sample("b", 4, 2)],
        };
        let path = save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn coco_style_aliases_are_accepted() {
        let text = r#"{"annotations": [{"image_id": "7", "category": "cat", "bbox": [0.1, 0.2, 0.3, 0.4]}],
                       "captions": [{"image_id": "7", "caption": "a cat"}]}"#;
        let ann: AnnotationFile = serde_json::from_str(text).unwrap();
        let mut s = vec![BrainSample::new("a", vec![0.0]).with_stimulus("7")];
        ann.attach(&mut s);
        assert_eq!(s[0].boxes[0].label, "cat");
        assert_eq!(s[0].captions, vec!["a cat".to_string()]);
    }
}
