//! Dataset and checkpoint persistence, annotation ingestion and feature
//! export.

mod checkpoint;
mod dataset;
mod export;
mod tensor;

pub use checkpoint::{
    load_checkpoint, perceiver_hash, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_MANIFEST, CHECKPOINT_VERSION,
};
pub use dataset::{
    load_dataset, save_dataset, AnnotationFile, BoxRecord, CaptionRecord, Dataset, DatasetManifest, SampleRecord,
    DATASET_MANIFEST, DATASET_VERSION,
};
pub use export::{export_features, import_features, sidecar_path, ExportHeader};
pub use tensor::{config_hash, decode_tensor, encode_tensor, fnv1a64, write_locked, TensorRef};
