//! Multi-subject brain-signal encoder aligned to a fixed target feature
//! space.
//!
//! Per-subject tokenizers map voxel vectors of any length to a fixed token
//! sequence; a shared perceiver turns those tokens into a feature grid. The
//! crate also provides cross-subject batch composition, alignment training,
//! new-subject adaptation, evaluation metrics, a synthetic world with known
//! ground truth, on-disk formats and prompt plumbing for a downstream
//! language model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Test oracles index explicitly and spell out hand counts as products.
#![cfg_attr(
    test,
    allow(
        clippy::needless_range_loop,
        clippy::identity_op,
        clippy::field_reassign_with_default
    )
)]

pub mod datahub;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mllm_bridge;
pub mod rng;
pub mod sampler;
pub mod synthworld;
pub mod trainer;

pub use domain::{
    average_repetitions, validate_dataset, BoundingBox, BrainSample, EncoderConfig, FeatureGrid, LabeledBox, LossKind,
    Schedule, SubjectSpec, TrainConfig, ValidationReport,
};
pub use encoder::{count_parameters, init_encoder, EncoderState};
pub use error::{Error, Result};
pub use rng::{new_rng, RngHandle};
pub use sampler::{compose_batch, BatchPlan, SamplingStrategy};
pub use trainer::{adapt_subject, train_align, AdaptationConfig, AdaptationMode, TrainLog};
