//! Evaluation metrics: retrieval, grounding and captioning.

mod caption;
mod grounding;
mod retrieval;
mod scorer;

pub use caption::{bleu_k, caption_report, rouge_l, tokenize, CaptionReport, MetricValue, NATIVE_METRICS, ROUGE_BETA};
pub use grounding::{
    grounding_accuracy, iou, salience_category, Category, CategoryScore, GroundingReport, SalienceTaxonomy,
    DEFAULT_THRESHOLDS,
};
pub use retrieval::{
    cosine_similarity, draw_distractors, flatten_grids, retrieval_backward, retrieval_exemplar, retrieval_forward,
    retrieval_report, RetrievalReport, DEFAULT_POOL, DEFAULT_TRIALS,
};
pub use scorer::{decode_scores, encode_pairs, ExternalScorer, ScorerRegistry};

use ndarray::Array2;

use crate::domain::BrainSample;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};

/// Encodes samples and returns `(brain, target)` embedding matrices, one
/// flattened grid per row.
pub fn retrieval_embeddings(state: &EncoderState<f32>, samples: &[BrainSample]) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut targets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        targets.push(
            s.target
                .clone()
                .ok_or_else(|| Error::Dataset(i, "sample has no target".into()))?,
        );
    }
    let mut grids = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let items: Vec<(&str, &[f32])> = chunk
            .iter()
            .map(|s| (s.subject_id.as_str(), s.voxels.as_slice()))
            .collect();
        grids.extend(state.forward_batch(&items)?);
    }
    Ok((flatten_grids(&grids)?, flatten_grids(&targets)?))
}
