//! Typing model: input construction, a small trainable encoder producing the
//! CLS-position hidden state, type scoring, and multi-label training.

mod encoder;
mod gradcheck;
mod input;
mod train;

pub use encoder::{
    EncoderCache, ModelConfig, ModelError, ModelParams, ParamGroup, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use input::{build_input, InputSequence};
pub use train::{train, TrainConfig, TrainError, TrainLog};

use crate::ontology::TypeId;

/// Anything that can embed a mention-and-context sequence into a fixed-size
/// vector. Lets a pretrained encoder stand in for the built-in one.
pub trait MentionEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, x: &InputSequence) -> Vec<f64>;
}

/// Probability floor used when evaluating the loss.
pub const PROB_EPSILON: f64 = 1e-7;

/// Decision threshold: a type is predicted when its probability is strictly
/// greater than this.
pub const THRESHOLD: f64 = 0.5;

/// Per-type scores: the dot product of the hidden vector with each column of
/// the type embedding matrix.
pub fn score_types(h: &[f64], params: &ModelParams) -> Vec<f64> {
    let t = params.type_matrix();
    let num_types = t.ncols();
    let mut scores = vec![0.0; num_types];
    for k in 0..num_types {
        scores[k] = h.iter().zip(t.column(k)).map(|(a, b)| a * b).sum();
    }
    scores
}

/// Element-wise sigmoid over the score vector.
pub fn to_probabilities(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| sigmoid(s)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Predicted type set under a strict greater-than threshold.
pub fn predict_types(probabilities: &[f64], threshold: f64) -> Vec<TypeId> {
    probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(k, _)| k as TypeId)
        .collect()
}

/// Sum of per-type binary cross-entropies, with probabilities clamped into
/// [PROB_EPSILON, 1 - PROB_EPSILON].
pub fn bce_loss(probabilities: &[f64], gold: &[f64]) -> Result<f64, ModelError> {
    if probabilities.len() != gold.len() {
        return Err(ModelError::ShapeMismatch {
            expected: gold.len(),
            found: probabilities.len(),
        });
    }
    let mut loss = 0.0;
    for (&p, &y) in probabilities.iter().zip(gold) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(loss)
}

/// Gradient of [`bce_loss`] with respect to the scores. Zero where the
/// probability sits in the clamped region, matching the evaluated loss.
pub fn bce_score_gradient(probabilities: &[f64], gold: &[f64]) -> Vec<f64> {
    probabilities
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            if p <= PROB_EPSILON || p >= 1.0 - PROB_EPSILON {
                0.0
            } else {
                p - y
            }
        })
        .collect()
}
