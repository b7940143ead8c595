//! Multi-label training: AdamW with separate learning rates for the encoder
//! parameters and the type embedding matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::encoder::{ModelParams, ParamGroup};
use super::input::{build_input, InputSequence};
use super::{bce_loss, bce_score_gradient, score_types, to_probabilities};
use crate::corpus::Example;
use crate::tokenizer::SubwordVocab;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty after input construction")]
    EmptyDataset,
    #[error("gold type id {0} outside the {1}-type ontology")]
    GoldOutOfRange(u32, usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_type_matrix: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_encoder: 2e-5,
            lr_type_matrix: 1e-3,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean per-example loss for each epoch.
    pub epoch_losses: Vec<f64>,
    /// Examples dropped because the mention alone exceeded the length cap.
    pub oversize_skipped: usize,
}

/// Loss and full parameter gradient for one example. The gradient buffer is
/// accumulated into, not overwritten.
pub(crate) fn loss_and_grads(
    params: &ModelParams,
    x: &InputSequence,
    gold: &[f64],
    grads: &mut [f64],
) -> f64 {
    let (h, cache) = params.forward(x);
    let scores = score_types(&h, params);
    let probs = to_probabilities(&scores);
    let loss = bce_loss(&probs, gold).expect("gold sized to the type count");
    let d_scores = bce_score_gradient(&probs, gold);

    let dim = params.config().dim;
    let num_types = params.config().num_types;
    let t_range = params.type_matrix_range();
    let t_mat = params.type_matrix();
    let mut d_h = vec![0.0; dim];
    for k in 0..num_types {
        let g = d_scores[k];
        if g == 0.0 {
            continue;
        }
        for j in 0..dim {
            grads[t_range.start + j * num_types + k] += g * h[j];
            d_h[j] += g * t_mat[[j, k]];
        }
    }
    params.backward(x, &cache, &d_h, grads);
    loss
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ranges = params.entry_ranges();
        let flat = params.flat_mut();
        for (_, range, group) in ranges {
            let lr = match group {
                ParamGroup::Encoder => cfg.lr_encoder,
                ParamGroup::TypeMatrix => cfg.lr_type_matrix,
            };
            for i in range {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                // Decoupled weight decay.
                flat[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + cfg.weight_decay * flat[i]);
            }
        }
    }
}

/// Trains in place over shuffled mini-batches. Deterministic given the seed:
/// single-threaded, fixed iteration and reduction order.
pub fn train(
    examples: &[Example],
    params: &mut ModelParams,
    vocab: &SubwordVocab,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let num_types = params.config().num_types;
    let cap = params.config().cap;
    let mut inputs: Vec<(InputSequence, Vec<f64>)> = Vec::with_capacity(examples.len());
    let mut log = TrainLog::default();
    for ex in examples {
        let x = match build_input(&ex.mention, &ex.context, vocab, cap) {
            Ok(x) => x,
            Err(_) => {
                log.oversize_skipped += 1;
                continue;
            }
        };
        let mut gold = vec![0.0; num_types];
        for &id in &ex.gold {
            if id as usize >= num_types {
                return Err(TrainError::GoldOutOfRange(id, num_types));
            }
            gold[id as usize] = 1.0;
        }
        inputs.push((x, gold));
    }
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut optimizer = AdamW::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = vec![0.0; params.num_params()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            grads.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x, gold) = &inputs[i];
                batch_loss += loss_and_grads(params, x, gold, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            optimizer.update(params, &grads, cfg);
            epoch_loss += batch_loss;
        }
        log.epoch_losses.push(epoch_loss / inputs.len() as f64);
        if !params.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
    }
    Ok(log)
}
