//! Central finite-difference verification of the analytic gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::ModelParams;
use super::input::InputSequence;
use super::train::loss_and_grads;
use super::{bce_loss, score_types, to_probabilities};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Loss plus a signature of every nonsmooth decision the forward pass made:
/// ReLU pre-activation signs and probability clamping. Central differences
/// are only valid when both perturbed evaluations share the signature.
fn loss_and_signature(
    params: &ModelParams,
    x: &InputSequence,
    gold: &[f64],
) -> (f64, Vec<bool>) {
    let (h, cache) = params.forward(x);
    let probs = to_probabilities(&score_types(&h, params));
    let mut signature = cache.relu_signature();
    for &p in &probs {
        signature.push(p <= super::PROB_EPSILON);
        signature.push(p >= 1.0 - super::PROB_EPSILON);
    }
    let loss = bce_loss(&probs, gold).expect("gold sized to the type count");
    (loss, signature)
}

/// Compares the analytic gradient to (L(θ+ε) − L(θ−ε)) / 2ε at sampled
/// coordinates. At least one coordinate is drawn from every parameter
/// tensor, so both optimizer groups are always covered; random extra
/// coordinates fill up to `samples`. A coordinate whose ±ε perturbation
/// flips a ReLU unit or a probability clamp sits on a kink where the
/// difference quotient does not estimate the one-sided derivative, so such
/// coordinates are resampled. Relative error is guarded below by an
/// absolute scale so finite-difference noise on near-zero gradients does
/// not register as disagreement.
pub fn grad_check(
    params: &ModelParams,
    x: &InputSequence,
    gold: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut analytic = vec![0.0; params.num_params()];
    loss_and_grads(params, x, gold, &mut analytic);

    let mut work = params.clone();
    let probe = |i: usize, work: &mut ModelParams| -> Option<f64> {
        let original = work.flat()[i];
        work.flat_mut()[i] = original + epsilon;
        let (plus, sig_plus) = loss_and_signature(work, x, gold);
        work.flat_mut()[i] = original - epsilon;
        let (minus, sig_minus) = loss_and_signature(work, x, gold);
        work.flat_mut()[i] = original;
        if sig_plus != sig_minus {
            return None;
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        Some((a - fd).abs() / (a.abs() + fd.abs()).max(1e-2))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error = 0.0f64;
    let mut checked: Vec<usize> = Vec::new();
    for (_, range, _) in params.entry_ranges() {
        let span = range.end - range.start;
        for _ in 0..64 {
            let pick = range.start + if span > 1 { rng.gen_range(0..span) } else { 0 };
            if checked.contains(&pick) {
                continue;
            }
            if let Some(rel) = probe(pick, &mut work) {
                max_rel_error = max_rel_error.max(rel);
                checked.push(pick);
                break;
            }
        }
    }
    let mut all: Vec<usize> = (0..params.num_params()).collect();
    all.shuffle(&mut rng);
    for i in all {
        if checked.len() >= samples.max(checked.len()) {
            break;
        }
        if checked.contains(&i) {
            continue;
        }
        if let Some(rel) = probe(i, &mut work) {
            max_rel_error = max_rel_error.max(rel);
            checked.push(i);
        }
    }
    GradCheckReport {
        max_rel_error,
        coords_checked: checked.len(),
    }
}
