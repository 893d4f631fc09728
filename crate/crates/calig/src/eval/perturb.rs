//! Insertion/deletion faithfulness curves.
//!
//! Tokens are ranked by attribution score and progressively replaced with
//! the pad token (deletion) or restored from a fully padded sequence
//! (insertion), 5% of the maskable tokens per step over 20 steps, recording
//! the model's confidence in the target class at each of the 21 points.
//! The cls position is never perturbed.

use crate::encoder::{softmax_probs, EncoderModel};
use crate::error::{CaligError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Insertion,
    Deletion,
}

pub const PERTURB_STEPS: usize = 20;

/// The 21-point confidence curve for one example.
pub fn perturbation_curve(
    model: &EncoderModel,
    token_ids: &[usize],
    scores: &[f64],
    mode: PerturbMode,
    target_class: usize,
) -> Result<Vec<f64>> {
    if scores.len() != token_ids.len() {
        return Err(CaligError::Contract(format!(
            "scores length {} != sequence length {}",
            scores.len(),
            token_ids.len()
        )));
    }
    let pad = model.config.pad_token_id;
    let cls = model.config.cls_token_id;

    // Maskable positions, ranked by score descending, ties to earlier position.
    let mut ranked: Vec<usize> = (0..token_ids.len())
        .filter(|&i| token_ids[i] != cls && token_ids[i] != pad)
        .collect();
    ranked.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let n = ranked.len();
    let per_step = (0.05 * n as f64).ceil() as usize;

    let mut curve = Vec::with_capacity(PERTURB_STEPS + 1);
    for step in 0..=PERTURB_STEPS {
        let count = if step == PERTURB_STEPS { n } else { (step * per_step).min(n) };
        let mut ids = token_ids.to_vec();
        match mode {
            PerturbMode::Deletion => {
                for &pos in &ranked[..count] {
                    ids[pos] = pad;
                }
            }
            PerturbMode::Insertion => {
                for &pos in &ranked[count..] {
                    ids[pos] = pad;
                }
            }
        }
        let trace = model.forward(&ids)?;
        curve.push(softmax_probs(&trace.logits.values)[target_class]);
    }
    Ok(curve)
}

/// Trapezoidal area under the confidence curve over the [0, 1] fraction axis.
pub fn perturbation_auc(
    model: &EncoderModel,
    token_ids: &[usize],
    scores: &[f64],
    mode: PerturbMode,
    target_class: usize,
) -> Result<f64> {
    let curve = perturbation_curve(model, token_ids, scores, mode, target_class)?;
    Ok(curve_auc(&curve))
}

pub fn curve_auc(curve: &[f64]) -> f64 {
    let n = curve.len();
    debug_assert!(n >= 2);
    let inner: f64 = curve[1..n - 1].iter().sum();
    (0.5 * curve[0] + inner + 0.5 * curve[n - 1]) / (n - 1) as f64
}
