//! Comparison explainers: integrated gradients at the input layer,
//! input-times-gradient, attention rollout, and last-layer attention.

use super::{baseline_trace, layer_ig, rollout, token_relevance};
use crate::encoder::{EncoderModel, ForwardTrace};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Integrated gradients at the input embeddings, summed per token.
pub fn ig_final(
    model: &EncoderModel,
    trace: &ForwardTrace,
    target_class: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let mask = model.attention_mask(&trace.token_ids);
    let baseline = baseline_trace(model, trace.seq_len(), mask.as_ref())?;
    let ig = layer_ig(model, trace, &baseline, 1, target_class, steps)?;
    Ok(token_relevance(&ig))
}

/// `sum_j (x ⊙ dy_c/dx)_{t,j}` at the input embeddings.
pub fn input_x_gradient(
    model: &EncoderModel,
    token_ids: &[usize],
    target_class: usize,
) -> Result<Vec<f64>> {
    let mask = model.attention_mask(token_ids);
    let mut tape = Tape::new();
    let rec = model.record_forward(&mut tape, token_ids, mask.as_ref())?;
    let y = tape.pick(rec.logits, target_class)?;
    tape.backward(y)?;
    let x = tape.tensor(rec.embedded).clone();
    let d = x.shape[1];
    let grad = tape
        .grad(rec.embedded)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok(x
        .values
        .chunks(d)
        .zip(grad.chunks(d))
        .map(|(xs, gs)| xs.iter().zip(gs).map(|(a, b)| a * b).sum())
        .collect())
}

/// Attention-only rollout: cls row of the product of row-normalized,
/// identity-augmented head means. No gradients involved.
pub fn attention_rollout(trace: &ForwardTrace) -> Result<Vec<f64>> {
    let factors: Vec<Tensor> = trace.attentions.iter().map(mean_heads_plus_identity).collect();
    let c = rollout(&factors, (1, factors.len()))?;
    let s = trace.seq_len();
    Ok(c.values[..s].to_vec())
}

/// Cls row of the head-mean of the final block's attention.
pub fn attention_last(trace: &ForwardTrace) -> Vec<f64> {
    let attn = trace.attentions.last().expect("encoder has at least one block");
    let (heads, s) = (attn.shape[0], attn.shape[1]);
    let mut row = vec![0.0; s];
    for h in 0..heads {
        for (k, r) in row.iter_mut().enumerate() {
            *r += attn.at3(h, 0, k) / heads as f64;
        }
    }
    row
}

fn mean_heads_plus_identity(attn: &Tensor) -> Tensor {
    let (heads, s) = (attn.shape[0], attn.shape[1]);
    let mut m = vec![0.0; s * s];
    for h in 0..heads {
        for j in 0..s {
            for k in 0..s {
                m[j * s + k] += attn.at3(h, j, k) / heads as f64;
            }
        }
    }
    for j in 0..s {
        m[j * s + j] += 1.0;
    }
    for j in 0..s {
        let row = &mut m[j * s..(j + 1) * s];
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Tensor::new(vec![s, s], m)
}
