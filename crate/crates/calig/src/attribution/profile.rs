//! Layer-wise sensitivity probe: how relevance mass, classifier alignment,
//! and attention focus on the cls token evolve with depth.

use super::{baseline_trace, layer_ig, token_relevance, AttributionConfig};
use crate::encoder::{EncoderModel, ForwardTrace};
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerProfileRecord {
    /// 1-based layer index; `num_layers + 1` is the final encoder output.
    pub layer: usize,
    /// L1 norm of the token relevance vector at this layer.
    pub relevance_norm: f64,
    /// Target-class logit contribution `(h_t W_c + b_c)[c]` per token.
    pub classifier_contribution: Vec<f64>,
    /// The contribution at the cls position (what the head actually reads at
    /// the final layer).
    pub cls_contribution: f64,
    /// Mean over heads and query positions of attention onto the cls column;
    /// absent for the final output, which has no attention of its own.
    pub mean_cls_attention: Option<f64>,
}

/// Profile every layer boundary (block inputs 1..=L plus the final output).
pub fn layer_sensitivity_profile(
    model: &EncoderModel,
    token_ids: &[usize],
    config: &AttributionConfig,
) -> Result<Vec<LayerProfileRecord>> {
    config.validate(model)?;
    let trace = model.forward(token_ids)?;
    layer_sensitivity_profile_trace(model, &trace, config)
}

pub fn layer_sensitivity_profile_trace(
    model: &EncoderModel,
    trace: &ForwardTrace,
    config: &AttributionConfig,
) -> Result<Vec<LayerProfileRecord>> {
    let num_layers = model.config.num_layers;
    let mask = model.attention_mask(&trace.token_ids);
    let baseline = baseline_trace(model, trace.seq_len(), mask.as_ref())?;
    let c = config.target_class;

    let mut records = Vec::with_capacity(num_layers + 1);
    for layer in 1..=num_layers + 1 {
        let ig = layer_ig(model, trace, &baseline, layer, c, config.steps)?;
        let relevance = token_relevance(&ig);
        let relevance_norm: f64 = relevance.iter().map(|v| v.abs()).sum();

        let hidden = trace.hidden(layer);
        let d = model.config.hidden_dim;
        let num_classes = model.config.num_classes;
        let classifier_contribution: Vec<f64> = hidden
            .values
            .chunks(d)
            .map(|h| {
                let mut v = model.classifier_b.values[c];
                for (j, &hj) in h.iter().enumerate() {
                    v += hj * model.classifier_w.values[j * num_classes + c];
                }
                v
            })
            .collect();
        let cls_contribution = classifier_contribution[0];

        let mean_cls_attention = if layer <= num_layers {
            let attn = &trace.attentions[layer - 1];
            let (heads, s) = (attn.shape[0], attn.shape[1]);
            let mut sum = 0.0;
            for h in 0..heads {
                for q in 0..s {
                    sum += attn.at3(h, q, 0);
                }
            }
            Some(sum / (heads * s) as f64)
        } else {
            None
        };

        records.push(LayerProfileRecord {
            layer,
            relevance_norm,
            classifier_contribution,
            cls_contribution,
            mean_cls_attention,
        });
    }
    Ok(records)
}
