//! The CA-LIG attribution pipeline.
//!
//! Four stages: layer-wise integrated gradients over interpolated hidden
//! states, class-specific attention gradients, relevance-gated fusion of the
//! two signals per block, and a rollout product that composes the fused
//! matrices into a signed token-to-token influence map, split into its
//! supportive and opposing parts.

pub mod baselines;
pub mod profile;

use crate::encoder::{AttentionMask, EncoderModel, ForwardTrace};
use crate::error::{CaligError, Result};
use crate::tensor::{Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the per-token relevance vector is normalized before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Map to [-1, 1] via `2 (r - min) / (max - min) - 1`; a constant vector
    /// maps to all zeros.
    SymmetricMinMax,
    /// Divide by the L1 norm; an all-zero vector stays zero.
    L1,
}

/// Which layer's relevance gates each block's attention gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevancePairing {
    /// Block `b` is gated by the relevance of its own input layer `b`.
    PerBlock,
    /// Every block is gated by the relevance of one fixed layer.
    Fixed(usize),
}

/// How per-head maps are pooled into one `[s, s]` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    Mean,
}

/// Axis along which the relevance vector is broadcast into the `[s, s]`
/// attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAxis {
    /// Scale column `k`: the edge "query j attends to key k" is gated by the
    /// relevance of the attended-to token `k`.
    Key,
    /// Ablation: scale row `j` by the relevance of the querying token.
    Query,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub target_class: usize,
    /// Interpolation steps `m` of the Riemann sum.
    pub steps: usize,
    /// Fusion coefficient between gated attention gradients and bare
    /// relevance, in [0, 1].
    pub lambda: f64,
    pub normalization: Normalization,
    pub pairing: RelevancePairing,
    pub gate_axis: GateAxis,
    pub head_pool: HeadPool,
    /// Inclusive 1-based block interval for the rollout product; `None`
    /// means all blocks.
    pub rollout_range: Option<(usize, usize)>,
    /// Row of the rollout map reported as token scores; `None` means the
    /// cls position.
    pub score_row: Option<usize>,
}

impl AttributionConfig {
    pub fn new(target_class: usize) -> Self {
        AttributionConfig {
            target_class,
            steps: 50,
            lambda: 1.0,
            normalization: Normalization::SymmetricMinMax,
            pairing: RelevancePairing::PerBlock,
            gate_axis: GateAxis::Key,
            head_pool: HeadPool::Mean,
            rollout_range: None,
            score_row: None,
        }
    }

    pub fn validate(&self, model: &EncoderModel) -> Result<()> {
        if self.steps == 0 {
            return Err(CaligError::Config("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CaligError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.target_class >= model.config.num_classes {
            return Err(CaligError::Config(format!(
                "target class {} out of range ({} classes)",
                self.target_class, model.config.num_classes
            )));
        }
        let layers = model.config.num_layers;
        if let Some((a, b)) = self.rollout_range {
            if a == 0 || b > layers || a > b {
                return Err(CaligError::Config(format!(
                    "rollout range ({a}, {b}) outside [1, {layers}]"
                )));
            }
        }
        if let RelevancePairing::Fixed(l) = self.pairing {
            if l == 0 || l > layers + 1 {
                return Err(CaligError::Config(format!(
                    "fixed relevance layer {l} outside [1, {}]",
                    layers + 1
                )));
            }
        }
        Ok(())
    }

    fn resolved_range(&self, num_layers: usize) -> (usize, usize) {
        self.rollout_range.unwrap_or((1, num_layers))
    }
}

/// Per-layer signed token relevance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRelevance {
    pub layer: usize,
    pub relevance: Vec<f64>,
}

/// Final output of the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    pub token_ids: Vec<usize>,
    pub layer_relevance: Vec<LayerRelevance>,
    /// Fused, identity-augmented, row-normalized matrices, one per block.
    /// Omitted from serialized documents unless explicitly requested.
    #[serde(default)]
    pub fused: Vec<Tensor>,
    /// Rollout map C over the configured block range.
    pub rollout: Tensor,
    /// Elementwise nonnegative part of C.
    pub positive: Tensor,
    /// Elementwise nonpositive part of C.
    pub negative: Tensor,
    /// The score row of C (cls row unless overridden).
    pub token_scores: Vec<f64>,
    /// True where the token is cls or pad; scores at these positions are
    /// reported but flagged.
    pub special_mask: Vec<bool>,
    pub config: AttributionConfig,
    pub model_fingerprint: String,
}

impl AttributionResult {
    /// Serialize as a structured document. `include_fused` controls whether
    /// the per-block matrices are embedded (they dominate the size).
    pub fn to_document(&self, include_fused: bool) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if !include_fused {
            value.as_object_mut().unwrap().remove("fused");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Baseline run: the network driven by an all-zero embedding matrix, giving
/// each layer its neutral reference state.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub hidden_states: Vec<Tensor>,
    pub logits: Tensor,
}

/// Run the model on a zero embedding matrix of the given sequence length,
/// under the same attention mask as the real input.
pub fn baseline_trace(
    model: &EncoderModel,
    seq_len: usize,
    mask: Option<&AttentionMask>,
) -> Result<BaselineTrace> {
    let zeros = Tensor::zeros(vec![seq_len, model.config.hidden_dim]);
    let mut tape = Tape::new();
    let run = model.record_suffix(&mut tape, 1, zeros, mask)?;
    Ok(BaselineTrace {
        hidden_states: run.hidden_states.iter().map(|&id| tape.tensor(id).clone()).collect(),
        logits: tape.tensor(run.logits).clone(),
    })
}

impl BaselineTrace {
    /// Baseline input to block `layer` (1-based), mirroring
    /// [`ForwardTrace::hidden`].
    pub fn hidden(&self, layer: usize) -> &Tensor {
        &self.hidden_states[layer - 1]
    }
}

/// States along the straight path from `base` to `x`: the k-th element is
/// `base + (k/m) (x - base)` for k = 1..=m, so the last equals `x` exactly.
pub fn interpolate_hidden(x: &Tensor, base: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    if x.shape != base.shape {
        return Err(CaligError::Shape {
            op: "interpolate_hidden",
            lhs: x.shape.clone(),
            rhs: base.shape.clone(),
        });
    }
    if m == 0 {
        return Err(CaligError::Contract("interpolation needs m >= 1".into()));
    }
    let mut out = Vec::with_capacity(m);
    for k in 1..=m {
        if k == m {
            out.push(x.clone());
            continue;
        }
        let alpha = k as f64 / m as f64;
        let values = base
            .values
            .iter()
            .zip(&x.values)
            .map(|(&b, &v)| b + alpha * (v - b))
            .collect();
        out.push(Tensor::new(x.shape.clone(), values));
    }
    Ok(out)
}

/// Integrated gradients of the target logit with respect to the input of
/// block `layer` (1-based; `num_layers + 1` attributes the final encoder
/// output through the classifier alone).
///
/// Returns `(x - x') ⊙ mean_k grad y_c(x(α_k))`, shape `[s, d]`. The per-step
/// gradients may be evaluated in parallel; the mean is reduced in step order
/// so results are schedule-independent.
pub fn layer_ig(
    model: &EncoderModel,
    trace: &ForwardTrace,
    baseline: &BaselineTrace,
    layer: usize,
    target_class: usize,
    steps: usize,
) -> Result<Tensor> {
    let x = trace.hidden(layer);
    let x_base = baseline.hidden(layer);
    let mask = model.attention_mask(&trace.token_ids);
    let states = interpolate_hidden(x, x_base, steps)?;

    let grads: Vec<Result<Vec<f64>>> = states
        .into_par_iter()
        .map(|state| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let run = model.record_suffix(&mut tape, layer, state, mask.as_ref())?;
            let y = tape.pick(run.logits, target_class)?;
            tape.backward(y)?;
            Ok(tape
                .grad(run.hidden)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; x.numel()]))
        })
        .collect();

    let mut mean = vec![0.0; x.numel()];
    for g in grads {
        let g = g?;
        for (m, v) in mean.iter_mut().zip(&g) {
            *m += v;
        }
    }
    let inv = 1.0 / steps as f64;
    let values: Vec<f64> = mean
        .iter()
        .zip(&x.values)
        .zip(&x_base.values)
        .map(|((&g, &xv), &bv)| (xv - bv) * g * inv)
        .collect();
    Ok(Tensor::new(x.shape.clone(), values))
}

/// Sum the attribution of each token over the hidden dimension, keeping sign.
pub fn token_relevance(ig: &Tensor) -> Vec<f64> {
    assert_eq!(ig.shape.len(), 2, "token_relevance expects [s, d]");
    let d = ig.shape[1];
    ig.values.chunks(d).map(|row| row.iter().sum()).collect()
}

/// Normalize a relevance vector. Degenerate inputs (constant vector for
/// min-max, all-zero for L1) map to all zeros.
pub fn normalize_relevance(r: &[f64], scheme: Normalization) -> Vec<f64> {
    match scheme {
        Normalization::SymmetricMinMax => {
            let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == min {
                return vec![0.0; r.len()];
            }
            r.iter().map(|&v| 2.0 * (v - min) / (max - min) - 1.0).collect()
        }
        Normalization::L1 => {
            let norm: f64 = r.iter().map(|v| v.abs()).sum();
            if norm == 0.0 {
                return vec![0.0; r.len()];
            }
            r.iter().map(|&v| v / norm).collect()
        }
    }
}

/// Gradient of the target logit with respect to every post-softmax attention
/// matrix, obtained from one recorded forward and a single backward pass.
pub fn attention_gradients(
    model: &EncoderModel,
    token_ids: &[usize],
    target_class: usize,
) -> Result<Vec<Tensor>> {
    if target_class >= model.config.num_classes {
        return Err(CaligError::Config(format!(
            "target class {target_class} out of range"
        )));
    }
    let mask = model.attention_mask(token_ids);
    let mut tape = Tape::new();
    let rec = model.record_forward(&mut tape, token_ids, mask.as_ref())?;
    let y = tape.pick(rec.logits, target_class)?;
    tape.backward(y)?;
    Ok(rec
        .attentions
        .iter()
        .map(|&id| {
            let shape = tape.shape(id).to_vec();
            let n: usize = shape.iter().product();
            let values = tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            Tensor::new(shape, values)
        })
        .collect())
}

/// Fuse one block's attention gradients with a normalized relevance vector:
/// convex combination under `lambda`, mean over heads, identity added for the
/// residual path, then signed L1 row normalization. Rows with zero norm fall
/// back to the bare identity row, so every returned row has L1 norm exactly 1.
pub fn fuse_block(
    grad_a: &Tensor,
    r_norm: &[f64],
    lambda: f64,
    gate_axis: GateAxis,
) -> Result<Tensor> {
    fuse_block_pooled(grad_a, r_norm, lambda, gate_axis, HeadPool::Mean)
}

/// [`fuse_block`] with an explicit head-pooling choice.
pub fn fuse_block_pooled(
    grad_a: &Tensor,
    r_norm: &[f64],
    lambda: f64,
    gate_axis: GateAxis,
    head_pool: HeadPool,
) -> Result<Tensor> {
    if grad_a.shape.len() != 3 || grad_a.shape[1] != grad_a.shape[2] {
        return Err(CaligError::Shape {
            op: "fuse_block",
            lhs: grad_a.shape.clone(),
            rhs: vec![r_norm.len()],
        });
    }
    let (heads, s) = (grad_a.shape[0], grad_a.shape[1]);
    if r_norm.len() != s {
        return Err(CaligError::Shape {
            op: "fuse_block",
            lhs: grad_a.shape.clone(),
            rhs: vec![r_norm.len()],
        });
    }
    let mut fused = vec![0.0; s * s];
    let HeadPool::Mean = head_pool;
    let inv_h = 1.0 / heads as f64;
    for h in 0..heads {
        for j in 0..s {
            for k in 0..s {
                let r = match gate_axis {
                    GateAxis::Key => r_norm[k],
                    GateAxis::Query => r_norm[j],
                };
                let g = grad_a.at3(h, j, k);
                fused[j * s + k] += inv_h * (lambda * g * r + (1.0 - lambda) * r);
            }
        }
    }
    for j in 0..s {
        fused[j * s + j] += 1.0;
    }
    for j in 0..s {
        let row = &mut fused[j * s..(j + 1) * s];
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k == j { 1.0 } else { 0.0 };
            }
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(Tensor::new(vec![s, s], fused))
}

/// Left-to-right product of the fused matrices over an inclusive 1-based
/// block range.
pub fn rollout(fused: &[Tensor], range: (usize, usize)) -> Result<Tensor> {
    let (start, end) = range;
    if start == 0 || end > fused.len() || start > end {
        return Err(CaligError::Contract(format!(
            "rollout range ({start}, {end}) invalid for {} blocks",
            fused.len()
        )));
    }
    let s = fused[start - 1].shape[0];
    let mut acc = fused[start - 1].values.clone();
    for factor in &fused[start..end] {
        let next = &factor.values;
        let mut out = vec![0.0; s * s];
        for i in 0..s {
            for p in 0..s {
                let a = acc[i * s + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..s {
                    out[i * s + j] += a * next[p * s + j];
                }
            }
        }
        acc = out;
    }
    Ok(Tensor::new(vec![s, s], acc))
}

/// Split a signed map into its supportive (`max(0, C)`) and opposing
/// (`min(0, C)`) parts; the two reconstruct `C` exactly.
pub fn decompose_signed(c: &Tensor) -> (Tensor, Tensor) {
    let pos: Vec<f64> = c.values.iter().map(|&v| v.max(0.0)).collect();
    let neg: Vec<f64> = c.values.iter().map(|&v| v.min(0.0)).collect();
    (Tensor::new(c.shape.clone(), pos), Tensor::new(c.shape.clone(), neg))
}

/// Run the full pipeline on one input.
pub fn explain(
    model: &EncoderModel,
    token_ids: &[usize],
    config: &AttributionConfig,
) -> Result<AttributionResult> {
    config.validate(model)?;
    let trace = model.forward(token_ids)?;
    explain_trace(model, &trace, config)
}

/// Same as [`explain`] but reusing an existing forward trace.
pub fn explain_trace(
    model: &EncoderModel,
    trace: &ForwardTrace,
    config: &AttributionConfig,
) -> Result<AttributionResult> {
    config.validate(model)?;
    let num_layers = model.config.num_layers;
    let s = trace.seq_len();
    let mask = model.attention_mask(&trace.token_ids);
    let baseline = baseline_trace(model, s, mask.as_ref())?;

    let needed_layers: Vec<usize> = match config.pairing {
        RelevancePairing::PerBlock => (1..=num_layers).collect(),
        RelevancePairing::Fixed(l) => vec![l],
    };
    let layer_relevance: Vec<LayerRelevance> = needed_layers
        .iter()
        .map(|&layer| -> Result<LayerRelevance> {
            let ig = layer_ig(model, trace, &baseline, layer, config.target_class, config.steps)?;
            Ok(LayerRelevance { layer, relevance: token_relevance(&ig) })
        })
        .collect::<Result<_>>()?;

    let grads = attention_gradients(model, &trace.token_ids, config.target_class)?;

    let relevance_for = |block: usize| -> &[f64] {
        match config.pairing {
            RelevancePairing::PerBlock => &layer_relevance[block - 1].relevance,
            RelevancePairing::Fixed(_) => &layer_relevance[0].relevance,
        }
    };
    let mut fused = Vec::with_capacity(num_layers);
    for (b, grad) in grads.iter().enumerate() {
        let r_norm = normalize_relevance(relevance_for(b + 1), config.normalization);
        fused.push(fuse_block_pooled(
            grad,
            &r_norm,
            config.lambda,
            config.gate_axis,
            config.head_pool,
        )?);
    }

    let range = config.resolved_range(num_layers);
    let c = rollout(&fused, range)?;
    let (positive, negative) = decompose_signed(&c);
    let row = config.score_row.unwrap_or(0);
    if row >= s {
        return Err(CaligError::Config(format!("score row {row} out of range for s={s}")));
    }
    let token_scores = c.values[row * s..(row + 1) * s].to_vec();
    let special_mask = trace
        .token_ids
        .iter()
        .map(|&t| t == model.config.cls_token_id || t == model.config.pad_token_id)
        .collect();

    Ok(AttributionResult {
        token_ids: trace.token_ids.clone(),
        layer_relevance,
        fused,
        rollout: c,
        positive,
        negative,
        token_scores,
        special_mask,
        config: config.clone(),
        model_fingerprint: model.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_arithmetic() {
        let x = Tensor::new(vec![1, 1], vec![2.0]);
        let base = Tensor::zeros(vec![1, 1]);
        let states = interpolate_hidden(&x, &base, 4).unwrap();
        let vals: Vec<f64> = states.iter().map(|t| t.values[0]).collect();
        assert_eq!(vals, vec![0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn interpolation_zero_path_and_m1() {
        let x = Tensor::new(vec![2], vec![0.3, -0.7]);
        let states = interpolate_hidden(&x, &x, 3).unwrap();
        for st in &states {
            assert_eq!(st.values, x.values);
        }
        let base = Tensor::zeros(vec![2]);
        let states = interpolate_hidden(&x, &base, 1).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].values, x.values);
    }

    #[test]
    fn interpolation_last_is_exactly_x() {
        let x = Tensor::new(vec![2], vec![0.1, -0.3]);
        let base = Tensor::new(vec![2], vec![0.3, 0.25]);
        let states = interpolate_hidden(&x, &base, 7).unwrap();
        assert_eq!(states.last().unwrap().values, x.values);
    }

    #[test]
    fn token_relevance_sums_rows() {
        let ig = Tensor::new(vec![2, 3], vec![1.0; 6]);
        assert_eq!(token_relevance(&ig), vec![3.0, 3.0]);
        let zero = Tensor::zeros(vec![4, 2]);
        assert_eq!(token_relevance(&zero), vec![0.0; 4]);
        let ig = Tensor::new(vec![2, 2], vec![0.5, -1.5, 2.0, 0.25]);
        let r = token_relevance(&ig);
        let total: f64 = r.iter().sum();
        let direct: f64 = ig.values.iter().sum();
        assert_eq!(total, direct);
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(
            normalize_relevance(&[-2.0, 0.0, 2.0], Normalization::SymmetricMinMax),
            vec![-1.0, 0.0, 1.0]
        );
        assert_eq!(
            normalize_relevance(&[5.0, 5.0, 5.0], Normalization::SymmetricMinMax),
            vec![0.0, 0.0, 0.0]
        );
        assert_eq!(
            normalize_relevance(&[5.0, 5.0, 5.0], Normalization::L1),
            // constant but nonzero: L1 normalization keeps proportions
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        );
        assert_eq!(
            normalize_relevance(&[0.0, 0.0], Normalization::L1),
            vec![0.0, 0.0]
        );
        assert_eq!(
            normalize_relevance(&[1.0, -3.0], Normalization::L1),
            vec![0.25, -0.75]
        );
    }

    #[test]
    fn fuse_identity_when_lambda_zero_and_null_relevance() {
        let grad = Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64).collect());
        let fused = fuse_block(&grad, &[0.0, 0.0, 0.0], 0.0, GateAxis::Key).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert_eq!(fused.at2(j, k), expect);
            }
        }
    }

    #[test]
    fn fuse_lambda_zero_ignores_gradients_bitwise() {
        let r = [0.4, -0.2, 0.9];
        let g1 = Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64 * 0.37).collect());
        let g2 = Tensor::new(vec![2, 3, 3], (0..18).map(|v| -(v as f64) * 13.1).collect());
        let f1 = fuse_block(&g1, &r, 0.0, GateAxis::Key).unwrap();
        let f2 = fuse_block(&g2, &r, 0.0, GateAxis::Key).unwrap();
        assert_eq!(f1.values, f2.values);
    }

    #[test]
    fn fused_rows_have_unit_l1_norm() {
        let grad = Tensor::new(
            vec![2, 4, 4],
            (0..32).map(|v| ((v * 7919) % 13) as f64 - 6.0).collect(),
        );
        let r = [0.3, -1.0, 0.0, 0.8];
        for lambda in [0.0, 0.25, 1.0] {
            let fused = fuse_block(&grad, &r, lambda, GateAxis::Key).unwrap();
            for j in 0..4 {
                let norm: f64 = (0..4).map(|k| fused.at2(j, k).abs()).sum();
                assert!((norm - 1.0).abs() < 1e-15, "row {j} norm {norm}");
            }
        }
    }

    #[test]
    fn rollout_identity_chain_and_single_block() {
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let chain = vec![eye.clone(), eye.clone(), eye.clone()];
        let c = rollout(&chain, (1, 3)).unwrap();
        assert_eq!(c.values, eye.values);

        let single = Tensor::new(vec![2, 2], vec![0.25, 0.75, -0.5, 0.5]);
        let c = rollout(&[eyeify(&single)], (1, 1)).unwrap();
        assert_eq!(c.values, eyeify(&single).values);

        assert!(rollout(&chain, (2, 1)).is_err());
        assert!(rollout(&chain, (0, 2)).is_err());
    }

    fn eyeify(t: &Tensor) -> Tensor {
        t.clone()
    }

    #[test]
    fn decompose_signed_cases() {
        let c = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.0, 3.0]);
        let (p, n) = decompose_signed(&c);
        assert_eq!(p.values, vec![1.0, 0.0, 0.0, 3.0]);
        assert_eq!(n.values, vec![0.0, -2.0, 0.0, 0.0]);
        for i in 0..4 {
            assert_eq!(p.values[i] + n.values[i], c.values[i]);
        }

        let all_neg = Tensor::new(vec![1, 2], vec![-1.0, -2.0]);
        let (p, _) = decompose_signed(&all_neg);
        assert!(p.values.iter().all(|&v| v == 0.0));
    }
}
