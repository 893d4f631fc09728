//! Transformer encoder classifier under explanation.
//!
//! The forward pass records everything the attribution pipeline consumes:
//! the input to every block, every post-softmax attention matrix, and the
//! class logits. `forward_from_hidden` runs only the suffix of the network
//! from an arbitrary hidden state, which is what the layer-wise integrated
//! gradients loop differentiates through.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{accuracy, train_synthetic, TrainConfig, TrainLog};

use crate::error::{CaligError, Result};
use crate::tensor::{Tape, Tensor, TensorId, MASK_NEG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub cls_token_id: usize,
    pub pad_token_id: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.ff_dim == 0
        {
            return Err(CaligError::Config("layer/head/dim counts must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(CaligError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(CaligError::Config("num_classes must be >= 2".into()));
        }
        if self.cls_token_id == self.pad_token_id {
            return Err(CaligError::Config("cls and pad token ids must differ".into()));
        }
        if self.cls_token_id >= self.vocab_size || self.pad_token_id >= self.vocab_size {
            return Err(CaligError::Config("special token ids must be < vocab_size".into()));
        }
        if self.max_seq_len == 0 {
            return Err(CaligError::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Per-block parameters: attention projections, feed-forward, two layer norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// Full parameter set of the classifier. Immutable during attribution and
/// safely shared across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// Layer-norm epsilon, fixed for the whole architecture.
pub const LN_EPS: f64 = 1e-5;

impl EncoderModel {
    /// Seeded initialization: scaled uniform (+-1/sqrt(d)) for projections and
    /// embeddings, ones for layer-norm gains, zeros for biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: Vec<usize>| -> Tensor {
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, values)
        };

        let token_embedding = uniform(vec![config.vocab_size, d]);
        let position_embedding = uniform(vec![config.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(BlockParams {
                w_q: uniform(vec![d, d]),
                b_q: Tensor::zeros(vec![d]),
                w_k: uniform(vec![d, d]),
                b_k: Tensor::zeros(vec![d]),
                w_v: uniform(vec![d, d]),
                b_v: Tensor::zeros(vec![d]),
                w_o: uniform(vec![d, d]),
                b_o: Tensor::zeros(vec![d]),
                ln1_gamma: Tensor::new(vec![d], vec![1.0; d]),
                ln1_beta: Tensor::zeros(vec![d]),
                ff_w1: uniform(vec![d, config.ff_dim]),
                ff_b1: Tensor::zeros(vec![config.ff_dim]),
                ff_w2: uniform(vec![config.ff_dim, d]),
                ff_b2: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::new(vec![d], vec![1.0; d]),
                ln2_beta: Tensor::zeros(vec![d]),
            });
        }
        let classifier_w = uniform(vec![d, config.num_classes]);
        let classifier_b = Tensor::zeros(vec![config.num_classes]);
        Ok(EncoderModel {
            config,
            token_embedding,
            position_embedding,
            blocks,
            classifier_w,
            classifier_b,
        })
    }

    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("w_q", &blk.w_q),
                ("b_q", &blk.b_q),
                ("w_k", &blk.w_k),
                ("b_k", &blk.b_k),
                ("w_v", &blk.w_v),
                ("b_v", &blk.b_v),
                ("w_o", &blk.w_o),
                ("b_o", &blk.b_o),
                ("ln1_gamma", &blk.ln1_gamma),
                ("ln1_beta", &blk.ln1_beta),
                ("ff_w1", &blk.ff_w1),
                ("ff_b1", &blk.ff_b1),
                ("ff_w2", &blk.ff_w2),
                ("ff_b2", &blk.ff_b2),
                ("ln2_gamma", &blk.ln2_gamma),
                ("ln2_beta", &blk.ln2_beta),
            ] {
                out.push((format!("block{b}.{name}"), t));
            }
        }
        out.push(("classifier.w".to_string(), &self.classifier_w));
        out.push(("classifier.b".to_string(), &self.classifier_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [
                ("w_q", &mut blk.w_q),
                ("b_q", &mut blk.b_q),
                ("w_k", &mut blk.w_k),
                ("b_k", &mut blk.b_k),
                ("w_v", &mut blk.w_v),
                ("b_v", &mut blk.b_v),
                ("w_o", &mut blk.w_o),
                ("b_o", &mut blk.b_o),
                ("ln1_gamma", &mut blk.ln1_gamma),
                ("ln1_beta", &mut blk.ln1_beta),
                ("ff_w1", &mut blk.ff_w1),
                ("ff_b1", &mut blk.ff_b1),
                ("ff_w2", &mut blk.ff_w2),
                ("ff_b2", &mut blk.ff_b2),
                ("ln2_gamma", &mut blk.ln2_gamma),
                ("ln2_beta", &mut blk.ln2_beta),
            ] {
                out.push((format!("block{b}.{name}"), t));
            }
        }
        out.push(("classifier.w".to_string(), &mut self.classifier_w));
        out.push(("classifier.b".to_string(), &mut self.classifier_b));
        out
    }

    /// FNV-1a hash over config and all parameter bytes; identifies a trained
    /// model in serialized artifacts.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(serde_json::to_string(&self.config).unwrap().as_bytes());
        for (_, t) in self.named_params() {
            for v in &t.values {
                eat(&v.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }

    fn validate_token_ids(&self, token_ids: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if token_ids.is_empty() || token_ids.len() > cfg.max_seq_len {
            return Err(CaligError::Input(format!(
                "sequence length {} outside [1, {}]",
                token_ids.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(CaligError::Input(format!(
                "token id {bad} out of range (vocab size {})",
                cfg.vocab_size
            )));
        }
        if token_ids[0] != cfg.cls_token_id {
            return Err(CaligError::Input(format!(
                "sequence must start with the cls token {}",
                cfg.cls_token_id
            )));
        }
        Ok(())
    }

    /// Key-padding mask: `MASK_NEG` added to every attention logit whose key
    /// position is a pad token. `None` when nothing is padded.
    pub fn attention_mask(&self, token_ids: &[usize]) -> Option<AttentionMask> {
        if token_ids.contains(&self.config.pad_token_id) {
            Some(AttentionMask {
                key_is_pad: token_ids.iter().map(|&t| t == self.config.pad_token_id).collect(),
            })
        } else {
            None
        }
    }

    /// Full forward pass, recording the complete trace.
    pub fn forward(&self, token_ids: &[usize]) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let mask = self.attention_mask(token_ids);
        let rec = self.record_forward(&mut tape, token_ids, mask.as_ref())?;
        let logits = tape.tensor(rec.logits).clone();
        let predicted_class = argmax(&logits.values);
        Ok(ForwardTrace {
            token_ids: token_ids.to_vec(),
            hidden_states: rec.hidden.iter().map(|&id| tape.tensor(id).clone()).collect(),
            attentions: rec.attentions.iter().map(|&id| tape.tensor(id).clone()).collect(),
            logits,
            predicted_class,
        })
    }

    /// Run the network suffix starting at block `layer` (1-based;
    /// `num_layers + 1` means classifier only) from a given hidden state.
    pub fn forward_from_hidden(
        &self,
        layer: usize,
        hidden: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let run = self.record_suffix(&mut tape, layer, hidden.clone(), mask)?;
        let logits = tape.tensor(run.logits).clone();
        let attentions = run.attentions.iter().map(|&id| tape.tensor(id).clone()).collect();
        Ok((logits, attentions))
    }

    /// Recording variant of [`EncoderModel::forward_from_hidden`]; the caller
    /// keeps the tape to run backward and read gradients.
    pub fn record_suffix(
        &self,
        tape: &mut Tape,
        layer: usize,
        hidden: Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<SuffixRun> {
        let num_layers = self.config.num_layers;
        if layer == 0 || layer > num_layers + 1 {
            return Err(CaligError::Contract(format!(
                "layer {layer} out of range [1, {}]",
                num_layers + 1
            )));
        }
        if hidden.shape.len() != 2 || hidden.shape[1] != self.config.hidden_dim {
            return Err(CaligError::Shape {
                op: "forward_from_hidden",
                lhs: hidden.shape.clone(),
                rhs: vec![0, self.config.hidden_dim],
            });
        }
        let hidden_id = tape.param(hidden);
        self.record_suffix_from(tape, layer, hidden_id, mask)
    }

    /// Continue the suffix from a tensor already on the tape.
    fn record_suffix_from(
        &self,
        tape: &mut Tape,
        layer: usize,
        hidden_id: TensorId,
        mask: Option<&AttentionMask>,
    ) -> Result<SuffixRun> {
        let num_layers = self.config.num_layers;
        let seq_len = tape.shape(hidden_id)[0];
        let mut params = Vec::new();
        let mut hidden_states = vec![hidden_id];
        let mut x = hidden_id;
        let mut attentions = Vec::new();
        for b in (layer - 1)..num_layers {
            let (next, attn) = self.record_block(tape, b, x, seq_len, mask, &mut params)?;
            attentions.push(attn);
            hidden_states.push(next);
            x = next;
        }
        let logits = self.record_classifier(tape, x, &mut params)?;
        Ok(SuffixRun { hidden: hidden_id, hidden_states, attentions, logits })
    }

    /// Forward from block `block`'s recorded input with that block's
    /// post-softmax attention replaced by an arbitrary matrix (no
    /// re-normalization), then through the rest of the network. This treats
    /// the attention map as a free input of the suffix computation, which is
    /// what counterfactual attention probes and the attention-gradient
    /// finite-difference oracle need.
    pub fn forward_with_attention_override(
        &self,
        block: usize,
        block_input: &Tensor,
        attention: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<Tensor> {
        let num_layers = self.config.num_layers;
        if block == 0 || block > num_layers {
            return Err(CaligError::Contract(format!(
                "block {block} out of range [1, {num_layers}]"
            )));
        }
        let seq_len = block_input.shape[0];
        let heads = self.config.num_heads;
        if attention.shape != [heads, seq_len, seq_len] {
            return Err(CaligError::Shape {
                op: "forward_with_attention_override",
                lhs: attention.shape.clone(),
                rhs: vec![heads, seq_len, seq_len],
            });
        }
        let mut tape = Tape::new();
        let x = tape.leaf(block_input.clone());
        let attn = tape.leaf(attention.clone());
        let mut params = Vec::new();
        let next =
            self.record_block_body(&mut tape, block - 1, x, attn, &mut params)?;
        let run = if block < num_layers {
            self.record_suffix_from(&mut tape, block + 1, next, mask)?
        } else {
            let logits = self.record_classifier(&mut tape, next, &mut params)?;
            SuffixRun { hidden: next, hidden_states: vec![next], attentions: vec![], logits }
        };
        Ok(tape.tensor(run.logits).clone())
    }

    /// Record the full forward pass on the caller's tape.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        mask: Option<&AttentionMask>,
    ) -> Result<ForwardRecording> {
        self.validate_token_ids(token_ids)?;
        let seq_len = token_ids.len();
        let d = self.config.hidden_dim;

        let mut params = Vec::new();
        let tok_table = tape.param(self.token_embedding.clone());
        params.push(("token_embedding".to_string(), tok_table));
        let pos_table = tape.param(self.position_embedding.clone());
        params.push(("position_embedding".to_string(), pos_table));
        let tok = tape.gather(tok_table, token_ids)?;
        let pos = tape.slice_rows(pos_table, 0, seq_len)?;
        let embedded = tape.add(tok, pos)?;
        debug_assert_eq!(tape.shape(embedded), &[seq_len, d]);

        let mut hidden = vec![embedded];
        let mut attentions = Vec::new();
        let mut x = embedded;
        for b in 0..self.config.num_layers {
            let (next, attn) = self.record_block(tape, b, x, seq_len, mask, &mut params)?;
            attentions.push(attn);
            hidden.push(next);
            x = next;
        }
        let logits = self.record_classifier(tape, x, &mut params)?;
        Ok(ForwardRecording { embedded, hidden, attentions, logits, params })
    }

    /// One post-norm block: attention -> add & norm -> feed-forward -> add & norm.
    fn record_block(
        &self,
        tape: &mut Tape,
        b: usize,
        x: TensorId,
        seq_len: usize,
        mask: Option<&AttentionMask>,
        params: &mut Vec<(String, TensorId)>,
    ) -> Result<(TensorId, TensorId)> {
        let blk = &self.blocks[b];
        let heads = self.config.num_heads;
        let dk = self.config.head_dim();

        let mut reg = |tape: &mut Tape, name: &str, t: &Tensor| -> TensorId {
            let id = tape.param(t.clone());
            params.push((format!("block{b}.{name}"), id));
            id
        };
        let w_q = reg(tape, "w_q", &blk.w_q);
        let b_q = reg(tape, "b_q", &blk.b_q);
        let w_k = reg(tape, "w_k", &blk.w_k);
        let b_k = reg(tape, "b_k", &blk.b_k);

        let q = tape.matmul(x, w_q)?;
        let q = tape.add_bias(q, b_q)?;
        let k = tape.matmul(x, w_k)?;
        let k = tape.add_bias(k, b_k)?;

        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(m) = mask {
            let mask_t = tape.leaf(m.logits_tensor(heads, seq_len));
            scores = tape.add(scores, mask_t)?;
        }
        let attn = tape.softmax_lastdim(scores)?;
        tape.watch(attn);

        let x2 = self.record_block_body(tape, b, x, attn, params)?;
        Ok((x2, attn))
    }

    /// Everything in a block downstream of the attention matrix: value
    /// aggregation, output projection, the two residual/norm stages, and the
    /// feed-forward. `attn` may be the recorded softmax output or an
    /// arbitrary override.
    fn record_block_body(
        &self,
        tape: &mut Tape,
        b: usize,
        x: TensorId,
        attn: TensorId,
        params: &mut Vec<(String, TensorId)>,
    ) -> Result<TensorId> {
        let blk = &self.blocks[b];
        let heads = self.config.num_heads;
        let mut reg = |tape: &mut Tape, name: &str, t: &Tensor| -> TensorId {
            let id = tape.param(t.clone());
            params.push((format!("block{b}.{name}"), id));
            id
        };
        let w_v = reg(tape, "w_v", &blk.w_v);
        let b_v = reg(tape, "b_v", &blk.b_v);
        let w_o = reg(tape, "w_o", &blk.w_o);
        let b_o = reg(tape, "b_o", &blk.b_o);

        let v = tape.matmul(x, w_v)?;
        let v = tape.add_bias(v, b_v)?;
        let vh = tape.split_heads(v, heads)?;
        let ctx = tape.matmul(attn, vh)?;
        let merged = tape.merge_heads(ctx)?;
        let proj = tape.matmul(merged, w_o)?;
        let proj = tape.add_bias(proj, b_o)?;

        let ln1_g = reg(tape, "ln1_gamma", &blk.ln1_gamma);
        let ln1_b = reg(tape, "ln1_beta", &blk.ln1_beta);
        let res1 = tape.add(x, proj)?;
        let x1 = tape.layer_norm(res1, ln1_g, ln1_b, LN_EPS)?;

        let ff_w1 = reg(tape, "ff_w1", &blk.ff_w1);
        let ff_b1 = reg(tape, "ff_b1", &blk.ff_b1);
        let ff_w2 = reg(tape, "ff_w2", &blk.ff_w2);
        let ff_b2 = reg(tape, "ff_b2", &blk.ff_b2);
        let h1 = tape.matmul(x1, ff_w1)?;
        let h1 = tape.add_bias(h1, ff_b1)?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, ff_w2)?;
        let h2 = tape.add_bias(h2, ff_b2)?;

        let ln2_g = reg(tape, "ln2_gamma", &blk.ln2_gamma);
        let ln2_b = reg(tape, "ln2_beta", &blk.ln2_beta);
        let res2 = tape.add(x1, h2)?;
        tape.layer_norm(res2, ln2_g, ln2_b, LN_EPS)
    }

    /// Single affine head reading the cls position (row 0).
    fn record_classifier(
        &self,
        tape: &mut Tape,
        x: TensorId,
        params: &mut Vec<(String, TensorId)>,
    ) -> Result<TensorId> {
        let w_c = tape.param(self.classifier_w.clone());
        params.push(("classifier.w".to_string(), w_c));
        let b_c = tape.param(self.classifier_b.clone());
        params.push(("classifier.b".to_string(), b_c));
        let cls = tape.slice_rows(x, 0, 1)?;
        let logits = tape.matmul(cls, w_c)?;
        let logits = tape.add_bias(logits, b_c)?;
        tape.reshape(logits, vec![self.config.num_classes])
    }
}

/// Key-padding mask over a fixed token sequence.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    key_is_pad: Vec<bool>,
}

impl AttentionMask {
    /// Additive mask of shape `[heads, s, s]`: `MASK_NEG` on pad key columns.
    fn logits_tensor(&self, heads: usize, seq_len: usize) -> Tensor {
        let mut values = vec![0.0; heads * seq_len * seq_len];
        for h in 0..heads {
            for q in 0..seq_len {
                for (k, &pad) in self.key_is_pad.iter().enumerate() {
                    if pad {
                        values[(h * seq_len + q) * seq_len + k] = MASK_NEG;
                    }
                }
            }
        }
        Tensor::new(vec![heads, seq_len, seq_len], values)
    }
}

/// Everything one full forward pass produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub token_ids: Vec<usize>,
    /// `num_layers + 1` states of shape `[s, d]`: index 0 is the embedded
    /// input to block 1, index `l` the input to block `l + 1`, and the last
    /// entry the final encoder output.
    pub hidden_states: Vec<Tensor>,
    /// One `[heads, s, s]` post-softmax attention tensor per block.
    pub attentions: Vec<Tensor>,
    pub logits: Tensor,
    pub predicted_class: usize,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Input to block `layer` (1-based); `num_layers + 1` is the final output.
    pub fn hidden(&self, layer: usize) -> &Tensor {
        &self.hidden_states[layer - 1]
    }
}

/// Tape handles from a recorded full forward.
pub struct ForwardRecording {
    pub embedded: TensorId,
    pub hidden: Vec<TensorId>,
    pub attentions: Vec<TensorId>,
    pub logits: TensorId,
    /// Named parameter handles in checkpoint order.
    pub params: Vec<(String, TensorId)>,
}

/// Tape handles from a recorded suffix run.
pub struct SuffixRun {
    /// The injected hidden state (input to the starting block).
    pub hidden: TensorId,
    /// States from the injected one through the final encoder output.
    pub hidden_states: Vec<TensorId>,
    pub attentions: Vec<TensorId>,
    pub logits: TensorId,
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of a logit vector (host-side helper).
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            vocab_size: 12,
            max_seq_len: 10,
            num_classes: 2,
            cls_token_id: 1,
            pad_token_id: 0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.hidden_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.pad_token_id = c.cls_token_id;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = EncoderModel::init(tiny_config(), 3).unwrap();
        let trace = model.forward(&[1, 4, 5, 6, 7]).unwrap();
        assert_eq!(trace.hidden_states.len(), 3);
        assert_eq!(trace.attentions.len(), 2);
        for attn in &trace.attentions {
            let s = attn.shape[1];
            for row in attn.values.chunks(s) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let model = EncoderModel::init(tiny_config(), 3).unwrap();
        let trace = model.forward(&[1]).unwrap();
        for attn in &trace.attentions {
            assert_eq!(attn.shape, vec![2, 1, 1]);
            for &v in &attn.values {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let model = EncoderModel::init(tiny_config(), 5).unwrap();
        let a = model.forward(&[1, 2, 3, 4]).unwrap();
        let b = model.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a.logits.values, b.logits.values);
    }

    #[test]
    fn input_validation_errors() {
        let model = EncoderModel::init(tiny_config(), 5).unwrap();
        assert!(matches!(model.forward(&[]), Err(CaligError::Input(_))));
        assert!(matches!(model.forward(&[1, 99]), Err(CaligError::Input(_))));
        assert!(matches!(model.forward(&[2, 3]), Err(CaligError::Input(_))));
        let too_long = vec![1; 11];
        assert!(matches!(model.forward(&too_long), Err(CaligError::Input(_))));
    }

    #[test]
    fn suffix_consistency_all_layers() {
        let model = EncoderModel::init(tiny_config(), 17).unwrap();
        let trace = model.forward(&[1, 4, 5, 9, 2, 7]).unwrap();
        for layer in 1..=model.config.num_layers + 1 {
            let (logits, attns) =
                model.forward_from_hidden(layer, trace.hidden(layer), None).unwrap();
            assert_eq!(attns.len(), model.config.num_layers + 1 - layer);
            for (a, b) in logits.values.iter().zip(&trace.logits.values) {
                assert!((a - b).abs() < 1e-12, "layer {layer}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn suffix_respects_pad_mask() {
        let model = EncoderModel::init(tiny_config(), 21).unwrap();
        let ids = [1, 4, 5, 0, 0];
        let trace = model.forward(&ids).unwrap();
        // Attention onto pad keys is zero.
        for attn in &trace.attentions {
            let s = ids.len();
            for h in 0..attn.shape[0] {
                for q in 0..s {
                    assert!(attn.at3(h, q, 3).abs() < 1e-300);
                    assert!(attn.at3(h, q, 4).abs() < 1e-300);
                }
            }
        }
        // Suffix consistency requires the same mask.
        let mask = model.attention_mask(&ids);
        let (logits, _) = model.forward_from_hidden(1, trace.hidden(1), mask.as_ref()).unwrap();
        for (a, b) in logits.values.iter().zip(&trace.logits.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_sanity_with_zeroed_positions() {
        let mut model = EncoderModel::init(tiny_config(), 23).unwrap();
        for v in &mut model.position_embedding.values {
            *v = 0.0;
        }
        let ids = [1usize, 4, 5, 6, 7];
        let permuted = [1usize, 6, 4, 7, 5]; // permutation of non-cls tokens
        let perm = [0usize, 3, 1, 4, 2]; // permuted[i] == ids[perm[i]]
        let a = model.forward(&ids).unwrap();
        let b = model.forward(&permuted).unwrap();
        for (x, y) in a.logits.values.iter().zip(&b.logits.values) {
            assert!((x - y).abs() < 1e-8, "cls logits changed under permutation");
        }
        // Attention equivariance: B[h, i, j] == A[h, perm[i], perm[j]].
        for (ta, tb) in a.attentions.iter().zip(&b.attentions) {
            for h in 0..ta.shape[0] {
                for i in 0..5 {
                    for j in 0..5 {
                        let va = ta.at3(h, perm[i], perm[j]);
                        let vb = tb.at3(h, i, j);
                        assert!((va - vb).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let m1 = EncoderModel::init(tiny_config(), 1).unwrap();
        let m2 = EncoderModel::init(tiny_config(), 2).unwrap();
        assert_ne!(m1.fingerprint(), m2.fingerprint());
        assert_eq!(m1.fingerprint(), m1.clone().fingerprint());
    }
}
