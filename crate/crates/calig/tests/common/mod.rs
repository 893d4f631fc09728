//! Shared fixtures for the integration suites. Each test binary uses its
//! own subset of these.
#![allow(dead_code)]

use calig::encoder::{train_synthetic, EncoderConfig, EncoderModel, TrainConfig};
use calig::eval::{generate_synthetic, SyntheticConfig};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

pub fn tiny_config(num_layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers,
        num_heads: 2,
        hidden_dim: 8,
        ff_dim: 16,
        vocab_size: 24,
        max_seq_len: 12,
        num_classes: 3,
        cls_token_id: 1,
        pad_token_id: 0,
    }
}

pub fn tiny_model(num_layers: usize, seed: u64) -> EncoderModel {
    EncoderModel::init(tiny_config(num_layers), seed).unwrap()
}

/// A random valid token sequence for `tiny_config` models.
pub fn random_tokens(rng: &mut ChaCha20Rng, len: usize) -> Vec<usize> {
    let mut ids = vec![1usize];
    for _ in 1..len {
        ids.push(rng.random_range(2..24));
    }
    ids
}

/// Synthetic task sized for `tiny_config` models (shared vocab and specials).
pub fn tiny_task(seed: u64, n_examples: usize) -> SyntheticConfig {
    SyntheticConfig {
        vocab_size: 24,
        seq_len: 8,
        num_classes: 3,
        keywords_per_class: 2,
        n_examples,
        seed,
    }
}

/// A briefly trained classifier: what the attribution pipeline actually
/// explains. Training moves the biases off zero, which keeps the layer-norm
/// statistics of the zero-embedding baseline path well conditioned.
pub fn trained_tiny_model(num_layers: usize, seed: u64) -> EncoderModel {
    let task = tiny_task(seed, 400);
    let data = generate_synthetic(&task).unwrap();
    let pairs: Vec<(Vec<usize>, usize)> =
        data.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
    let config = EncoderConfig { num_layers, ..tiny_config(num_layers) };
    let hp = TrainConfig { epochs: 4, learning_rate: 1e-3, seed };
    train_synthetic(&config, &pairs, &hp).unwrap().0
}

/// The full-size synthetic task (matches the benchmark defaults).
pub fn full_task(seed: u64) -> SyntheticConfig {
    SyntheticConfig { seed, ..SyntheticConfig::default() }
}

/// Fully trained benchmark-scale model (2 layers, 4 heads, width 32),
/// cached per seed because several tests in a binary want the same one.
pub fn full_trained_model(seed: u64) -> std::sync::Arc<EncoderModel> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<EncoderModel>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(m) = cache.lock().unwrap().get(&seed) {
        return m.clone();
    }
    let task = full_task(seed);
    let data = generate_synthetic(&task).unwrap();
    let pairs: Vec<(Vec<usize>, usize)> =
        data.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
    let config = task.encoder_config(2, 4, 32);
    let hp = TrainConfig { epochs: 3, learning_rate: 1e-3, seed };
    let model = Arc::new(train_synthetic(&config, &pairs, &hp).unwrap().0);
    cache.lock().unwrap().insert(seed, model.clone());
    model
}

/// Held-out inputs whose predicted-class output clears `min_margin` over the
/// zero-embedding baseline output. The left-rule Riemann sum carries an
/// O(1/m) endpoint bias that does not scale with the output difference, so
/// completeness-style tolerances are measured where the explained quantity
/// is materially nonzero, mirroring protocols that explain confident
/// predictions.
pub fn confident_inputs(
    model: &EncoderModel,
    task: &SyntheticConfig,
    want: usize,
    min_margin: f64,
) -> Vec<(Vec<usize>, usize)> {
    let pool = generate_synthetic(&SyntheticConfig {
        seed: task.seed ^ 0x7e57,
        n_examples: 200,
        ..task.clone()
    })
    .unwrap();
    let mut out = Vec::new();
    for ex in pool {
        let trace = model.forward(&ex.token_ids).unwrap();
        let c = trace.predicted_class;
        let baseline =
            calig::attribution::baseline_trace(model, ex.token_ids.len(), None).unwrap();
        let diff = trace.logits.values[c] - baseline.logits.values[c];
        if diff.abs() >= min_margin {
            out.push((ex.token_ids, c));
            if out.len() == want {
                break;
            }
        }
    }
    out
}
