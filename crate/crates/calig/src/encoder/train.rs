//! Seeded training of the synthetic classifier with Adam.

use super::{argmax, EncoderConfig, EncoderModel};
use crate::error::{CaligError, Result};
use crate::tensor::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 3, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub final_train_accuracy: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Train a fresh model on `(token_ids, label)` pairs. Fully seeded: the same
/// seed yields bitwise-identical parameters. Labels must lie in
/// `[0, num_classes)`. Divergence (non-finite loss) aborts with the offending
/// step.
pub fn train_synthetic(
    config: &EncoderConfig,
    train: &[(Vec<usize>, usize)],
    hp: &TrainConfig,
) -> Result<(EncoderModel, TrainLog)> {
    if let Some((_, bad)) = train.iter().find(|(_, l)| *l >= config.num_classes) {
        return Err(CaligError::Input(format!(
            "label {bad} out of range for {} classes",
            config.num_classes
        )));
    }
    let mut model = EncoderModel::init(config.clone(), hp.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(hp.seed ^ 0x5e_ed_0f_7e_a1);
    let mut adam: HashMap<String, AdamState> = HashMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (ids, label) = &train[i];
            let mask = model.attention_mask(ids);
            let mut tape = Tape::new();
            let rec = model.record_forward(&mut tape, ids, mask.as_ref())?;
            let loss = tape.cross_entropy(rec.logits, *label)?;
            let loss_val = tape.values(loss)[0];
            if !loss_val.is_finite() {
                return Err(CaligError::Training {
                    step,
                    detail: format!("loss became {loss_val}"),
                });
            }
            loss_sum += loss_val;
            tape.backward(loss)?;

            step += 1;
            let t = step as f64;
            let bias1 = 1.0 - ADAM_BETA1.powf(t);
            let bias2 = 1.0 - ADAM_BETA2.powf(t);
            let grads: Vec<(String, Vec<f64>)> = rec
                .params
                .iter()
                .map(|(name, id)| {
                    let g = tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| {
                        vec![0.0; tape.tensor(*id).numel()]
                    });
                    (name.clone(), g)
                })
                .collect();
            drop(tape);
            for ((name, grad), (pname, param)) in
                grads.into_iter().zip(model.named_params_mut())
            {
                debug_assert_eq!(name, pname);
                let st = adam.entry(name).or_insert_with(|| AdamState {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
                for (j, g) in grad.iter().enumerate() {
                    st.m[j] = ADAM_BETA1 * st.m[j] + (1.0 - ADAM_BETA1) * g;
                    st.v[j] = ADAM_BETA2 * st.v[j] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = st.m[j] / bias1;
                    let v_hat = st.v[j] / bias2;
                    param.values[j] -= hp.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        epoch_losses.push(loss_sum / train.len().max(1) as f64);
    }

    let final_train_accuracy = accuracy(&model, train)?;
    Ok((model, TrainLog { epoch_losses, steps: step, final_train_accuracy }))
}

/// Fraction of examples whose argmax logit matches the label.
pub fn accuracy(model: &EncoderModel, data: &[(Vec<usize>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (ids, label) in data {
        let trace = model.forward(ids)?;
        if argmax(&trace.logits.values) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticConfig};

    fn task(seed: u64, n: usize) -> SyntheticConfig {
        SyntheticConfig { n_examples: n, seed, ..SyntheticConfig::default() }
    }

    fn pairs(cfg: &SyntheticConfig) -> Vec<(Vec<usize>, usize)> {
        generate_synthetic(cfg)
            .unwrap()
            .into_iter()
            .map(|e| (e.token_ids, e.label))
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialized_model_at_chance() {
        let t = task(3, 400);
        let enc = t.encoder_config(1, 2, 8);
        let hp = TrainConfig { epochs: 0, learning_rate: 1e-3, seed: 3 };
        let data = pairs(&t);
        let (model, log) = train_synthetic(&enc, &data, &hp).unwrap();
        assert_eq!(log.steps, 0);

        let init = crate::encoder::EncoderModel::init(enc, 3).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(&init.named_params()) {
            assert_eq!(a.values, b.values);
        }
        let acc = accuracy(&model, &data).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "chance-level accuracy expected, got {acc}");
    }

    #[test]
    fn divergence_is_reported_with_the_step() {
        let t = task(5, 40);
        let enc = t.encoder_config(1, 2, 8);
        // A learning rate huge enough that Q K^T overflows despite layer norm
        // renormalizing the activations between matmuls.
        let hp = TrainConfig { epochs: 3, learning_rate: 1e160, seed: 5 };
        match train_synthetic(&enc, &pairs(&t), &hp) {
            Err(crate::error::CaligError::Training { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_labels_are_rejected() {
        let t = task(7, 10);
        let enc = t.encoder_config(1, 2, 8);
        let mut data = pairs(&t);
        data[0].1 = 99;
        let hp = TrainConfig::default();
        assert!(matches!(
            train_synthetic(&enc, &data, &hp),
            Err(crate::error::CaligError::Input(_))
        ));
    }
}
