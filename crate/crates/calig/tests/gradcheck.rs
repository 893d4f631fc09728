//! Finite-difference verification of analytic gradients, from single ops up
//! to the full encoder logit with respect to the input embeddings.

mod common;

use calig::encoder::EncoderModel;
use calig::tensor::{Tape, Tensor};
use common::{rel_err, tiny_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const FD_H: f64 = 1e-5;

/// d logits[c] / d embedded, numerically: perturb one embedding entry and
/// re-run the suffix from layer 1.
fn encoder_fd_grad(model: &EncoderModel, embedded: &Tensor, class: usize) -> Vec<f64> {
    let mut out = vec![0.0; embedded.numel()];
    for i in 0..embedded.numel() {
        let run = |delta: f64| -> f64 {
            let mut x = embedded.clone();
            x.values[i] += delta;
            let (logits, _) = model.forward_from_hidden(1, &x, None).unwrap();
            logits.values[class]
        };
        out[i] = (run(FD_H) - run(-FD_H)) / (2.0 * FD_H);
    }
    out
}

fn encoder_analytic_grad(model: &EncoderModel, embedded: &Tensor, class: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let run = model.record_suffix(&mut tape, 1, embedded.clone(), None).unwrap();
    let y = tape.pick(run.logits, class).unwrap();
    tape.backward(y).unwrap();
    tape.grad(run.hidden).unwrap().to_vec()
}

#[test]
fn full_encoder_gradient_matches_finite_differences_over_100_trials() {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut trials = 0;
    let mut worst: f64 = 0.0;
    // 20 seeded models x 5 random inputs with random target classes.
    for model_seed in 0..20 {
        let model = tiny_model(2, model_seed);
        for _ in 0..5 {
            let s = rng.random_range(2..6);
            let d = model.config.hidden_dim;
            let values: Vec<f64> = (0..s * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let embedded = Tensor::new(vec![s, d], values);
            let class = rng.random_range(0..model.config.num_classes);

            let analytic = encoder_analytic_grad(&model, &embedded, class);
            let numeric = encoder_fd_grad(&model, &embedded, class);
            for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
                let e = rel_err(a, n);
                worst = worst.max(e);
                assert!(
                    e < 1e-4,
                    "model {model_seed} class {class} elem {i}: analytic {a:.8e} vs fd {n:.8e} (rel {e:.2e})"
                );
            }
            trials += 1;
        }
    }
    assert_eq!(trials, 100);
    println!("full-encoder gradcheck: 100 trials, worst rel err {worst:.3e}");
}

#[test]
fn embedding_table_gradient_matches_finite_differences() {
    // Through the gather op: perturb token-embedding entries of used rows.
    let model = tiny_model(1, 7);
    let ids = [1usize, 5, 9, 5];
    let class = 2;

    let mut tape = Tape::new();
    let rec = model.record_forward(&mut tape, &ids, None).unwrap();
    let y = tape.pick(rec.logits, class).unwrap();
    tape.backward(y).unwrap();
    let tok_table_id = rec.params[0].1;
    assert_eq!(rec.params[0].0, "token_embedding");
    let analytic = tape.grad(tok_table_id).unwrap().to_vec();

    let d = model.config.hidden_dim;
    for &row in &[1usize, 5, 9] {
        for j in 0..d {
            let run = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.token_embedding.values[row * d + j] += delta;
                m.forward(&ids).unwrap().logits.values[class]
            };
            let fd = (run(FD_H) - run(-FD_H)) / (2.0 * FD_H);
            let a = analytic[row * d + j];
            assert!(
                rel_err(a, fd) < 1e-4,
                "table[{row},{j}]: analytic {a:.8e} vs fd {fd:.8e}"
            );
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    // Spot-check every parameter tensor through the training loss.
    let model = tiny_model(2, 13);
    let ids = [1usize, 4, 7, 11, 3];
    let label = 1usize;

    let loss_of = |m: &EncoderModel| -> f64 {
        let mut tape = Tape::new();
        let rec = m.record_forward(&mut tape, &ids, None).unwrap();
        let loss = tape.cross_entropy(rec.logits, label).unwrap();
        tape.values(loss)[0]
    };

    let mut tape = Tape::new();
    let rec = model.record_forward(&mut tape, &ids, None).unwrap();
    let loss = tape.cross_entropy(rec.logits, label).unwrap();
    tape.backward(loss).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for (pi, (name, id)) in rec.params.iter().enumerate() {
        let n = tape.tensor(*id).numel();
        let analytic = tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        // Three random entries per tensor keep the test fast.
        for _ in 0..3 {
            let j = rng.random_range(0..n);
            let mut perturbed = model.clone();
            {
                let mut params = perturbed.named_params_mut();
                params[pi].1.values[j] += FD_H;
            }
            let up = loss_of(&perturbed);
            {
                let mut params = perturbed.named_params_mut();
                params[pi].1.values[j] -= 2.0 * FD_H;
            }
            let down = loss_of(&perturbed);
            let fd = (up - down) / (2.0 * FD_H);
            assert!(
                rel_err(analytic[j], fd) < 1e-4,
                "{name}[{j}]: analytic {:.8e} vs fd {fd:.8e}",
                analytic[j]
            );
        }
    }
}
