//! Evaluation-harness properties that need a live model: random-ranking
//! calibration, curve endpoints, and report order invariance.

mod common;

use calig::encoder::softmax_probs;
use calig::eval::{generate_synthetic, perturbation_auc, perturbation_curve, PerturbMode};
use common::{tiny_model, tiny_task};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Random rankings carry no signal: over >= 20 rankings on the same example
/// set, mean insertion AUC and mean deletion AUC agree within 0.05.
#[test]
fn random_ranking_calibration() {
    let model = tiny_model(2, 61);
    let task = tiny_task(61, 6);
    let examples = generate_synthetic(&task).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(7);

    let mut ins = Vec::new();
    let mut del = Vec::new();
    for ex in &examples {
        for _ in 0..4 {
            // 6 examples x 4 shuffles = 24 rankings
            let mut ranks: Vec<f64> = (0..ex.token_ids.len()).map(|i| i as f64).collect();
            ranks.shuffle(&mut rng);
            ins.push(
                perturbation_auc(&model, &ex.token_ids, &ranks, PerturbMode::Insertion, 0)
                    .unwrap(),
            );
            del.push(
                perturbation_auc(&model, &ex.token_ids, &ranks, PerturbMode::Deletion, 0)
                    .unwrap(),
            );
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = (mean(&ins) - mean(&del)).abs();
    assert!(gap < 0.05, "insertion {:.4} vs deletion {:.4}", mean(&ins), mean(&del));
    for v in ins.iter().chain(&del) {
        assert!((0.0..=1.0).contains(v));
    }
}

/// Insertion curves start at the fully neutralized confidence and end at the
/// clean confidence, exactly.
#[test]
fn curve_endpoints_are_exact() {
    let model = tiny_model(1, 67);
    let task = tiny_task(67, 4);
    for ex in generate_synthetic(&task).unwrap() {
        let scores: Vec<f64> = (0..ex.token_ids.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let curve =
            perturbation_curve(&model, &ex.token_ids, &scores, PerturbMode::Insertion, 1).unwrap();

        let clean = softmax_probs(&model.forward(&ex.token_ids).unwrap().logits.values)[1];
        let neutral_ids: Vec<usize> = ex
            .token_ids
            .iter()
            .map(|&t| if t == 1 { 1 } else { 0 })
            .collect();
        let neutral = softmax_probs(&model.forward(&neutral_ids).unwrap().logits.values)[1];

        assert_eq!(curve[0], neutral);
        assert_eq!(*curve.last().unwrap(), clean);
    }
}
