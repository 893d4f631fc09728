//! Planted-keyword benchmark generator: every example carries its class's
//! keywords at known positions, so the gold rationale is exact by
//! construction.

use super::RationaleExample;
use crate::encoder::EncoderConfig;
use crate::error::{CaligError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const PAD_TOKEN: usize = 0;
pub const CLS_TOKEN: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    /// Total sequence length including the leading cls token.
    pub seq_len: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 64,
            seq_len: 24,
            num_classes: 2,
            keywords_per_class: 2,
            n_examples: 2000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Token ids of class `c`'s keywords. Ids 0 and 1 are pad/cls; keyword
    /// blocks follow, fillers take the rest of the vocabulary.
    pub fn keywords(&self, class: usize) -> Vec<usize> {
        (0..self.keywords_per_class)
            .map(|j| 2 + class * self.keywords_per_class + j)
            .collect()
    }

    fn first_filler(&self) -> usize {
        2 + self.num_classes * self.keywords_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CaligError::Config("need at least 2 classes".into()));
        }
        if self.seq_len < self.keywords_per_class + 2 {
            return Err(CaligError::Config(format!(
                "seq_len {} too short for {} keywords plus cls and filler",
                self.seq_len, self.keywords_per_class
            )));
        }
        if self.first_filler() >= self.vocab_size {
            return Err(CaligError::Config(format!(
                "vocab_size {} leaves no filler tokens after {} keyword ids",
                self.vocab_size,
                self.first_filler()
            )));
        }
        Ok(())
    }

    /// Encoder configuration matching this task.
    pub fn encoder_config(&self, num_layers: usize, num_heads: usize, hidden_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers,
            num_heads,
            hidden_dim,
            ff_dim: hidden_dim * 2,
            vocab_size: self.vocab_size,
            max_seq_len: self.seq_len,
            num_classes: self.num_classes,
            cls_token_id: CLS_TOKEN,
            pad_token_id: PAD_TOKEN,
        }
    }
}

/// Generate the dataset. Deterministic for a fixed seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<RationaleExample>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let filler_range = config.first_filler()..config.vocab_size;
    let mut examples = Vec::with_capacity(config.n_examples);
    for i in 0..config.n_examples {
        let label = rng.random_range(0..config.num_classes);
        let keywords = config.keywords(label);

        let mut token_ids = vec![0usize; config.seq_len];
        token_ids[0] = CLS_TOKEN;
        for slot in token_ids.iter_mut().skip(1) {
            *slot = rng.random_range(filler_range.clone());
        }
        let mut positions: Vec<usize> = (1..config.seq_len).collect();
        positions.shuffle(&mut rng);
        let mut mask = vec![false; config.seq_len];
        for (kw, &pos) in keywords.iter().zip(&positions) {
            token_ids[pos] = *kw;
            mask[pos] = true;
        }

        examples.push(RationaleExample {
            id: format!("syn{i:05}"),
            token_ids,
            label,
            rationale_mask: Some(mask),
        });
    }
    Ok(examples)
}
