//! Faithfulness and plausibility evaluation: token-F1 against gold
//! rationales, insertion/deletion perturbation curves, the synthetic
//! planted-keyword benchmark, and the report aggregation around them.

mod benchmark;
mod perturb;
mod synthetic;

pub use benchmark::{
    method_scores, run_benchmark, BenchmarkConfig, ExampleRecord, MetricReport, MetricRow, Method,
    PerMethodRecord, RuntimeStat,
};
pub use perturb::{curve_auc, perturbation_auc, perturbation_curve, PerturbMode};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{CaligError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One evaluation unit: a token sequence, its label, and (optionally) the
/// gold evidence mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RationaleExample {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_mask: Option<Vec<bool>>,
}

/// Line-delimited dataset: one JSON object per line.
pub fn write_dataset(path: &Path, examples: &[RationaleExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<RationaleExample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let ex: RationaleExample =
                serde_json::from_str(&line).map_err(|e| CaligError::Parse {
                    offset: offset + e.column().saturating_sub(1),
                    detail: e.to_string(),
                })?;
            out.push(ex);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Token-F1 of the top-scored tokens against a gold rationale mask.
///
/// Selects `max(ceil(p * s / 100), 5)` tokens (ties broken by earlier
/// position), excluding special positions from both the prediction pool and
/// the gold set. `special` marks cls/pad positions.
pub fn token_f1(scores: &[f64], mask: &[bool], special: &[bool], p: f64) -> Result<f64> {
    if scores.len() != mask.len() || scores.len() != special.len() {
        return Err(CaligError::Contract(format!(
            "token_f1 length mismatch: {} scores, {} mask, {} special",
            scores.len(),
            mask.len(),
            special.len()
        )));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(CaligError::Contract(format!("p = {p} outside (0, 100]")));
    }
    let gold: Vec<usize> =
        (0..mask.len()).filter(|&i| mask[i] && !special[i]).collect();
    if gold.is_empty() {
        return Err(CaligError::Contract("gold rationale mask has no usable tokens".into()));
    }
    let s = scores.len();
    let k = ((p * s as f64 / 100.0).ceil() as usize).max(5);

    let mut candidates: Vec<usize> = (0..s).filter(|&i| !special[i]).collect();
    candidates.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    candidates.truncate(k);

    let predicted: std::collections::HashSet<usize> = candidates.into_iter().collect();
    let gold_set: std::collections::HashSet<usize> = gold.into_iter().collect();
    let tp = predicted.intersection(&gold_set).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / predicted.len() as f64;
    let recall = tp / gold_set.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
