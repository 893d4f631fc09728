//! Benchmark runner: token-F1 over the p-grid plus insertion/deletion AUC
//! for every registered explainer, aggregated as mean and std over examples.

use super::{perturbation_auc, token_f1, PerturbMode, RationaleExample};
use crate::attribution::{
    baselines, explain_trace, AttributionConfig, Normalization, RelevancePairing,
};
use crate::encoder::{EncoderModel, ForwardTrace};
use crate::error::{CaligError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Calig,
    CaigLast,
    Ig,
    Ixg,
    AttnRollout,
    AttnLast,
    Random,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Calig => "calig",
            Method::CaigLast => "caig_last",
            Method::Ig => "ig",
            Method::Ixg => "ixg",
            Method::AttnRollout => "attn_rollout",
            Method::AttnLast => "attn_last",
            Method::Random => "random",
        }
    }

    pub fn all() -> Vec<Method> {
        vec![
            Method::Calig,
            Method::CaigLast,
            Method::Ig,
            Method::Ixg,
            Method::AttnRollout,
            Method::AttnLast,
            Method::Random,
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = CaligError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calig" => Ok(Method::Calig),
            "caig_last" => Ok(Method::CaigLast),
            "ig" => Ok(Method::Ig),
            "ixg" => Ok(Method::Ixg),
            "attn_rollout" => Ok(Method::AttnRollout),
            "attn_last" => Ok(Method::AttnLast),
            "random" => Ok(Method::Random),
            other => Err(CaligError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    pub f1_percents: Vec<f64>,
    /// Interpolation steps for the gradient-path methods.
    pub steps: usize,
    pub lambda: f64,
    pub normalization: Normalization,
    /// Cap on how many examples get the (expensive) perturbation curves;
    /// `None` evaluates all of them.
    pub auc_examples: Option<usize>,
    /// Shuffles averaged for the random-ranking baseline.
    pub random_shuffles: usize,
    pub include_per_example: bool,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: Method::all(),
            f1_percents: vec![5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0],
            steps: 50,
            lambda: 1.0,
            // The quantitative-experiment protocol normalizes relevance with
            // L1 inside each layer; explain() defaults to symmetric min-max.
            normalization: Normalization::L1,
            auc_examples: Some(50),
            random_shuffles: 20,
            include_per_example: true,
            seed: 0,
        }
    }
}

/// One aggregate line: `metric` is `token_f1` (with `p_or_mode` the percent)
/// or `auc` (with `p_or_mode` insertion/deletion).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub metric: String,
    pub p_or_mode: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerMethodRecord {
    /// `(p, f1)` pairs over the configured grid.
    pub f1: Vec<(f64, f64)>,
    pub insertion_auc: Option<f64>,
    pub deletion_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub methods: BTreeMap<String, PerMethodRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeStat {
    pub method: String,
    pub total_seconds: f64,
    pub per_example_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_example: Vec<ExampleRecord>,
    pub failures: Vec<(String, String)>,
    pub runtime: Vec<RuntimeStat>,
    pub config: BenchmarkConfig,
    pub model_fingerprint: String,
    pub n_examples: usize,
}

impl MetricReport {
    /// Flat CSV: method, metric, p-or-mode, mean, std, n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,p_or_mode,mean,std,n\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.10},{:.10},{}\n",
                row.method, row.metric, row.p_or_mode, row.mean, row.std, row.n
            ));
        }
        out
    }

    pub fn row(&self, method: Method, metric: &str, p_or_mode: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.method == method.name() && r.metric == metric && r.p_or_mode == p_or_mode
        })
    }
}

struct ExampleOutcome {
    record: ExampleRecord,
    durations: Vec<f64>,
}

/// Evaluate every configured method on every example. Per-example failures
/// are recorded, not fatal. The report is deterministic for a fixed seed;
/// only the runtime stats vary between runs.
pub fn run_benchmark(
    model: &EncoderModel,
    examples: &[RationaleExample],
    config: &BenchmarkConfig,
) -> Result<MetricReport> {
    if config.methods.is_empty() {
        return Err(CaligError::Config("no methods requested".into()));
    }
    if config.random_shuffles == 0 && config.methods.contains(&Method::Random) {
        return Err(CaligError::Config("random baseline needs at least one shuffle".into()));
    }

    let outcomes: Vec<std::result::Result<ExampleOutcome, (String, String)>> = examples
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            evaluate_example(model, ex, idx, config)
                .map_err(|e| (ex.id.clone(), e.to_string()))
        })
        .collect();

    let mut per_example = Vec::new();
    let mut failures = Vec::new();
    let mut durations = vec![0.0f64; config.methods.len()];
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                for (d, v) in durations.iter_mut().zip(&o.durations) {
                    *d += v;
                }
                per_example.push(o.record);
            }
            Err(f) => failures.push(f),
        }
    }

    let mut rows = Vec::new();
    for method in &config.methods {
        for &p in &config.f1_percents {
            let values: Vec<f64> = per_example
                .iter()
                .filter_map(|r| r.methods.get(method.name()))
                .filter_map(|m| {
                    m.f1.iter().find(|(pp, _)| *pp == p).map(|(_, f1)| *f1)
                })
                .collect();
            if !values.is_empty() {
                let (mean, std) = mean_std(&values);
                rows.push(MetricRow {
                    method: method.name().into(),
                    metric: "token_f1".into(),
                    p_or_mode: format_p(p),
                    mean,
                    std,
                    n: values.len(),
                });
            }
        }
        for (mode, field) in [("insertion", true), ("deletion", false)] {
            let values: Vec<f64> = per_example
                .iter()
                .filter_map(|r| r.methods.get(method.name()))
                .filter_map(|m| if field { m.insertion_auc } else { m.deletion_auc })
                .collect();
            if !values.is_empty() {
                let (mean, std) = mean_std(&values);
                rows.push(MetricRow {
                    method: method.name().into(),
                    metric: "auc".into(),
                    p_or_mode: mode.into(),
                    mean,
                    std,
                    n: values.len(),
                });
            }
        }
    }

    let n_ok = per_example.len().max(1);
    let runtime = config
        .methods
        .iter()
        .zip(&durations)
        .map(|(m, &total)| RuntimeStat {
            method: m.name().into(),
            total_seconds: total,
            per_example_seconds: total / n_ok as f64,
        })
        .collect();

    Ok(MetricReport {
        rows,
        per_example: if config.include_per_example { per_example } else { Vec::new() },
        failures,
        runtime,
        config: config.clone(),
        model_fingerprint: model.fingerprint(),
        n_examples: examples.len(),
    })
}

fn evaluate_example(
    model: &EncoderModel,
    ex: &RationaleExample,
    idx: usize,
    config: &BenchmarkConfig,
) -> Result<ExampleOutcome> {
    let trace = model.forward(&ex.token_ids)?;
    let target = trace.predicted_class;
    let special: Vec<bool> = ex
        .token_ids
        .iter()
        .map(|&t| t == model.config.cls_token_id || t == model.config.pad_token_id)
        .collect();
    let want_auc = config.auc_examples.is_none_or(|cap| idx < cap);

    let mut methods = BTreeMap::new();
    let mut durations = Vec::with_capacity(config.methods.len());
    for method in &config.methods {
        let started = Instant::now();
        let record = if *method == Method::Random {
            random_record(model, ex, idx, target, &special, want_auc, config)?
        } else {
            let scores = method_scores(model, &trace, *method, target, config)?;
            score_record(model, ex, &scores, target, &special, want_auc, config)?
        };
        durations.push(started.elapsed().as_secs_f64());
        methods.insert(method.name().to_string(), record);
    }

    Ok(ExampleOutcome {
        record: ExampleRecord { id: ex.id.clone(), label: ex.label, predicted: target, methods },
        durations,
    })
}

/// Attribution scores for one deterministic method.
pub fn method_scores(
    model: &EncoderModel,
    trace: &ForwardTrace,
    method: Method,
    target: usize,
    config: &BenchmarkConfig,
) -> Result<Vec<f64>> {
    let num_layers = model.config.num_layers;
    match method {
        Method::Calig => {
            let cfg = AttributionConfig {
                steps: config.steps,
                lambda: config.lambda,
                normalization: config.normalization,
                ..AttributionConfig::new(target)
            };
            Ok(explain_trace(model, trace, &cfg)?.token_scores)
        }
        Method::CaigLast => {
            let cfg = AttributionConfig {
                steps: config.steps,
                lambda: config.lambda,
                normalization: config.normalization,
                pairing: RelevancePairing::Fixed(num_layers),
                rollout_range: Some((num_layers, num_layers)),
                ..AttributionConfig::new(target)
            };
            Ok(explain_trace(model, trace, &cfg)?.token_scores)
        }
        Method::Ig => baselines::ig_final(model, trace, target, config.steps),
        Method::Ixg => baselines::input_x_gradient(model, &trace.token_ids, target),
        Method::AttnRollout => baselines::attention_rollout(trace),
        Method::AttnLast => Ok(baselines::attention_last(trace)),
        Method::Random => Err(CaligError::Contract(
            "random ranking has no single score vector; handled separately".into(),
        )),
    }
}

fn score_record(
    model: &EncoderModel,
    ex: &RationaleExample,
    scores: &[f64],
    target: usize,
    special: &[bool],
    want_auc: bool,
    config: &BenchmarkConfig,
) -> Result<PerMethodRecord> {
    // Both protocols rank tokens by attribution magnitude: signed maps mark
    // opposing evidence negative, and a strongly negative token is still
    // important evidence for the overlap metric and a critical token for the
    // perturbation curves. Attention-based scores are nonnegative, so the
    // ranking is unchanged for them.
    let magnitude: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
    let mut f1 = Vec::with_capacity(config.f1_percents.len());
    if let Some(mask) = &ex.rationale_mask {
        for &p in &config.f1_percents {
            f1.push((p, token_f1(&magnitude, mask, special, p)?));
        }
    }
    let (insertion_auc, deletion_auc) = if want_auc {
        (
            Some(perturbation_auc(
                model,
                &ex.token_ids,
                &magnitude,
                PerturbMode::Insertion,
                target,
            )?),
            Some(perturbation_auc(
                model,
                &ex.token_ids,
                &magnitude,
                PerturbMode::Deletion,
                target,
            )?),
        )
    } else {
        (None, None)
    };
    Ok(PerMethodRecord { f1, insertion_auc, deletion_auc })
}

fn random_record(
    model: &EncoderModel,
    ex: &RationaleExample,
    idx: usize,
    target: usize,
    special: &[bool],
    want_auc: bool,
    config: &BenchmarkConfig,
) -> Result<PerMethodRecord> {
    let mut rng =
        ChaCha20Rng::seed_from_u64(config.seed ^ (idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let s = ex.token_ids.len();
    let mut f1_sums = vec![0.0; config.f1_percents.len()];
    let mut ins_sum = 0.0;
    let mut del_sum = 0.0;
    for _ in 0..config.random_shuffles {
        let mut ranks: Vec<f64> = (0..s).map(|i| i as f64).collect();
        ranks.shuffle(&mut rng);
        if let Some(mask) = &ex.rationale_mask {
            for (slot, &p) in f1_sums.iter_mut().zip(&config.f1_percents) {
                *slot += token_f1(&ranks, mask, special, p)?;
            }
        }
        if want_auc {
            ins_sum +=
                perturbation_auc(model, &ex.token_ids, &ranks, PerturbMode::Insertion, target)?;
            del_sum +=
                perturbation_auc(model, &ex.token_ids, &ranks, PerturbMode::Deletion, target)?;
        }
    }
    let r = config.random_shuffles as f64;
    let f1 = if ex.rationale_mask.is_some() {
        config.f1_percents.iter().zip(&f1_sums).map(|(&p, &sum)| (p, sum / r)).collect()
    } else {
        Vec::new()
    };
    Ok(PerMethodRecord {
        f1,
        insertion_auc: want_auc.then_some(ins_sum / r),
        deletion_auc: want_auc.then_some(del_sum / r),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn format_p(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticConfig};

    #[test]
    fn report_structure_and_determinism() {
        let syn = SyntheticConfig {
            n_examples: 6,
            seq_len: 12,
            seed: 4,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&syn).unwrap();
        let model =
            crate::encoder::EncoderModel::init(syn.encoder_config(2, 2, 8), 19).unwrap();
        let cfg = BenchmarkConfig {
            steps: 4,
            auc_examples: Some(2),
            random_shuffles: 3,
            ..BenchmarkConfig::default()
        };
        let r1 = run_benchmark(&model, &data, &cfg).unwrap();
        let r2 = run_benchmark(&model, &data, &cfg).unwrap();

        // One F1 row per (method, p).
        for m in &cfg.methods {
            for &p in &cfg.f1_percents {
                assert!(
                    r1.row(*m, "token_f1", &format_p(p)).is_some(),
                    "missing row {} @ {p}",
                    m.name()
                );
            }
            assert!(r1.row(*m, "auc", "insertion").is_some());
            assert!(r1.row(*m, "auc", "deletion").is_some());
        }
        assert!(r1.failures.is_empty());

        // Metric values identical across reruns.
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.mean, b.mean, "{} {} {}", a.method, a.metric, a.p_or_mode);
            assert_eq!(a.std, b.std);
            assert_eq!(a.n, b.n);
        }

        // CSV has header plus one line per row.
        let csv = r1.to_csv();
        assert_eq!(csv.lines().count(), 1 + r1.rows.len());
    }

    #[test]
    fn report_mean_is_order_invariant() {
        let syn = SyntheticConfig {
            n_examples: 5,
            seq_len: 10,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let mut data = generate_synthetic(&syn).unwrap();
        let model =
            crate::encoder::EncoderModel::init(syn.encoder_config(1, 2, 8), 23).unwrap();
        let cfg = BenchmarkConfig {
            methods: vec![Method::Ixg, Method::AttnLast],
            steps: 2,
            auc_examples: Some(0),
            include_per_example: false,
            ..BenchmarkConfig::default()
        };
        let r1 = run_benchmark(&model, &data, &cfg).unwrap();
        data.reverse();
        let r2 = run_benchmark(&model, &data, &cfg).unwrap();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert!((a.mean - b.mean).abs() < 1e-12);
        }
    }
}
