//! Command-line surface: train the synthetic model, explain inputs, run
//! benchmarks, render heatmaps, and profile runtime scaling.
//!
//! Exit codes: 0 success, 2 usage/config, 3 i/o or file-format, 4 numeric
//! divergence, 5 acceptance-check failure.

use crate::attribution::{
    explain, AttributionConfig, AttributionResult, Normalization, RelevancePairing,
};
use crate::encoder::{
    load_checkpoint, save_checkpoint, train_synthetic, EncoderModel, TrainConfig,
};
use crate::error::{CaligError, Result};
use crate::eval::{
    generate_synthetic, read_dataset, run_benchmark, write_dataset, BenchmarkConfig, Method,
    MetricReport, MetricRow, SyntheticConfig,
};
use crate::render::render_heatmap;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_ACCEPTANCE: i32 = 5;

pub fn exit_code_for(err: &CaligError) -> i32 {
    match err {
        CaligError::Io(_) | CaligError::Parse { .. } | CaligError::Integrity { .. } => EXIT_IO,
        CaligError::Training { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "calig", version, about = "Layer-wise integrated-gradient attribution for transformer encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum NormArg {
    #[value(name = "symmetric_minmax")]
    SymmetricMinmax,
    #[value(name = "l1")]
    L1,
}

impl From<NormArg> for Normalization {
    fn from(v: NormArg) -> Self {
        match v {
            NormArg::SymmetricMinmax => Normalization::SymmetricMinMax,
            NormArg::L1 => Normalization::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum MethodArg {
    Calig,
    #[value(name = "caig_last")]
    CaigLast,
    Ig,
    Ixg,
    #[value(name = "attn_rollout")]
    AttnRollout,
    #[value(name = "attn_last")]
    AttnLast,
    Random,
}

impl From<MethodArg> for Method {
    fn from(v: MethodArg) -> Self {
        match v {
            MethodArg::Calig => Method::Calig,
            MethodArg::CaigLast => Method::CaigLast,
            MethodArg::Ig => Method::Ig,
            MethodArg::Ixg => Method::Ixg,
            MethodArg::AttnRollout => Method::AttnRollout,
            MethodArg::AttnLast => Method::AttnLast,
            MethodArg::Random => Method::Random,
        }
    }
}

/// Flags shared by the attribution-driven commands, mirroring the defaults
/// of the reference configuration (50 steps, lambda 1, symmetric min-max
/// normalization, full rollout, mean head pooling).
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttributionArgs {
    /// Interpolation steps m.
    #[arg(long = "steps", default_value_t = 50)]
    pub steps: usize,
    /// Fusion coefficient in [0, 1].
    #[arg(long = "lambda", default_value_t = 1.0)]
    pub lambda: f64,
    /// Relevance normalization scheme. Defaults to symmetric_minmax for
    /// explain/profile and to l1 for benchmark (the quantitative protocol).
    #[arg(long = "norm", value_enum)]
    pub norm: Option<NormArg>,
    /// Rollout block range "a:b" (1-based, inclusive); all blocks if omitted.
    #[arg(long = "layers")]
    pub layers: Option<String>,
    /// Target class; the predicted class if omitted.
    #[arg(long = "class")]
    pub class: Option<usize>,
}

impl AttributionArgs {
    fn rollout_range(&self) -> Result<Option<(usize, usize)>> {
        match &self.layers {
            None => Ok(None),
            Some(s) => {
                let (a, b) = s.split_once(':').ok_or_else(|| {
                    CaligError::Config(format!("--layers expects \"a:b\", got \"{s}\""))
                })?;
                let a: usize = a.trim().parse().map_err(|_| {
                    CaligError::Config(format!("bad rollout range start in \"{s}\""))
                })?;
                let b: usize = b.trim().parse().map_err(|_| {
                    CaligError::Config(format!("bad rollout range end in \"{s}\""))
                })?;
                Ok(Some((a, b)))
            }
        }
    }

    fn normalization(&self, command_default: Normalization) -> Normalization {
        self.norm.map(Normalization::from).unwrap_or(command_default)
    }

    fn to_config(&self, target_class: usize) -> Result<AttributionConfig> {
        Ok(AttributionConfig {
            steps: self.steps,
            lambda: self.lambda,
            normalization: self.normalization(Normalization::SymmetricMinMax),
            rollout_range: self.rollout_range()?,
            ..AttributionConfig::new(target_class)
        })
    }
}

/// Synthetic-task and encoder-size flags shared by train and benchmark.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TaskArgs {
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 24)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 2)]
    pub keywords_per_class: usize,
    #[arg(long, default_value_t = 2000)]
    pub train_examples: usize,
    #[arg(long, default_value_t = 500)]
    pub test_examples: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
}

impl TaskArgs {
    fn synthetic_config(&self, seed: u64, n_examples: usize) -> SyntheticConfig {
        SyntheticConfig {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            num_classes: self.num_classes,
            keywords_per_class: self.keywords_per_class,
            n_examples,
            seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the synthetic-task classifier and write a checkpoint.
    Train {
        #[arg(long = "out")]
        out: PathBuf,
        #[arg(long = "seed", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Explain one input and write the attribution document plus a heatmap.
    Explain {
        #[arg(long = "model")]
        model: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
        /// Comma-separated token ids (must start with the cls token).
        #[arg(long = "tokens", conflicts_with = "data")]
        tokens: Option<String>,
        /// Dataset file to draw the input from.
        #[arg(long = "data", requires = "index")]
        data: Option<PathBuf>,
        /// Example index into --data.
        #[arg(long = "index")]
        index: Option<usize>,
        /// Explanation method.
        #[arg(long = "method", value_enum, default_value = "calig")]
        method: MethodArg,
        /// Embed the per-block fused matrices in the document.
        #[arg(long = "full", default_value_t = false)]
        full: bool,
        #[arg(long = "seed", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        attribution: AttributionArgs,
    },
    /// Train per-seed models, run the metric suite, write per-seed and
    /// aggregate reports, and evaluate the directional checks.
    Benchmark {
        #[arg(long = "out")]
        out: PathBuf,
        /// Reuse a trained checkpoint instead of training per seed.
        #[arg(long = "model")]
        model: Option<PathBuf>,
        /// Evaluate an existing dataset instead of generating one.
        #[arg(long = "data")]
        data: Option<PathBuf>,
        #[arg(long = "seed", default_value_t = 0)]
        seed: u64,
        #[arg(long = "repeats", default_value_t = 10)]
        repeats: usize,
        /// Methods to evaluate (defaults to all, including random).
        #[arg(long = "method", value_enum)]
        methods: Vec<MethodArg>,
        /// Cap on examples given the perturbation curves.
        #[arg(long = "auc-examples", default_value_t = 50)]
        auc_examples: usize,
        /// Cap on test examples the metric suite evaluates (all if omitted).
        #[arg(long = "eval-examples")]
        eval_examples: Option<usize>,
        #[arg(long = "skip-checks", default_value_t = false)]
        skip_checks: bool,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        attribution: AttributionArgs,
    },
    /// Re-render the heatmap from a saved attribution document.
    Render {
        /// Attribution document written by `explain`.
        #[arg(long = "attribution")]
        attribution: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
    },
    /// Time the pipeline across depth and step grids and fit the scaling law.
    Profile {
        #[arg(long = "out")]
        out: PathBuf,
        #[arg(long = "seed", default_value_t = 0)]
        seed: u64,
        /// Encoder depths to time.
        #[arg(long = "grid-layers", value_delimiter = ',', default_values_t = vec![2usize, 4, 6, 8])]
        grid_layers: Vec<usize>,
        /// Step counts to time.
        #[arg(long = "grid-steps", value_delimiter = ',', default_values_t = vec![25usize, 50, 100])]
        grid_steps: Vec<usize>,
        /// Repetitions per grid point (median is reported).
        #[arg(long = "reps", default_value_t = 3)]
        reps: usize,
        #[command(flatten)]
        attribution: AttributionArgs,
    },
}

/// Full invocation echo embedded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub args: serde_json::Value,
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// CSV artifacts carry the run config as a leading `#` comment line.
fn write_csv(path: &Path, run_config: &RunConfig, csv: &str) -> Result<()> {
    let header = format!("# run_config: {}\n", serde_json::to_string(run_config)?);
    fs::write(path, header + csv)?;
    Ok(())
}

/// Execute a parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { out, seed, task } => cmd_train(&out, seed, &task),
        Command::Explain {
            model,
            out,
            tokens,
            data,
            index,
            method,
            full,
            seed,
            attribution,
        } => cmd_explain(&model, &out, tokens, data, index, method, full, seed, &attribution),
        Command::Benchmark {
            out,
            model,
            data,
            seed,
            repeats,
            methods,
            auc_examples,
            eval_examples,
            skip_checks,
            task,
            attribution,
        } => cmd_benchmark(
            &out,
            model,
            data,
            seed,
            repeats,
            methods,
            auc_examples,
            eval_examples,
            skip_checks,
            &task,
            &attribution,
        ),
        Command::Render { attribution, out } => cmd_render(&attribution, &out),
        Command::Profile { out, seed, grid_layers, grid_steps, reps, attribution } => {
            cmd_profile(&out, seed, &grid_layers, &grid_steps, reps, &attribution)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_config(command: &str, seed: u64, args: serde_json::Value) -> RunConfig {
    RunConfig { command: command.to_string(), seed, args }
}

// ---- train ---------------------------------------------------------------

#[derive(Serialize)]
struct TrainArtifact<'a> {
    run_config: &'a RunConfig,
    train_log: &'a crate::encoder::TrainLog,
    train_accuracy: f64,
    test_accuracy: f64,
    model_fingerprint: String,
}

fn cmd_train(out: &Path, seed: u64, task: &TaskArgs) -> Result<i32> {
    ensure_out_dir(out)?;
    let rc = run_config("train", seed, serde_json::to_value(task)?);

    let syn_train = task.synthetic_config(seed, task.train_examples);
    let syn_test = task.synthetic_config(seed ^ 0x7e57, task.test_examples);
    let train_set = generate_synthetic(&syn_train)?;
    let test_set = generate_synthetic(&syn_test)?;

    let enc_cfg = syn_train.encoder_config(task.num_layers, task.num_heads, task.hidden_dim);
    let pairs: Vec<(Vec<usize>, usize)> =
        train_set.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
    let hp = TrainConfig { epochs: task.epochs, learning_rate: task.learning_rate, seed };
    let (model, log) = train_synthetic(&enc_cfg, &pairs, &hp)?;

    let test_pairs: Vec<(Vec<usize>, usize)> =
        test_set.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
    let test_accuracy = crate::encoder::accuracy(&model, &test_pairs)?;

    save_checkpoint(&model, &out.join("model.ckpt"))?;
    write_dataset(&out.join("train.jsonl"), &train_set)?;
    write_dataset(&out.join("test.jsonl"), &test_set)?;
    write_json(
        &out.join("train_log.json"),
        &TrainArtifact {
            run_config: &rc,
            train_log: &log,
            train_accuracy: log.final_train_accuracy,
            test_accuracy,
            model_fingerprint: model.fingerprint(),
        },
    )?;
    println!(
        "trained {} steps, train accuracy {:.4}, test accuracy {:.4}",
        log.steps, log.final_train_accuracy, test_accuracy
    );
    Ok(EXIT_OK)
}

// ---- explain ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ExplainArtifact {
    run_config: RunConfig,
    result: AttributionResult,
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    model_path: &Path,
    out: &Path,
    tokens: Option<String>,
    data: Option<PathBuf>,
    index: Option<usize>,
    method: MethodArg,
    full: bool,
    seed: u64,
    attribution: &AttributionArgs,
) -> Result<i32> {
    ensure_out_dir(out)?;
    if tokens.is_none() && data.is_none() {
        return Err(CaligError::Config("explain needs --tokens or --data".into()));
    }
    let model = load_checkpoint(model_path)?;
    let token_ids: Vec<usize> = match (&tokens, &data) {
        (Some(t), _) => t
            .split(',')
            .map(|v| {
                v.trim().parse::<usize>().map_err(|_| {
                    CaligError::Input(format!("bad token id '{}' in --tokens", v.trim()))
                })
            })
            .collect::<Result<_>>()?,
        (None, Some(path)) => {
            let examples = read_dataset(path)?;
            let idx = index.unwrap_or(0);
            let ex = examples.get(idx).ok_or_else(|| {
                CaligError::Input(format!("index {idx} out of range ({} examples)", examples.len()))
            })?;
            ex.token_ids.clone()
        }
        (None, None) => {
            return Err(CaligError::Config("explain needs --tokens or --data".into()))
        }
    };

    let trace = model.forward(&token_ids)?;
    let target = attribution.class.unwrap_or(trace.predicted_class);
    let mut cfg = attribution.to_config(target)?;
    let bench_cfg = BenchmarkConfig {
        steps: cfg.steps,
        lambda: cfg.lambda,
        normalization: cfg.normalization,
        ..BenchmarkConfig::default()
    };

    // The document always carries the full pipeline output; non-default
    // methods additionally overwrite token_scores with their ranking.
    let mut result = match Method::from(method) {
        Method::Calig => explain(&model, &token_ids, &cfg)?,
        Method::CaigLast => {
            let layers = model.config.num_layers;
            cfg.pairing = RelevancePairing::Fixed(layers);
            cfg.rollout_range = Some((layers, layers));
            explain(&model, &token_ids, &cfg)?
        }
        m @ (Method::Ig | Method::Ixg | Method::AttnRollout | Method::AttnLast) => {
            let mut r = explain(&model, &token_ids, &cfg)?;
            r.token_scores =
                crate::eval::method_scores(&model, &trace, m, target, &bench_cfg)?;
            r
        }
        Method::Random => {
            return Err(CaligError::Config("random is a benchmark-only baseline".into()))
        }
    };
    result.config = cfg;

    let rc = run_config(
        "explain",
        seed,
        serde_json::json!({
            "model": model_path,
            "method": Method::from(method).name(),
            "attribution": attribution,
            "tokens": token_ids,
        }),
    );
    let artifact = ExplainArtifact { run_config: rc, result };
    let mut doc = serde_json::to_value(&artifact)?;
    if !full {
        doc["result"].as_object_mut().unwrap().remove("fused");
    }
    fs::write(out.join("attribution.json"), serde_json::to_string_pretty(&doc)?)?;

    let html = heatmap_from_artifact(&artifact)?;
    fs::write(out.join("heatmap.html"), html)?;
    println!(
        "explained {} tokens, predicted class {}, scores written to {}",
        token_ids.len(),
        trace.predicted_class,
        out.display()
    );
    Ok(EXIT_OK)
}

fn heatmap_from_artifact(artifact: &ExplainArtifact) -> Result<String> {
    let r = &artifact.result;
    let labels: Vec<String> = r.token_ids.iter().map(|t| format!("tok{t}")).collect();
    let norm = match r.config.normalization {
        Normalization::SymmetricMinMax => "symmetric_minmax",
        Normalization::L1 => "l1",
    };
    let caption = format!(
        "lambda={} steps={} norm={} class={} seed={} model={}",
        r.config.lambda,
        r.config.steps,
        norm,
        r.config.target_class,
        artifact.run_config.seed,
        r.model_fingerprint
    );
    Ok(render_heatmap(&labels, &r.token_scores, &r.special_mask, &caption))
}

// ---- benchmark -------------------------------------------------------------

#[derive(Serialize)]
struct SeedReportArtifact<'a> {
    run_config: &'a RunConfig,
    seed: u64,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    report: &'a MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Serialize)]
struct AggregateArtifact<'a> {
    run_config: &'a RunConfig,
    seeds: Vec<u64>,
    rows: &'a [MetricRow],
    accuracies: &'a [Option<f64>],
    checks: &'a [DirectionalCheck],
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    out: &Path,
    model_path: Option<PathBuf>,
    data_path: Option<PathBuf>,
    seed: u64,
    repeats: usize,
    methods: Vec<MethodArg>,
    auc_examples: usize,
    eval_examples: Option<usize>,
    skip_checks: bool,
    task: &TaskArgs,
    attribution: &AttributionArgs,
) -> Result<i32> {
    ensure_out_dir(out)?;
    if repeats == 0 {
        return Err(CaligError::Config("--repeats must be >= 1".into()));
    }
    let methods: Vec<Method> = if methods.is_empty() {
        Method::all()
    } else {
        methods.into_iter().map(Method::from).collect()
    };
    let rc = run_config(
        "benchmark",
        seed,
        serde_json::json!({
            "model": model_path,
            "data": data_path,
            "repeats": repeats,
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "auc_examples": auc_examples,
            "eval_examples": eval_examples,
            "task": task,
            "attribution": attribution,
        }),
    );

    let fixed_model = model_path.as_deref().map(load_checkpoint).transpose()?;
    let fixed_data = data_path.as_deref().map(read_dataset).transpose()?;

    let mut seed_rows: Vec<Vec<MetricRow>> = Vec::new();
    let mut accuracies: Vec<Option<f64>> = Vec::new();
    let mut seeds = Vec::new();
    for rep in 0..repeats {
        let rep_seed = seed.wrapping_add(rep as u64);
        seeds.push(rep_seed);

        let test_set = match &fixed_data {
            Some(d) => d.clone(),
            None => generate_synthetic(&task.synthetic_config(seed ^ 0x7e57, task.test_examples))?,
        };
        let (model, train_acc, test_acc) = match &fixed_model {
            Some(m) => (m.clone(), None, None),
            None => {
                let syn_train = task.synthetic_config(seed, task.train_examples);
                let train_set = generate_synthetic(&syn_train)?;
                let enc_cfg =
                    syn_train.encoder_config(task.num_layers, task.num_heads, task.hidden_dim);
                let pairs: Vec<(Vec<usize>, usize)> =
                    train_set.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
                let hp = TrainConfig {
                    epochs: task.epochs,
                    learning_rate: task.learning_rate,
                    seed: rep_seed,
                };
                let (model, log) = train_synthetic(&enc_cfg, &pairs, &hp)?;
                let test_pairs: Vec<(Vec<usize>, usize)> =
                    test_set.iter().map(|e| (e.token_ids.clone(), e.label)).collect();
                let acc = crate::encoder::accuracy(&model, &test_pairs)?;
                (model, Some(log.final_train_accuracy), Some(acc))
            }
        };

        let bench_cfg = BenchmarkConfig {
            methods: methods.clone(),
            steps: attribution.steps,
            lambda: attribution.lambda,
            normalization: attribution.normalization(Normalization::L1),
            auc_examples: Some(auc_examples),
            seed: rep_seed,
            ..BenchmarkConfig::default()
        };
        let eval_set = match eval_examples {
            Some(n) => &test_set[..n.min(test_set.len())],
            None => &test_set[..],
        };
        let report = run_benchmark(&model, eval_set, &bench_cfg)?;

        write_json(
            &out.join(format!("report_seed{rep_seed}.json")),
            &SeedReportArtifact {
                run_config: &rc,
                seed: rep_seed,
                train_accuracy: train_acc,
                test_accuracy: test_acc,
                report: &report,
            },
        )?;
        write_csv(&out.join(format!("report_seed{rep_seed}.csv")), &rc, &report.to_csv())?;
        if let Some(acc) = test_acc {
            println!("seed {rep_seed}: test accuracy {acc:.4}");
        }
        accuracies.push(test_acc);
        seed_rows.push(report.rows);
    }

    let agg_rows = aggregate_rows(&seed_rows);
    let checks = if skip_checks {
        Vec::new()
    } else {
        directional_checks(&agg_rows, &accuracies)
    };
    write_json(
        &out.join("aggregate.json"),
        &AggregateArtifact {
            run_config: &rc,
            seeds,
            rows: &agg_rows,
            accuracies: &accuracies,
            checks: &checks,
        },
    )?;
    let mut csv = String::from("method,metric,p_or_mode,mean,std,n\n");
    for row in &agg_rows {
        csv.push_str(&format!(
            "{},{},{},{:.10},{:.10},{}\n",
            row.method, row.metric, row.p_or_mode, row.mean, row.std, row.n
        ));
    }
    write_csv(&out.join("aggregate.csv"), &rc, &csv)?;

    let mut all_passed = true;
    for check in &checks {
        println!("check {} ... {} ({})", check.name, if check.passed { "pass" } else { "FAIL" }, check.detail);
        all_passed &= check.passed;
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_ACCEPTANCE })
}

/// Mean-of-means and std-of-means over per-seed rows.
pub fn aggregate_rows(seed_rows: &[Vec<MetricRow>]) -> Vec<MetricRow> {
    let mut out: Vec<MetricRow> = Vec::new();
    let Some(first) = seed_rows.first() else {
        return out;
    };
    for template in first {
        let values: Vec<f64> = seed_rows
            .iter()
            .filter_map(|rows| {
                rows.iter()
                    .find(|r| {
                        r.method == template.method
                            && r.metric == template.metric
                            && r.p_or_mode == template.p_or_mode
                    })
                    .map(|r| r.mean)
            })
            .collect();
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(MetricRow {
            method: template.method.clone(),
            metric: template.metric.clone(),
            p_or_mode: template.p_or_mode.clone(),
            mean,
            std,
            n,
        });
    }
    out
}

fn find_mean(rows: &[MetricRow], method: &str, metric: &str, p_or_mode: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.method == method && r.metric == metric && r.p_or_mode == p_or_mode)
        .map(|r| r.mean)
}

/// Directional reproduction checks evaluated on aggregate rows.
pub fn directional_checks(
    rows: &[MetricRow],
    accuracies: &[Option<f64>],
) -> Vec<DirectionalCheck> {
    let mut checks = Vec::new();
    let calig_f1 = find_mean(rows, "calig", "token_f1", "20");
    let ig_f1 = find_mean(rows, "ig", "token_f1", "20");
    let rollout_f1 = find_mean(rows, "attn_rollout", "token_f1", "20");
    let random_f1 = find_mean(rows, "random", "token_f1", "20");

    if let (Some(c), Some(g)) = (calig_f1, ig_f1) {
        checks.push(DirectionalCheck {
            name: "f1_calig_ge_ig_at_p20".into(),
            passed: c >= g,
            detail: format!("calig {c:.4} vs ig {g:.4}"),
        });
    }
    if let (Some(c), Some(r)) = (calig_f1, rollout_f1) {
        checks.push(DirectionalCheck {
            name: "f1_calig_ge_attn_rollout_at_p20".into(),
            passed: c >= r,
            detail: format!("calig {c:.4} vs attn_rollout {r:.4}"),
        });
    }
    if let (Some(c), Some(r)) = (calig_f1, random_f1) {
        checks.push(DirectionalCheck {
            name: "f1_calig_ge_3x_random_at_p20".into(),
            passed: c >= 3.0 * r,
            detail: format!("calig {c:.4} vs 3x random {:.4}", 3.0 * r),
        });
    }
    let calig_ins = find_mean(rows, "calig", "auc", "insertion");
    let random_ins = find_mean(rows, "random", "auc", "insertion");
    if let (Some(c), Some(r)) = (calig_ins, random_ins) {
        checks.push(DirectionalCheck {
            name: "insertion_auc_calig_gt_random_plus_margin".into(),
            passed: c > r + 0.05,
            detail: format!("calig {c:.4} vs random {r:.4} + 0.05"),
        });
    }
    let calig_del = find_mean(rows, "calig", "auc", "deletion");
    let random_del = find_mean(rows, "random", "auc", "deletion");
    if let (Some(c), Some(r)) = (calig_del, random_del) {
        checks.push(DirectionalCheck {
            name: "deletion_auc_calig_lt_random_minus_margin".into(),
            passed: c < r - 0.05,
            detail: format!("calig {c:.4} vs random {r:.4} - 0.05"),
        });
    }
    let trained: Vec<f64> = accuracies.iter().flatten().copied().collect();
    if !trained.is_empty() {
        let min = trained.iter().cloned().fold(f64::INFINITY, f64::min);
        checks.push(DirectionalCheck {
            name: "per_seed_test_accuracy_ge_0.95".into(),
            passed: min >= 0.95,
            detail: format!("minimum over seeds {min:.4}"),
        });
    }
    checks
}

// ---- render ----------------------------------------------------------------

fn cmd_render(attribution_path: &Path, out: &Path) -> Result<i32> {
    ensure_out_dir(out)?;
    let raw = fs::read_to_string(attribution_path)?;
    let artifact: ExplainArtifact =
        serde_json::from_str(&raw).map_err(|e| CaligError::Parse {
            offset: e.column().saturating_sub(1),
            detail: e.to_string(),
        })?;
    let html = heatmap_from_artifact(&artifact)?;
    fs::write(out.join("heatmap.html"), html)?;
    println!("rendered {} tokens to {}", artifact.result.token_ids.len(), out.display());
    Ok(EXIT_OK)
}

// ---- profile ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub kind: String,
    pub value: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileDiagnostics {
    pub points: Vec<ProfilePoint>,
    pub layers_fit_r2: f64,
    pub steps_fit_r2: f64,
    /// caig_last / calig cost ratio at the largest depth (single-layer
    /// variant should cost roughly 1/L of the full pipeline).
    pub last_layer_cost_ratio: f64,
}

fn cmd_profile(
    out: &Path,
    seed: u64,
    grid_layers: &[usize],
    grid_steps: &[usize],
    reps: usize,
    attribution: &AttributionArgs,
) -> Result<i32> {
    ensure_out_dir(out)?;
    let rc = run_config(
        "profile",
        seed,
        serde_json::json!({
            "grid_layers": grid_layers,
            "grid_steps": grid_steps,
            "reps": reps,
            "attribution": attribution,
        }),
    );
    let diag = profile_scaling(seed, grid_layers, grid_steps, reps, attribution.steps)?;

    let mut csv = String::from("kind,value,median_seconds\n");
    for p in &diag.points {
        csv.push_str(&format!("{},{},{:.6}\n", p.kind, p.value, p.median_seconds));
    }
    write_csv(&out.join("profile.csv"), &rc, &csv)?;
    write_json(&out.join("profile.json"), &serde_json::json!({
        "run_config": rc,
        "diagnostics": diag,
    }))?;
    println!(
        "layers fit R^2 = {:.4}, steps fit R^2 = {:.4}, last-layer cost ratio = {:.3}",
        diag.layers_fit_r2, diag.steps_fit_r2, diag.last_layer_cost_ratio
    );
    Ok(EXIT_OK)
}

/// Time `explain` across the depth grid (fixed steps) and the step grid
/// (fixed depth), then fit lines.
pub fn profile_scaling(
    seed: u64,
    grid_layers: &[usize],
    grid_steps: &[usize],
    reps: usize,
    fixed_steps: usize,
) -> Result<ProfileDiagnostics> {
    let syn = SyntheticConfig { n_examples: 1, seed, ..SyntheticConfig::default() };
    let example = generate_synthetic(&syn)?.remove(0);
    let mut points = Vec::new();

    let time_explain = |model: &EncoderModel, cfg: &AttributionConfig| -> Result<f64> {
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps.max(1) {
            let started = Instant::now();
            explain(model, &example.token_ids, cfg)?;
            times.push(started.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(times[times.len() / 2])
    };

    let mut layer_times = Vec::new();
    for &layers in grid_layers {
        let model = EncoderModel::init(syn.encoder_config(layers, 4, 32), seed)?;
        let cfg = AttributionConfig { steps: fixed_steps, ..AttributionConfig::new(0) };
        let t = time_explain(&model, &cfg)?;
        points.push(ProfilePoint { kind: "layers".into(), value: layers, median_seconds: t });
        layer_times.push((layers as f64, t));
    }

    let deepest = *grid_layers.iter().max().unwrap_or(&2);
    // The step grid runs on a 4-layer model so every point is large enough
    // to time stably.
    let mut step_times = Vec::new();
    let step_model = EncoderModel::init(syn.encoder_config(4, 4, 32), seed)?;
    for &steps in grid_steps {
        let cfg = AttributionConfig { steps, ..AttributionConfig::new(0) };
        let t = time_explain(&step_model, &cfg)?;
        points.push(ProfilePoint { kind: "steps".into(), value: steps, median_seconds: t });
        step_times.push((steps as f64, t));
    }

    // Last-layer variant cost at the deepest model.
    let deep_model = EncoderModel::init(syn.encoder_config(deepest, 4, 32), seed)?;
    let full_cfg = AttributionConfig { steps: fixed_steps, ..AttributionConfig::new(0) };
    let last_cfg = AttributionConfig {
        steps: fixed_steps,
        pairing: RelevancePairing::Fixed(deepest),
        rollout_range: Some((deepest, deepest)),
        ..AttributionConfig::new(0)
    };
    let full_t = time_explain(&deep_model, &full_cfg)?;
    let last_t = time_explain(&deep_model, &last_cfg)?;

    Ok(ProfileDiagnostics {
        points,
        layers_fit_r2: linear_fit_r2(&layer_times),
        steps_fit_r2: linear_fit_r2(&step_times),
        last_layer_cost_ratio: last_t / full_t,
    })
}

/// R-squared of the least-squares line through `(x, y)` points.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 1.0;
    }
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - mean_y) * (y - mean_y)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|(x, y)| {
            let pred = intercept + slope * x;
            (y - pred) * (y - pred)
        })
        .sum();
    1.0 - ss_res / syy
}
