//! Experiment configuration and the commands behind the `focal` binary.
//!
//! Every command validates its whole configuration before doing any work,
//! derives all randomness from one root seed, and writes into an output
//! directory:
//!
//! ```text
//! summary.json   results; wall-clock figures live under "timing" only
//! steps.jsonl    one StepLog per optimizer step (training commands)
//! report.csv     tabular results (report.json with --format json)
//! ckpt/step_N/   checkpoints (training commands)
//! trials/NAME/   one sub-run per sweep trial
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::TemperaturePolicy;
use crate::checkpoint::{latest_checkpoint, load_checkpoint};
use crate::data::tasks::{self, score_task, TaskInstance, TaskKind};
use crate::data::{pack, read_corpus, Batch, PackedDataset, SyntheticMix, TokenStream, BYTE_VOCAB};
use crate::diagnostics::{compare_policies, render_report, Probe, ReportFormat};
use crate::error::{FocalError, Result};
use crate::model::{count_params, Model, ModelConfig};
use crate::optim::TrainConfig;
use crate::seed::derive_seed;
use crate::tensor::{Precision, Scalar};
use crate::train::{evaluate_loss, StepLog, Trainer};

/// Overrides applied on top of a named preset (`toy` or one of the
/// reference sizes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ffn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_embeddings: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_eps: Option<f64>,
}

fn default_preset() -> String {
    "toy".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: default_preset(),
            n_layers: None,
            d_model: None,
            n_heads: None,
            d_ffn: None,
            vocab_size: None,
            max_context: None,
            rope_theta: None,
            tie_embeddings: None,
            norm_eps: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, temperature: TemperaturePolicy, seed: u64) -> Result<ModelConfig> {
        let mut c = if self.preset == "toy" {
            ModelConfig::toy()
        } else {
            ModelConfig::preset(&self.preset)?
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        apply!(
            n_layers,
            d_model,
            n_heads,
            d_ffn,
            vocab_size,
            max_context,
            rope_theta,
            tie_embeddings,
            norm_eps
        );
        c.temperature = temperature;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

/// Where training tokens come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Generated filler prose mixed with key-value recall documents.
    Synthetic {
        /// Defaults to exactly one pass: (total_steps + val_batches) batches.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_tokens: Option<usize>,
        #[serde(default = "default_kv_fraction")]
        kv_fraction: f64,
        #[serde(default = "default_kv_min")]
        kv_min_pairs: usize,
        #[serde(default = "default_kv_max")]
        kv_max_pairs: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kv_queries: Option<usize>,
    },
    /// A file or directory of documents, optionally mixed with recall
    /// documents.
    Corpus {
        path: PathBuf,
        #[serde(default)]
        kv_fraction: f64,
        #[serde(default = "default_kv_min")]
        kv_min_pairs: usize,
        #[serde(default = "default_kv_max")]
        kv_max_pairs: usize,
    },
}

fn default_kv_fraction() -> f64 {
    0.5
}
fn default_kv_min() -> usize {
    2
}
fn default_kv_max() -> usize {
    6
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            total_tokens: None,
            kv_fraction: default_kv_fraction(),
            kv_min_pairs: default_kv_min(),
            kv_max_pairs: default_kv_max(),
            kv_queries: None,
        }
    }
}

/// Probe set used for task accuracy after training and for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default = "default_n_probes")]
    pub n_probes: usize,
    /// Key-value pairs per recall probe.
    #[serde(default = "default_probe_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Trace at most this many final query rows per head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_limit: Option<usize>,
}

fn default_n_probes() -> usize {
    20
}
fn default_probe_pairs() -> usize {
    4
}
fn default_top_k() -> usize {
    8
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            n_probes: default_n_probes(),
            n_pairs: default_probe_pairs(),
            top_k: default_top_k(),
            row_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub kind: TaskKind,
    /// Pairs, distractors, labels or copy length. Unset fills the context:
    /// as many pairs or as long a copy as fit; 3 distractors; 4 labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<usize>,
    #[serde(default = "default_n_probes")]
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_eval_tasks")]
    pub tasks: Vec<EvalTask>,
    /// Context-length ladder; empty means the model's maximum only.
    #[serde(default)]
    pub contexts: Vec<usize>,
}

fn default_eval_tasks() -> Vec<EvalTask> {
    vec![EvalTask {
        kind: TaskKind::KvRecall,
        difficulty: None,
        instances: default_n_probes(),
    }]
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            tasks: default_eval_tasks(),
            contexts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Trials run one after another in this process.
    #[default]
    Inline,
    /// Each trial is a child `train` process; up to `jobs` at once.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_t_values")]
    pub t_values: Vec<f64>,
    #[serde(default = "default_tau_min_values")]
    pub tau_min_values: Vec<f64>,
    #[serde(default = "default_tau_max_values")]
    pub tau_max_values: Vec<f64>,
    /// Trials per grid point; trial `i` uses root seed `seed + i`.
    #[serde(default = "default_n_seeds")]
    pub n_seeds: u64,
    #[serde(default)]
    pub mode: SweepMode,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

/// Constant-scale grid: 0.3 to 0.6 in steps of 0.1, plus the unscaled
/// reference.
pub const DEFAULT_T_VALUES: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 1.0];
pub const DEFAULT_TAU_MIN_VALUES: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
pub const DEFAULT_TAU_MAX_VALUES: [f64; 2] = [10.0, 11.31];

fn default_t_values() -> Vec<f64> {
    DEFAULT_T_VALUES.to_vec()
}
fn default_tau_min_values() -> Vec<f64> {
    DEFAULT_TAU_MIN_VALUES.to_vec()
}
fn default_tau_max_values() -> Vec<f64> {
    DEFAULT_TAU_MAX_VALUES.to_vec()
}
fn default_n_seeds() -> u64 {
    3
}
fn default_jobs() -> usize {
    1
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            t_values: default_t_values(),
            tau_min_values: default_tau_min_values(),
            tau_max_values: default_tau_max_values(),
            n_seeds: default_n_seeds(),
            mode: SweepMode::default(),
            jobs: default_jobs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Root of every seed: init, data order, evaluation and probes each get
    /// a named sub-seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub temperature: TemperaturePolicy,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    /// Overridden by `--out`, then by `FOCAL_OUT_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}

/// Concrete settings derived from an [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl ExperimentConfig {
    /// A toy-model run with `total_steps` updates; handy for tests.
    pub fn toy(total_steps: u64) -> Self {
        let mut train = TrainConfig::new(3e-3, (total_steps / 20).max(1), total_steps);
        train.batch_size = 4;
        ExperimentConfig {
            name: default_name(),
            seed: 0,
            precision: Precision::F32,
            model: ModelSection::default(),
            temperature: TemperaturePolicy::Baseline,
            train,
            data: DataSpec::default(),
            eval: EvalSpec::default(),
            probe: ProbeSpec::default(),
            sweep: SweepSpec::default(),
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| FocalError::Config(format!("config: {e}")))?;
        c.resolve()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FocalError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Validates everything and derives sub-seeds.
    pub fn resolve(&self) -> Result<Resolved> {
        self.temperature.validate()?;
        if self.train.seed != 0 {
            return Err(FocalError::Config(
                "train.seed is derived from the root seed; set `seed` instead".into(),
            ));
        }
        let model = self
            .model
            .resolve(self.temperature, derive_seed(self.seed, "init"))?;
        let data_seed = derive_seed(self.seed, "data");
        let mut train = self.train.clone();
        train.seed = data_seed;
        train.validate()?;
        if train.seq_len > model.max_context {
            return Err(FocalError::Config(format!(
                "train.seq_len {} exceeds the model context {}",
                train.seq_len, model.max_context
            )));
        }
        if model.vocab_size < BYTE_VOCAB {
            return Err(FocalError::Config(format!(
                "byte-level data needs vocab_size >= {BYTE_VOCAB}, got {}",
                model.vocab_size
            )));
        }
        for &c in &self.eval.contexts {
            if c == 0 || c > model.max_context {
                return Err(FocalError::Config(format!(
                    "eval context {c} outside 1..={}",
                    model.max_context
                )));
            }
        }
        if self.eval.tasks.iter().any(|t| t.instances == 0) || self.probe.n_probes == 0 {
            return Err(FocalError::Config(
                "instance counts must be positive".into(),
            ));
        }
        if self.probe.n_pairs == 0 || self.probe.top_k == 0 {
            return Err(FocalError::Config(
                "probe n_pairs and top_k must be positive".into(),
            ));
        }
        // probe length does not depend on the seed
        tasks::gen_kv_recall(self.probe.n_pairs, train.seq_len.min(model.max_context), 0)
            .map_err(|e| FocalError::Config(format!("probe: {e}")))?;
        for &t in &self.sweep.t_values {
            TemperaturePolicy::focal_constant(t).validate()?;
        }
        if self.sweep.n_seeds == 0 || self.sweep.jobs == 0 {
            return Err(FocalError::Config(
                "sweep n_seeds and jobs must be positive".into(),
            ));
        }
        match &self.data {
            DataSpec::Synthetic {
                kv_fraction,
                kv_min_pairs,
                kv_max_pairs,
                kv_queries,
                ..
            } => self
                .mix(*kv_fraction, *kv_min_pairs, *kv_max_pairs, *kv_queries, 0)
                .validate()?,
            DataSpec::Corpus {
                kv_fraction,
                kv_min_pairs,
                kv_max_pairs,
                ..
            } => {
                if !(0.0..1.0).contains(kv_fraction) {
                    return Err(FocalError::Config(
                        "corpus kv_fraction must lie in [0, 1)".into(),
                    ));
                }
                self.mix(0.5, *kv_min_pairs, *kv_max_pairs, None, 0)
                    .validate()?
            }
        }
        Ok(Resolved {
            model,
            train,
            data_seed,
            eval_seed: derive_seed(self.seed, "eval"),
        })
    }

    fn mix(
        &self,
        kv_fraction: f64,
        min: usize,
        max: usize,
        queries: Option<usize>,
        total: usize,
    ) -> SyntheticMix {
        let mut m = SyntheticMix::new(total);
        m.kv_fraction = kv_fraction;
        m.kv_min_pairs = min;
        m.kv_max_pairs = max;
        m.kv_queries = queries;
        m
    }

    /// Explicit `--out`, then `FOCAL_OUT_DIR`, then `out_dir`, then `runs/<name>`.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| {
                std::env::var_os("FOCAL_OUT_DIR").map(|d| PathBuf::from(d).join(&self.name))
            })
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// The config as recorded in summaries: no output location, so reruns
    /// elsewhere produce identical files.
    fn recorded(&self) -> Value {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }
}

/// Training and validation data for a resolved experiment.
pub fn prepare_data(cfg: &ExperimentConfig, r: &Resolved) -> Result<(PackedDataset, Vec<Batch>)> {
    let per_batch = r.train.batch_tokens();
    let needed = (r.train.total_steps as usize + r.train.val_batches) * per_batch + 1;
    let stream = match &cfg.data {
        DataSpec::Synthetic {
            total_tokens,
            kv_fraction,
            kv_min_pairs,
            kv_max_pairs,
            kv_queries,
        } => cfg
            .mix(
                *kv_fraction,
                *kv_min_pairs,
                *kv_max_pairs,
                *kv_queries,
                total_tokens.unwrap_or(needed),
            )
            .generate(r.data_seed)?,
        DataSpec::Corpus {
            path,
            kv_fraction,
            kv_min_pairs,
            kv_max_pairs,
        } => {
            let mut docs = read_corpus(path)?;
            if *kv_fraction > 0.0 {
                let n_kv = (docs.len() as f64 * kv_fraction / (1.0 - kv_fraction)).round() as usize;
                let seed = derive_seed(r.data_seed, "corpus_kv");
                for i in 0..n_kv {
                    let s = derive_seed(seed, &i.to_string());
                    let pairs =
                        kv_min_pairs + (s % (kv_max_pairs - kv_min_pairs + 1) as u64) as usize;
                    let doc = tasks::kv_document(pairs, pairs, s)?;
                    // strip BOS/EOS; from_shuffled_documents re-wraps
                    docs.push(crate::data::detokenize(&doc[1..doc.len() - 1]));
                }
            }
            TokenStream::from_shuffled_documents(path.display().to_string(), &docs, r.data_seed)
        }
    };
    let data = pack(
        &stream.tokens,
        r.train.seq_len,
        r.train.batch_size,
        r.data_seed,
    )?;
    data.split_validation(r.train.val_batches)
}

/// Recall probes sized for `context`.
pub fn recall_probes(spec: &ProbeSpec, context: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    (0..spec.n_probes)
        .map(|i| {
            tasks::gen_kv_recall(
                spec.n_pairs,
                context,
                derive_seed(seed, &format!("probe{i}")),
            )
        })
        .collect()
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| FocalError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FocalError::io(dir, e))
}

/// A flat table written as CSV (header row) or a JSON array of objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let csv_err = |e: csv::Error| FocalError::Data(format!("csv: {e}"));
                w.write_record(&self.columns).map_err(csv_err)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(|v| match v {
                        Value::String(s) => s.clone(),
                        Value::Null => String::new(),
                        other => other.to_string(),
                    }))
                    .map_err(csv_err)?;
                }
                let bytes = w
                    .into_inner()
                    .map_err(|e| FocalError::Data(format!("csv: {e}")))?;
                Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
            }
            ReportFormat::Json => {
                let objects: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| {
                        Value::Object(
                            self.columns
                                .iter()
                                .cloned()
                                .zip(r.iter().cloned())
                                .collect(),
                        )
                    })
                    .collect();
                Ok(serde_json::to_string_pretty(&objects)? + "\n")
            }
        }
    }
}

fn report_path(out: &Path, format: ReportFormat) -> PathBuf {
    out.join(match format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Json => "report.json",
    })
}

fn write_report(out: &Path, format: ReportFormat, text: &str) -> Result<()> {
    let path = report_path(out, format);
    std::fs::write(&path, text).map_err(|e| FocalError::io(&path, e))
}

/// Removes the `timing` member so summaries can be compared byte for byte.
pub fn strip_timing(summary: &Value) -> Value {
    let mut s = summary.clone();
    if let Some(o) = s.as_object_mut() {
        o.remove("timing");
    }
    s
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub params: u64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: f64,
    pub recall_accuracy: f64,
    /// Per-layer τ of the last step (learned policies only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_tau: Vec<crate::train::TauStats>,
}

fn append_steps(path: &Path, logs: &[StepLog]) -> Result<()> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FocalError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| FocalError::io(path, e))?;
    }
    w.flush().map_err(|e| FocalError::io(path, e))
}

/// Keeps the first `keep` records of a steps file (used when resuming).
fn truncate_steps(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| FocalError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines().take(keep as usize) {
        kept.push_str(&line.map_err(|e| FocalError::io(path, e))?);
        kept.push('\n');
    }
    std::fs::write(path, kept).map_err(|e| FocalError::io(path, e))
}

fn train_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    r: &Resolved,
    out: &Path,
    resume: bool,
    format: ReportFormat,
) -> Result<Value> {
    let start = Instant::now();
    let (data, val) = prepare_data(cfg, r)?;
    let ckpt_root = out.join("ckpt");
    let steps_path = out.join("steps.jsonl");

    let mut trainer = match latest_checkpoint(&ckpt_root)?.filter(|_| resume) {
        Some(dir) => {
            let ck = load_checkpoint::<T>(&dir)?;
            if ck.manifest.model != r.model {
                return Err(FocalError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            log::info!("resuming from {}", dir.display());
            truncate_steps(&steps_path, ck.manifest.step)?;
            Trainer::resume(ck, Some(r.train.clone()))?
        }
        None => {
            if steps_path.exists() {
                std::fs::remove_file(&steps_path).map_err(|e| FocalError::io(&steps_path, e))?;
            }
            Trainer::new(Model::<T>::new(&r.model)?, r.train.clone(), r.data_seed)?
        }
    };
    let first_step = trainer.step;
    let mut pending = Vec::new();
    let total = r.train.total_steps;
    let record = trainer.run(&data, &val, Some(&ckpt_root), &mut |log| {
        if log.step % 100 == 0 || log.step == total {
            log::info!(
                "step {}/{} loss {:.4} lr {:.3e}{}",
                log.step,
                total,
                log.train_loss,
                log.lr,
                log.val_loss
                    .map(|v| format!(" val {v:.4}"))
                    .unwrap_or_default()
            );
        }
        pending.push(log.clone());
        if pending.len() >= 100 {
            append_steps(&steps_path, &pending)?;
            pending.clear();
        }
        Ok(())
    })?;
    append_steps(&steps_path, &pending)?;

    let final_val = match record.final_val_loss {
        Some(v) => v,
        None => evaluate_loss(&trainer.model, &val)?,
    };
    let probes = recall_probes(&cfg.probe, r.train.seq_len, r.eval_seed)?;
    let accuracy = score_task(&trainer.model, &probes)?.accuracy;
    let summary = TrainSummary {
        steps: trainer.step,
        params: count_params(&r.model),
        final_train_loss: record.steps.last().map(|s| s.train_loss),
        final_val_loss: final_val,
        recall_accuracy: accuracy,
        final_tau: record
            .steps
            .last()
            .map(|s| s.tau.clone())
            .unwrap_or_default(),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let trained_tokens = (trainer.step - first_step) as f64 * r.train.batch_tokens() as f64;
    let value = json!({
        "command": "train",
        "config": cfg.recorded(),
        "results": summary,
        "timing": { "wall_time_s": elapsed, "tokens_per_s": trained_tokens / elapsed.max(1e-9) },
    });
    write_json(&out.join("summary.json"), &value)?;

    let mut table = Table::new(&["metric", "value"]);
    table.push(vec![json!("final_val_loss"), json!(summary.final_val_loss)]);
    table.push(vec![
        json!("final_train_loss"),
        json!(summary.final_train_loss),
    ]);
    table.push(vec![
        json!("recall_accuracy"),
        json!(summary.recall_accuracy),
    ]);
    for (l, t) in summary.final_tau.iter().enumerate() {
        table.push(vec![json!(format!("tau_mean.layer{l}")), json!(t.mean)]);
    }
    write_report(out, format, &table.render(format)?)?;
    Ok(value)
}

/// Trains per the config; with `resume`, continues from the newest
/// checkpoint under `out/ckpt` when one exists. Returns the summary.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
    format: ReportFormat,
) -> Result<Value> {
    let r = cfg.resolve()?;
    create_dir(out)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &r, out, resume, format),
        Precision::F64 => train_typed::<f64>(cfg, &r, out, resume, format),
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub policy: TemperaturePolicy,
    pub seed: u64,
    pub final_val_loss: f64,
    pub recall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub label: String,
    pub policy: TemperaturePolicy,
    pub final_val_loss: f64,
    pub recall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMean>,
    /// Lowest mean validation loss among non-baseline policies.
    pub best_focal: Option<String>,
    pub best_focal_beats_baseline: Option<bool>,
}

impl SweepSummary {
    fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut groups: Vec<(String, TemperaturePolicy, Vec<&SweepRow>)> = Vec::new();
        for r in &rows {
            match groups.iter_mut().find(|g| g.0 == r.label) {
                Some(g) => g.2.push(r),
                None => groups.push((r.label.clone(), r.policy, vec![r])),
            }
        }
        let means: Vec<SweepMean> = groups
            .into_iter()
            .map(|(label, policy, rs)| SweepMean {
                label,
                policy,
                final_val_loss: rs.iter().map(|r| r.final_val_loss).sum::<f64>() / rs.len() as f64,
                recall_accuracy: rs.iter().map(|r| r.recall_accuracy).sum::<f64>()
                    / rs.len() as f64,
            })
            .collect();
        let baseline = means
            .iter()
            .find(|m| is_reference(&m.policy))
            .map(|m| m.final_val_loss);
        let best = means
            .iter()
            .filter(|m| !is_reference(&m.policy))
            .min_by(|a, b| a.final_val_loss.total_cmp(&b.final_val_loss));
        SweepSummary {
            best_focal: best.map(|m| m.label.clone()),
            best_focal_beats_baseline: best.zip(baseline).map(|(b, base)| b.final_val_loss < base),
            rows,
            means,
        }
    }

    pub fn mean_of(&self, label: &str) -> Option<&SweepMean> {
        self.means.iter().find(|m| m.label == label)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["label", "seed", "final_val_loss", "recall_accuracy"]);
        for r in &self.rows {
            t.push(vec![
                json!(r.label),
                json!(r.seed),
                json!(r.final_val_loss),
                json!(r.recall_accuracy),
            ]);
        }
        for m in &self.means {
            t.push(vec![
                json!(m.label),
                json!("mean"),
                json!(m.final_val_loss),
                json!(m.recall_accuracy),
            ]);
        }
        t
    }
}

/// Unscaled attention: `Baseline` or a constant scale of exactly 1.
fn is_reference(p: &TemperaturePolicy) -> bool {
    matches!(p, TemperaturePolicy::Baseline)
        || matches!(p, TemperaturePolicy::FocalConstant { t } if *t == 1.0)
}

/// A scale of 1 is run as `Baseline`; the two are numerically identical.
fn constant_policy(t: f64) -> TemperaturePolicy {
    if t == 1.0 {
        TemperaturePolicy::Baseline
    } else {
        TemperaturePolicy::focal_constant(t)
    }
}

/// How sweep trials are executed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TrialRunner {
    #[default]
    Inline,
    /// Path of a `focal` executable to spawn per trial.
    Process(PathBuf),
}

fn run_sweep(
    cfg: &ExperimentConfig,
    policies: &[TemperaturePolicy],
    out: &Path,
    runner: &TrialRunner,
    format: ReportFormat,
    command: &str,
) -> Result<SweepSummary> {
    let start = Instant::now();
    cfg.resolve()?;
    let mut trials = Vec::new();
    for p in policies {
        p.validate()?;
        for i in 0..cfg.sweep.n_seeds {
            let mut t = cfg.clone();
            t.temperature = *p;
            t.seed = cfg.seed.wrapping_add(i);
            t.name = format!("{}_s{}", p.label(), t.seed);
            t.out_dir = None;
            t.resolve()?;
            trials.push(t);
        }
    }
    let trial_root = out.join("trials");
    create_dir(&trial_root)?;
    let dirs: Vec<PathBuf> = trials.iter().map(|t| trial_root.join(&t.name)).collect();
    match runner {
        TrialRunner::Inline => {
            for (t, d) in trials.iter().zip(&dirs) {
                log::info!("trial {}", t.name);
                cmd_train(t, d, false, ReportFormat::Csv)?;
            }
        }
        TrialRunner::Process(exe) => run_processes(exe, &trials, &dirs, cfg.sweep.jobs)?,
    }

    let mut rows = Vec::with_capacity(trials.len());
    for (t, d) in trials.iter().zip(&dirs) {
        let path = d.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| FocalError::io(&path, e))?;
        let s: Value = serde_json::from_str(&text)?;
        let results: TrainSummary = serde_json::from_value(s["results"].clone())?;
        rows.push(SweepRow {
            label: t.temperature.label(),
            policy: t.temperature,
            seed: t.seed,
            final_val_loss: results.final_val_loss,
            recall_accuracy: results.recall_accuracy,
        });
    }
    let summary = SweepSummary::from_rows(rows);
    write_report(out, format, &summary.table().render(format)?)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": command,
            "config": cfg.recorded(),
            "results": summary,
            "timing": { "wall_time_s": start.elapsed().as_secs_f64() },
        }),
    )?;
    Ok(summary)
}

fn run_processes(
    exe: &Path,
    trials: &[ExperimentConfig],
    dirs: &[PathBuf],
    jobs: usize,
) -> Result<()> {
    let mut queue = trials.iter().zip(dirs).peekable();
    let mut running: Vec<(String, std::process::Child)> = Vec::new();
    while queue.peek().is_some() || !running.is_empty() {
        while running.len() < jobs {
            let Some((t, d)) = queue.next() else { break };
            create_dir(d)?;
            let cfg_path = d.join("config.json");
            write_json(&cfg_path, &serde_json::to_value(t)?)?;
            let child = Command::new(exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(d)
                .spawn()
                .map_err(|e| FocalError::io(exe, e))?;
            running.push((t.name.clone(), child));
        }
        let (name, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| FocalError::io(exe, e))?;
        if !status.success() {
            for (_, mut c) in running {
                let _ = c.kill();
            }
            let msg = format!("trial {name} exited with {status}");
            return Err(match status.code() {
                Some(3) => FocalError::Numerical(msg),
                Some(4) => FocalError::io(exe, std::io::Error::other(msg)),
                _ => FocalError::Config(msg),
            });
        }
    }
    Ok(())
}

/// Constant-scale sweep; `t_values` overrides the configured grid. A scale
/// of 1 is always included so the comparison against unscaled attention is
/// computable from the one artifact.
pub fn cmd_sweep_const(
    cfg: &ExperimentConfig,
    t_values: Option<&[f64]>,
    out: &Path,
    runner: &TrialRunner,
    format: ReportFormat,
) -> Result<SweepSummary> {
    let mut ts: Vec<f64> = t_values
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| cfg.sweep.t_values.clone());
    if !ts.contains(&1.0) {
        ts.push(1.0);
    }
    let policies: Vec<TemperaturePolicy> = ts.into_iter().map(constant_policy).collect();
    run_sweep(cfg, &policies, out, runner, format, "sweep-const")
}

/// Learned-temperature sweep over the τ_min × τ_max grid plus the unscaled
/// reference.
pub fn cmd_sweep_learned(
    cfg: &ExperimentConfig,
    tau_min_values: Option<&[f64]>,
    tau_max_values: Option<&[f64]>,
    out: &Path,
    runner: &TrialRunner,
    format: ReportFormat,
) -> Result<SweepSummary> {
    let mins = tau_min_values
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| cfg.sweep.tau_min_values.clone());
    let maxs = tau_max_values
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| cfg.sweep.tau_max_values.clone());
    let mut policies = Vec::with_capacity(mins.len() * maxs.len() + 1);
    for &hi in &maxs {
        for &lo in &mins {
            let mut p = TemperaturePolicy::focal_learned(lo, hi);
            if let (
                TemperaturePolicy::FocalLearned {
                    mean_mode,
                    clip,
                    init,
                    ..
                },
                TemperaturePolicy::FocalLearned {
                    mean_mode: m,
                    clip: c,
                    init: i,
                    ..
                },
            ) = (&mut p, cfg.temperature)
            {
                *mean_mode = m;
                *clip = c;
                *init = i;
            }
            policies.push(p);
        }
    }
    policies.push(TemperaturePolicy::Baseline);
    run_sweep(cfg, &policies, out, runner, format, "sweep-learned")
}

fn fill_context(
    kind: TaskKind,
    difficulty: Option<usize>,
    context: usize,
    seed: u64,
) -> Result<TaskInstance> {
    match (kind, difficulty) {
        (_, Some(d)) => tasks::generate(kind, d, context, seed),
        (TaskKind::KvRecall, None) => {
            // each pair costs 24 tokens; step down until the prompt fits
            let mut n = (context / 24).max(1);
            loop {
                match tasks::gen_kv_recall(n, context, seed) {
                    Err(FocalError::Config(_)) if n > 1 => n -= 1,
                    other => return other,
                }
            }
        }
        (TaskKind::NeedleUuid, None) => {
            // up to three distractors, fewer when the context is short
            let mut d = 3;
            loop {
                match tasks::gen_needle_uuid(context, d, seed) {
                    Err(FocalError::Config(_)) if d > 0 => d -= 1,
                    other => return other,
                }
            }
        }
        (TaskKind::IclClassify, None) => tasks::gen_icl_classify(4, context, context, seed),
        (TaskKind::Copy, None) => {
            tasks::gen_copy((context.saturating_sub(1) / 2).max(1), context, seed)
        }
    }
}

/// Accuracy of one task at one context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: TaskKind,
    pub context: usize,
    pub accuracy: f64,
    pub instances: usize,
}

fn eval_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    let start = Instant::now();
    let r = cfg.resolve()?;
    let ck = load_checkpoint::<T>(ckpt)?;
    let model = ck.model;
    let contexts = if cfg.eval.contexts.is_empty() {
        vec![model.config.max_context]
    } else {
        cfg.eval.contexts.clone()
    };
    if let Some(&c) = contexts.iter().find(|&&c| c > model.config.max_context) {
        return Err(FocalError::Config(format!(
            "eval context {c} exceeds the checkpoint's context {}",
            model.config.max_context
        )));
    }
    let mut rows = Vec::new();
    for task in &cfg.eval.tasks {
        for &c in &contexts {
            let tag = format!("{:?}/{c}", task.kind);
            let instances = (0..task.instances)
                .map(|i| {
                    fill_context(
                        task.kind,
                        task.difficulty,
                        c,
                        derive_seed(r.eval_seed, &format!("{tag}/{i}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let score = score_task(&model, &instances)?;
            log::info!("{tag}: accuracy {:.3}", score.accuracy);
            rows.push(EvalRow {
                task: task.kind,
                context: c,
                accuracy: score.accuracy,
                instances: instances.len(),
            });
        }
    }
    let mut table = Table::new(&["task", "context", "accuracy", "instances"]);
    for row in &rows {
        table.push(vec![
            json!(row.task),
            json!(row.context),
            json!(row.accuracy),
            json!(row.instances),
        ]);
    }
    write_report(out, format, &table.render(format)?)?;
    let value = json!({
        "command": "eval",
        "checkpoint_step": ck.manifest.step,
        "model": model.config,
        "config": cfg.recorded(),
        "results": rows,
        "timing": { "wall_time_s": start.elapsed().as_secs_f64() },
    });
    write_json(&out.join("summary.json"), &value)?;
    Ok(value)
}

/// Scores a checkpoint on the configured tasks across the context ladder.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    create_dir(out)?;
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint, out, format),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint, out, format),
    }
}

fn adapt_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    policy: TemperaturePolicy,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    let start = Instant::now();
    let r = cfg.resolve()?;
    let ck = load_checkpoint::<T>(ckpt)?;
    let mut model = ck.model;
    if r.train.seq_len > model.config.max_context {
        return Err(FocalError::Config(format!(
            "train.seq_len {} exceeds the checkpoint's context {}",
            r.train.seq_len, model.config.max_context
        )));
    }
    let (data, val) = prepare_data(cfg, &r)?;
    let probes = recall_probes(&cfg.probe, r.train.seq_len, r.eval_seed)?;
    let before = json!({
        "policy": model.config.temperature,
        "val_loss": evaluate_loss(&model, &val)?,
        "recall_accuracy": score_task(&model, &probes)?.accuracy,
    });
    model.set_temperature(policy)?;
    let switched_val = evaluate_loss(&model, &val)?;

    let steps_path = out.join("steps.jsonl");
    if steps_path.exists() {
        std::fs::remove_file(&steps_path).map_err(|e| FocalError::io(&steps_path, e))?;
    }
    let mut trainer = Trainer::new(model, r.train.clone(), r.data_seed)?;
    let mut logs = Vec::new();
    let record = trainer.run(&data, &val, Some(&out.join("ckpt")), &mut |l| {
        logs.push(l.clone());
        Ok(())
    })?;
    append_steps(&steps_path, &logs)?;
    let after = json!({
        "policy": trainer.model.config.temperature,
        "val_loss_before_training": switched_val,
        "val_loss": record.final_val_loss,
        "recall_accuracy": score_task(&trainer.model, &probes)?.accuracy,
    });

    let mut table = Table::new(&["stage", "val_loss", "recall_accuracy"]);
    table.push(vec![
        json!("before"),
        before["val_loss"].clone(),
        before["recall_accuracy"].clone(),
    ]);
    table.push(vec![
        json!("after"),
        after["val_loss"].clone(),
        after["recall_accuracy"].clone(),
    ]);
    write_report(out, format, &table.render(format)?)?;
    let value = json!({
        "command": "adapt",
        "checkpoint_step": ck.manifest.step,
        "config": cfg.recorded(),
        "results": { "before": before, "after": after, "steps": trainer.step },
        "timing": { "wall_time_s": start.elapsed().as_secs_f64() },
    });
    write_json(&out.join("summary.json"), &value)?;
    Ok(value)
}

/// Loads a checkpoint, switches every layer to `policy` and continues
/// training with the config's (overridden) schedule and a fresh optimizer.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    policy: TemperaturePolicy,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    create_dir(out)?;
    match cfg.precision {
        Precision::F32 => adapt_typed::<f32>(cfg, checkpoint, policy, out, format),
        Precision::F64 => adapt_typed::<f64>(cfg, checkpoint, policy, out, format),
    }
}

/// The second side of a diagnostic comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum Counterpart {
    Checkpoint(PathBuf),
    /// Checkpoint A's weights under another policy.
    Policy(TemperaturePolicy),
}

fn diagnose_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    ckpt_a: &Path,
    policy_a: Option<TemperaturePolicy>,
    other: &Counterpart,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    let start = Instant::now();
    let r = cfg.resolve()?;
    let mut a = load_checkpoint::<T>(ckpt_a)?.model;
    if let Some(p) = policy_a {
        a.set_temperature(p)?;
    }
    let b = match other {
        Counterpart::Checkpoint(path) => load_checkpoint::<T>(path)?.model,
        Counterpart::Policy(p) => {
            let mut m = a.clone();
            m.set_temperature(*p)?;
            m
        }
    };
    let context = r.train.seq_len.min(a.config.max_context);
    let probes: Vec<Probe> =
        recall_probes(&cfg.probe, context, derive_seed(r.eval_seed, "diagnose"))?
            .into_iter()
            .map(|inst| Probe {
                tokens: inst.prompt,
                relevant: Some(inst.relevant),
            })
            .collect();
    let report = compare_policies(&a, &b, &probes, cfg.probe.top_k, cfg.probe.row_limit)?;
    let text = render_report(&report.rows(), format)?;
    write_report(out, format, &text)?;
    let per_layer: BTreeMap<String, Value> = (0..report.a.n_layers())
        .map(|l| {
            (
                format!("layer{l}"),
                json!({
                    "a_entropy": report.a.layer_entropy()[l],
                    "b_entropy": report.b.layer_entropy()[l],
                }),
            )
        })
        .collect();
    let value = json!({
        "command": "diagnose",
        "a": report.a.label,
        "b": report.b.label,
        "probes": report.probes,
        "config": cfg.recorded(),
        "results": {
            "layers": per_layer,
            "entropy_lower_in_every_layer": report.layer_entropy_delta().iter().all(|d| *d < 0.0),
            "a_mass_on_relevant": report.a.mean_mass_on_relevant(),
            "b_mass_on_relevant": report.b.mean_mass_on_relevant(),
        },
        "timing": { "wall_time_s": start.elapsed().as_secs_f64() },
    });
    write_json(&out.join("summary.json"), &value)?;
    Ok(value)
}

/// Compares attention sharpness of checkpoint A (optionally under
/// `policy_a`) against `other` on seeded recall probes.
pub fn cmd_diagnose(
    cfg: &ExperimentConfig,
    checkpoint_a: &Path,
    policy_a: Option<TemperaturePolicy>,
    other: &Counterpart,
    out: &Path,
    format: ReportFormat,
) -> Result<Value> {
    create_dir(out)?;
    match cfg.precision {
        Precision::F32 => diagnose_typed::<f32>(cfg, checkpoint_a, policy_a, other, out, format),
        Precision::F64 => diagnose_typed::<f64>(cfg, checkpoint_a, policy_a, other, out, format),
    }
}
