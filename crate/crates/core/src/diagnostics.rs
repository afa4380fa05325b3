//! Attention-sharpness statistics over recorded attention rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{FocalError, Result};
use crate::model::Model;
use crate::tensor::Scalar;

/// One recorded attention row: probabilities over positions `0..=query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query: usize,
    pub probs: Vec<f64>,
}

/// Recorded post-softmax rows of one head in one layer for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub seq_len: usize,
    pub rows: Vec<TraceRow>,
    /// Learned temperature(s) in effect, if any.
    pub tau: Option<Vec<f64>>,
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Sum of the `k` largest probabilities.
pub fn top_k_mass(row: &[f64], k: usize) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().take(k).sum::<f64>().min(1.0)
}

/// Probability the final query row of `trace` places on `relevant`
/// positions. Positions outside the row are ignored.
pub fn mass_on_relevant(trace: &AttentionTrace, relevant: &[usize]) -> Result<f64> {
    let last = trace
        .rows
        .last()
        .filter(|r| r.query + 1 == trace.seq_len)
        .ok_or_else(|| FocalError::Usage("trace does not contain the final query row".into()))?;
    Ok(relevant
        .iter()
        .filter_map(|&p| last.probs.get(p))
        .sum::<f64>()
        .min(1.0))
}

/// [`mass_on_relevant`] averaged over every (layer, head) trace.
pub fn mean_mass_on_relevant(traces: &[AttentionTrace], relevant: &[usize]) -> Result<f64> {
    if traces.is_empty() {
        return Err(FocalError::Usage("no traces".into()));
    }
    let mut total = 0.0;
    for t in traces {
        total += mass_on_relevant(t, relevant)?;
    }
    Ok(total / traces.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    /// Mean row entropy in nats.
    pub mean_entropy: f64,
    pub top1_mass: f64,
    pub topk_mass: f64,
    pub mass_on_relevant: Option<f64>,
    pub tau: Option<f64>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub label: String,
    pub k: usize,
    pub heads: Vec<HeadStats>,
}

/// Flat `(layer, head, metric, value)` record; `head = None` marks a
/// layer-level mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: usize,
    pub head: Option<usize>,
    pub metric: String,
    pub value: f64,
}

#[derive(Default)]
struct HeadAcc {
    entropy: f64,
    top1: f64,
    topk: f64,
    rows: usize,
    relevant: f64,
    relevant_n: usize,
    tau: f64,
    tau_n: usize,
}

/// Collects traces from many probes into one [`SharpnessReport`].
pub struct SharpnessAccumulator {
    label: String,
    k: usize,
    heads: BTreeMap<(usize, usize), HeadAcc>,
}

impl SharpnessAccumulator {
    pub fn new(label: impl Into<String>, k: usize) -> Self {
        SharpnessAccumulator {
            label: label.into(),
            k: k.max(1),
            heads: BTreeMap::new(),
        }
    }

    /// Adds one probe's traces; `relevant` marks positions for the
    /// relevant-mass statistic.
    pub fn add(&mut self, traces: &[AttentionTrace], relevant: Option<&[usize]>) -> Result<()> {
        for t in traces {
            let acc = self.heads.entry((t.layer, t.head)).or_default();
            for r in &t.rows {
                acc.entropy += entropy(&r.probs);
                acc.top1 += top_k_mass(&r.probs, 1);
                acc.topk += top_k_mass(&r.probs, self.k);
                acc.rows += 1;
            }
            if let Some(rel) = relevant {
                acc.relevant += mass_on_relevant(t, rel)?;
                acc.relevant_n += 1;
            }
            if let Some(tau) = &t.tau {
                acc.tau += tau.iter().sum::<f64>() / tau.len() as f64;
                acc.tau_n += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> SharpnessReport {
        let heads = self
            .heads
            .into_iter()
            .map(|((layer, head), a)| {
                let rows = a.rows.max(1) as f64;
                HeadStats {
                    layer,
                    head,
                    mean_entropy: a.entropy / rows,
                    top1_mass: a.top1 / rows,
                    topk_mass: a.topk / rows,
                    mass_on_relevant: (a.relevant_n > 0).then(|| a.relevant / a.relevant_n as f64),
                    tau: (a.tau_n > 0).then(|| a.tau / a.tau_n as f64),
                    rows: a.rows,
                }
            })
            .collect();
        SharpnessReport {
            label: self.label,
            k: self.k,
            heads,
        }
    }
}

impl SharpnessReport {
    pub fn from_traces(label: &str, traces: &[AttentionTrace], k: usize) -> Result<Self> {
        let mut acc = SharpnessAccumulator::new(label, k);
        acc.add(traces, None)?;
        Ok(acc.finish())
    }

    pub fn n_layers(&self) -> usize {
        self.heads.iter().map(|h| h.layer + 1).max().unwrap_or(0)
    }

    fn layer_mean(&self, layer: usize, f: impl Fn(&HeadStats) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .heads
            .iter()
            .filter(|h| h.layer == layer)
            .filter_map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean attention entropy of each layer, averaged over heads.
    pub fn layer_entropy(&self) -> Vec<f64> {
        (0..self.n_layers())
            .map(|l| self.layer_mean(l, |h| Some(h.mean_entropy)).unwrap_or(0.0))
            .collect()
    }

    /// Relevant mass averaged over every head and layer.
    pub fn mean_mass_on_relevant(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .heads
            .iter()
            .filter_map(|h| h.mass_on_relevant)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn rows(&self, prefix: &str) -> Vec<ReportRow> {
        let name = |m: &str| {
            if prefix.is_empty() {
                m.to_string()
            } else {
                format!("{prefix}.{m}")
            }
        };
        let mut out = Vec::new();
        for h in &self.heads {
            let mut push = |m: &str, v: f64| {
                out.push(ReportRow {
                    layer: h.layer,
                    head: Some(h.head),
                    metric: name(m),
                    value: v,
                })
            };
            push("mean_entropy", h.mean_entropy);
            push("top1_mass", h.top1_mass);
            push(&format!("top{}_mass", self.k), h.topk_mass);
            if let Some(v) = h.mass_on_relevant {
                push("mass_on_relevant", v);
            }
            if let Some(v) = h.tau {
                push("tau", v);
            }
        }
        for layer in 0..self.n_layers() {
            let mut push = |m: &str, v: Option<f64>| {
                if let Some(value) = v {
                    out.push(ReportRow {
                        layer,
                        head: None,
                        metric: name(m),
                        value,
                    })
                }
            };
            push(
                "mean_entropy",
                self.layer_mean(layer, |h| Some(h.mean_entropy)),
            );
            push("top1_mass", self.layer_mean(layer, |h| Some(h.top1_mass)));
            push(
                "mass_on_relevant",
                self.layer_mean(layer, |h| h.mass_on_relevant),
            );
        }
        out
    }
}

/// Two reports over identical probes, `a` vs `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub a: SharpnessReport,
    pub b: SharpnessReport,
    pub probes: usize,
}

impl PairedReport {
    /// Per-layer `entropy(b) - entropy(a)`.
    pub fn layer_entropy_delta(&self) -> Vec<f64> {
        self.b
            .layer_entropy()
            .iter()
            .zip(self.a.layer_entropy())
            .map(|(b, a)| b - a)
            .collect()
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut out = self.a.rows("a");
        out.extend(self.b.rows("b"));
        let (ra, rb) = (self.a.rows(""), self.b.rows(""));
        for (x, y) in ra.iter().zip(&rb) {
            debug_assert_eq!((x.layer, x.head, &x.metric), (y.layer, y.head, &y.metric));
            out.push(ReportRow {
                layer: x.layer,
                head: x.head,
                metric: format!("delta.{}", x.metric),
                value: y.value - x.value,
            });
        }
        out
    }
}

/// A probe input with optional relevant positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tokens: Vec<usize>,
    pub relevant: Option<Vec<usize>>,
}

/// Traces a model on every probe and summarizes.
pub fn sharpness<T: Scalar>(
    model: &Model<T>,
    label: &str,
    probes: &[Probe],
    k: usize,
    row_limit: Option<usize>,
) -> Result<SharpnessReport> {
    let mut acc = SharpnessAccumulator::new(label, k);
    for p in probes {
        let mut g = Graph::new();
        let (_, traces) = model.forward_traced(&mut g, &p.tokens, row_limit)?;
        acc.add(&traces, p.relevant.as_deref())?;
    }
    Ok(acc.finish())
}

/// Traces both models on identical probes. The models must share their
/// configuration apart from the temperature policy.
pub fn compare_policies<T: Scalar>(
    model_a: &Model<T>,
    model_b: &Model<T>,
    probes: &[Probe],
    k: usize,
    row_limit: Option<usize>,
) -> Result<PairedReport> {
    let mut ca = model_a.config.clone();
    let mut cb = model_b.config.clone();
    ca.temperature = Default::default();
    cb.temperature = Default::default();
    ca.seed = 0;
    cb.seed = 0;
    if ca != cb {
        return Err(FocalError::Config(
            "compared models differ in more than the temperature policy".into(),
        ));
    }
    if probes.is_empty() {
        return Err(FocalError::Usage("no probes to compare on".into()));
    }
    Ok(PairedReport {
        a: sharpness(
            model_a,
            &model_a.config.temperature.label(),
            probes,
            k,
            row_limit,
        )?,
        b: sharpness(
            model_b,
            &model_b.config.temperature.label(),
            probes,
            k,
            row_limit,
        )?,
        probes: probes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = FocalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(FocalError::Config(format!(
                "unknown report format {other:?}"
            ))),
        }
    }
}

/// CSV with header `layer,head,metric,value` (`head` is `all` for layer
/// means), or a JSON array of the same fields (`head` null for layer means).
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("layer,head,metric,value\n");
            for r in rows {
                let head = r.head.map_or_else(|| "all".to_string(), |h| h.to_string());
                writeln!(s, "{},{},{},{}", r.layer, head, r.metric, r.value).expect("string write");
            }
            Ok(s)
        }
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
    }
}

pub fn emit_report(rows: &[ReportRow], path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_report(rows, format)?;
    std::fs::write(path, text).map_err(|e| FocalError::io(path, e))
}
