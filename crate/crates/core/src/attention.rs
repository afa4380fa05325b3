//! Multi-head causal self-attention with a pluggable softmax temperature.
//!
//! Per head the score matrix `q·kᵀ` is divided by a policy-dependent
//! denominator before the softmax:
//!
//! | policy          | denominator                                   |
//! |-----------------|-----------------------------------------------|
//! | `Baseline`      | `√d_head`                                     |
//! | `FocalConstant` | `t·√d_head`                                   |
//! | `FocalLearned`  | `τ = clip(mean(X·w_τ), τ_min, τ_max)` (no √d) |
//!
//! `Baseline` and `FocalConstant` share one code path with `Baseline`
//! treated as `t = 1`, so `FocalConstant { t: 1.0 }` is bit-identical to it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ClipGradient, Graph, Var};
use crate::diagnostics::{AttentionTrace, TraceRow};
use crate::error::{FocalError, Result};
use crate::tensor::{Scalar, Tensor};

/// How `mean(X·w_τ)` is reduced over token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// One τ per sequence from the mean over all positions.
    #[default]
    FullSequence,
    /// One τ per query position from the mean over positions `0..=i`.
    CausalPrefix,
}

/// Initial value of the learned temperature projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauInit {
    /// τ starts at τ_min through the clip.
    #[default]
    Zeros,
    /// normal(0, 0.02)
    SmallRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum TemperaturePolicy {
    #[default]
    Baseline,
    FocalConstant {
        t: f64,
    },
    FocalLearned {
        tau_min: f64,
        tau_max: f64,
        #[serde(default)]
        mean_mode: MeanMode,
        #[serde(default)]
        clip: ClipGradient,
        #[serde(default)]
        init: TauInit,
    },
}

impl TemperaturePolicy {
    pub const DEFAULT_SCALE: f64 = 0.4;
    pub const DEFAULT_TAU_MIN: f64 = 5.0;
    pub const DEFAULT_TAU_MAX: f64 = 10.0;

    pub fn focal_constant(t: f64) -> Self {
        TemperaturePolicy::FocalConstant { t }
    }

    pub fn focal_learned(tau_min: f64, tau_max: f64) -> Self {
        TemperaturePolicy::FocalLearned {
            tau_min,
            tau_max,
            mean_mode: MeanMode::default(),
            clip: ClipGradient::default(),
            init: TauInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TemperaturePolicy::Baseline => Ok(()),
            TemperaturePolicy::FocalConstant { t } => {
                if t > 0.0 && t.is_finite() {
                    Ok(())
                } else {
                    Err(FocalError::Config(format!(
                        "temperature scale t must be > 0, got {t}"
                    )))
                }
            }
            TemperaturePolicy::FocalLearned {
                tau_min, tau_max, ..
            } => {
                if tau_min > 0.0 && tau_min < tau_max && tau_max.is_finite() {
                    Ok(())
                } else {
                    Err(FocalError::Config(format!(
                        "learned temperature needs 0 < tau_min < tau_max, got [{tau_min}, {tau_max}]"
                    )))
                }
            }
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, TemperaturePolicy::FocalLearned { .. })
    }

    /// Multiplier applied to `√d_head` for the fixed-temperature policies.
    fn scale_factor(&self) -> Option<f64> {
        match *self {
            TemperaturePolicy::Baseline => Some(1.0),
            TemperaturePolicy::FocalConstant { t } => Some(t),
            TemperaturePolicy::FocalLearned { .. } => None,
        }
    }

    /// Short stable label, e.g. `baseline`, `const_t0.4`, `learned_5-10`.
    pub fn label(&self) -> String {
        match *self {
            TemperaturePolicy::Baseline => "baseline".into(),
            TemperaturePolicy::FocalConstant { t } => format!("const_t{t}"),
            TemperaturePolicy::FocalLearned {
                tau_min, tau_max, ..
            } => {
                format!("learned_{tau_min}-{tau_max}")
            }
        }
    }
}

/// Accepts `baseline`, `t=0.4` (or `const:0.4`) and `learned:5:10`.
impl std::str::FromStr for TemperaturePolicy {
    type Err = FocalError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FocalError::Config(format!("cannot parse temperature policy `{s}`"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let s = s.trim();
        let policy = if s == "baseline" {
            TemperaturePolicy::Baseline
        } else if let Some(t) = s.strip_prefix("t=").or_else(|| s.strip_prefix("const:")) {
            TemperaturePolicy::focal_constant(num(t)?)
        } else if let Some(rest) = s.strip_prefix("learned:") {
            let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
            TemperaturePolicy::focal_learned(num(lo)?, num(hi)?)
        } else {
            return Err(bad());
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mask {
    #[default]
    Causal,
    /// No masking; only used for symmetry checks.
    None,
}

/// Per-call attention settings shared by every layer of a model.
#[derive(Debug, Clone, Copy)]
pub struct AttendOptions {
    pub rope_theta: f64,
    pub max_context: usize,
    pub norm_eps: f64,
    pub mask: Mask,
    pub rope: bool,
}

impl AttendOptions {
    pub fn new(rope_theta: f64, max_context: usize) -> Self {
        AttendOptions {
            rope_theta,
            max_context,
            norm_eps: 1e-5,
            mask: Mask::Causal,
            rope: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub q_gain: Tensor<T>,
    pub k_gain: Tensor<T>,
    /// Present iff the policy is `FocalLearned`.
    pub w_tau: Option<Tensor<T>>,
    pub policy: TemperaturePolicy,
    pub n_heads: usize,
    pub d_head: usize,
}

/// Result of one attention call.
pub struct AttendOutput {
    pub out: Var,
    /// Learned temperature node (`[1]` or `[n]`), when the policy learns it.
    pub tau: Option<Var>,
}

fn normal_tensor<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng))).requires_grad()
}

pub(crate) fn init_w_tau<T: Scalar, R: Rng>(
    init: TauInit,
    d_model: usize,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        TauInit::Zeros => Tensor::zeros(&[d_model]).requires_grad(),
        TauInit::SmallRandom => normal_tensor(&[d_model], 0.02, rng),
    }
}

impl<T: Scalar> AttentionLayer<T> {
    /// Random init: projections ~ normal(0, 0.02), output projection scaled
    /// by `out_scale`, QK-norm gains at 1.
    pub fn new<R: Rng>(
        d_model: usize,
        n_heads: usize,
        policy: TemperaturePolicy,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        policy.validate()?;
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(FocalError::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let d_head = d_model / n_heads;
        if !d_head.is_multiple_of(2) {
            return Err(FocalError::Config(format!(
                "head width {d_head} must be even for RoPE"
            )));
        }
        let sq = [d_model, d_model];
        let wq = normal_tensor(&sq, 0.02, rng);
        let wk = normal_tensor(&sq, 0.02, rng);
        let wv = normal_tensor(&sq, 0.02, rng);
        let wo = normal_tensor(&sq, 0.02 * out_scale, rng);
        let w_tau = match policy {
            TemperaturePolicy::FocalLearned { init, .. } => Some(init_w_tau(init, d_model, rng)),
            _ => None,
        };
        Ok(AttentionLayer {
            wq,
            wk,
            wv,
            wo,
            q_gain: Tensor::filled(&[d_head], T::one()).requires_grad(),
            k_gain: Tensor::filled(&[d_head], T::one()).requires_grad(),
            w_tau,
            policy,
            n_heads,
            d_head,
        })
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Replaces the temperature policy in place. Switching to a learned
    /// policy allocates `w_τ` if the layer has none.
    pub fn set_policy<R: Rng>(&mut self, policy: TemperaturePolicy, rng: &mut R) -> Result<()> {
        policy.validate()?;
        match policy {
            TemperaturePolicy::FocalLearned { init, .. } => {
                if self.w_tau.is_none() {
                    self.w_tau = Some(init_w_tau(init, self.d_model(), rng));
                }
            }
            _ => self.w_tau = None,
        }
        self.policy = policy;
        Ok(())
    }
}

/// `clip(mean(X·w_τ), τ_min, τ_max)`; shape `[1]` for full-sequence mode,
/// `[n]` for causal-prefix mode. Participates in the gradient graph.
pub fn compute_tau<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w_tau: Var,
    policy: &TemperaturePolicy,
) -> Result<Var> {
    let TemperaturePolicy::FocalLearned {
        tau_min,
        tau_max,
        mean_mode,
        clip,
        ..
    } = *policy
    else {
        return Err(FocalError::Usage(
            "compute_tau needs a learned temperature policy".into(),
        ));
    };
    let d = g.shape(w_tau)[0];
    let n = g.shape(x)[0];
    let col = g.reshape(w_tau, &[d, 1])?;
    let proj = g.matmul(x, col)?;
    let proj = g.reshape(proj, &[n])?;
    let reduced = match mean_mode {
        MeanMode::FullSequence => g.mean(proj),
        MeanMode::CausalPrefix => g.prefix_mean(proj)?,
    };
    g.clip_st(reduced, T::of(tau_min), T::of(tau_max), clip)
}

/// Multi-head attention over `x[n × d_model]`.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &AttentionLayer<T>,
    opts: &AttendOptions,
) -> Result<AttendOutput> {
    attend_impl(g, x, layer, opts, None)
}

/// [`attend`] plus the post-softmax probability rows of every head.
/// `row_limit` keeps only the last rows of each head (the rows nearest the
/// final query), bounding trace memory.
pub fn attend_with_trace<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &AttentionLayer<T>,
    opts: &AttendOptions,
    layer_index: usize,
    row_limit: Option<usize>,
) -> Result<(AttendOutput, Vec<AttentionTrace>)> {
    let mut traces = Vec::with_capacity(layer.n_heads);
    let out = attend_impl(
        g,
        x,
        layer,
        opts,
        Some((&mut traces, layer_index, row_limit)),
    )?;
    Ok((out, traces))
}

type TraceSink<'a> = (&'a mut Vec<AttentionTrace>, usize, Option<usize>);

fn attend_impl<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &AttentionLayer<T>,
    opts: &AttendOptions,
    mut trace: Option<TraceSink<'_>>,
) -> Result<AttendOutput> {
    let (n, d) = match g.shape(x) {
        [n, d] => (*n, *d),
        s => {
            return Err(FocalError::Dimension {
                op: "attend",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if d != layer.d_model() {
        return Err(FocalError::Dimension {
            op: "attend",
            lhs: vec![n, d],
            rhs: vec![layer.d_model()],
        });
    }
    if n > opts.max_context {
        return Err(FocalError::Config(format!(
            "sequence of {n} tokens exceeds context length {}",
            opts.max_context
        )));
    }
    let (h, dh) = (layer.n_heads, layer.d_head);
    let eps = T::of(opts.norm_eps);

    let wq = g.param(&layer.wq);
    let wk = g.param(&layer.wk);
    let wv = g.param(&layer.wv);
    let wo = g.param(&layer.wo);
    let q_gain = g.param(&layer.q_gain);
    let k_gain = g.param(&layer.k_gain);

    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;

    // QK-norm per head, then RoPE.
    let q = qk_norm(g, q, q_gain, n, h, dh, eps)?;
    let k = qk_norm(g, k, k_gain, n, h, dh, eps)?;
    let (q, k) = if opts.rope {
        let positions: Vec<usize> = (0..n).collect();
        (
            g.rope(q, &positions, opts.rope_theta, dh)?,
            g.rope(k, &positions, opts.rope_theta, dh)?,
        )
    } else {
        (q, k)
    };

    let tau = match (&layer.policy, &layer.w_tau) {
        (
            TemperaturePolicy::FocalLearned {
                tau_min, tau_max, ..
            },
            Some(w),
        ) => {
            let wt = g.param(w);
            let tau = compute_tau(g, x, wt, &layer.policy)?;
            debug_assert!(g
                .value(tau)
                .iter()
                .all(|&t| t.as_f64() >= *tau_min && t.as_f64() <= *tau_max));
            Some(tau)
        }
        (TemperaturePolicy::FocalLearned { .. }, None) => {
            return Err(FocalError::Config(
                "learned temperature policy without w_tau".into(),
            ))
        }
        _ => None,
    };
    let fixed_denominator = layer
        .policy
        .scale_factor()
        .map(|t| T::of(t) * T::of(dh as f64).sqrt());

    let mut heads = Vec::with_capacity(h);
    for head in 0..h {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        // τ divides before masking so no -inf ever reaches the τ gradient
        let scores = match tau {
            Some(tau) if fixed_denominator.is_none() => g.div_rows(scores, tau)?,
            _ => scores,
        };
        let scores = match opts.mask {
            Mask::Causal => g.causal_mask(scores)?,
            Mask::None => scores,
        };
        let probs = g.softmax_t(scores, fixed_denominator.unwrap_or_else(T::one))?;
        if let Some((sink, layer_index, limit)) = trace.as_mut() {
            sink.push(capture(g, probs, tau, *layer_index, head, n, *limit));
        }
        heads.push(g.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.matmul(merged, wo)?;
    Ok(AttendOutput { out, tau })
}

fn qk_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gain: Var,
    n: usize,
    h: usize,
    dh: usize,
    eps: T,
) -> Result<Var> {
    let per_head = g.reshape(x, &[n * h, dh])?;
    let normed = g.rms_norm(per_head, gain, eps)?;
    g.reshape(normed, &[n, h * dh])
}

fn capture<T: Scalar>(
    g: &Graph<T>,
    probs: Var,
    tau: Option<Var>,
    layer: usize,
    head: usize,
    n: usize,
    limit: Option<usize>,
) -> AttentionTrace {
    let p = g.value(probs);
    let first = limit.map_or(0, |l| n.saturating_sub(l));
    let rows = (first..n)
        .map(|i| TraceRow {
            query: i,
            probs: p[i * n..i * n + i + 1].iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    AttentionTrace {
        layer,
        head,
        seq_len: n,
        rows,
        tau: tau.map(|t| g.value(t).iter().map(|v| v.as_f64()).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(policy: TemperaturePolicy) -> AttentionLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        AttentionLayer::new(8, 2, policy, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(TemperaturePolicy::focal_constant(0.0).validate().is_err());
        assert!(TemperaturePolicy::focal_constant(-0.4).validate().is_err());
        assert!(TemperaturePolicy::focal_constant(0.4).validate().is_ok());
        assert!(TemperaturePolicy::focal_learned(5.0, 5.0)
            .validate()
            .is_err());
        assert!(TemperaturePolicy::focal_learned(0.0, 5.0)
            .validate()
            .is_err());
        assert!(TemperaturePolicy::focal_learned(5.0, 10.0)
            .validate()
            .is_ok());
    }

    #[test]
    fn policy_json_shape() {
        let p: TemperaturePolicy =
            serde_json::from_str(r#"{"kind":"focal_constant","t":0.4}"#).unwrap();
        assert_eq!(p, TemperaturePolicy::focal_constant(0.4));
        let p: TemperaturePolicy =
            serde_json::from_str(r#"{"kind":"focal_learned","tau_min":5,"tau_max":10}"#).unwrap();
        assert_eq!(p, TemperaturePolicy::focal_learned(5.0, 10.0));
        assert!(serde_json::from_str::<TemperaturePolicy>(
            r#"{"kind":"focal_constant","t":0.4,"x":1}"#
        )
        .is_err());
    }

    #[test]
    fn odd_head_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            AttentionLayer::<f32>::new(6, 2, TemperaturePolicy::Baseline, 1.0, &mut rng).is_err()
        );
        assert!(
            AttentionLayer::<f32>::new(8, 3, TemperaturePolicy::Baseline, 1.0, &mut rng).is_err()
        );
    }

    fn tau_of(proj: &[f64], mode: MeanMode) -> Vec<f64> {
        // X = diag-free layout: one feature column carrying proj, w_τ = e₀.
        let n = proj.len();
        let mut g = Graph::<f64>::new();
        let mut x = vec![0.0; n * 2];
        for (i, &p) in proj.iter().enumerate() {
            x[i * 2] = p;
        }
        let xv = g.constant(&[n, 2], x).unwrap();
        let w = g.constant(&[2], vec![1.0, 0.0]).unwrap();
        let policy = TemperaturePolicy::FocalLearned {
            tau_min: 5.0,
            tau_max: 10.0,
            mean_mode: mode,
            clip: ClipGradient::StraightThrough,
            init: TauInit::Zeros,
        };
        let tau = compute_tau(&mut g, xv, w, &policy).unwrap();
        g.value(tau).to_vec()
    }

    #[test]
    fn compute_tau_examples() {
        assert_eq!(
            tau_of(&[4.0, 20.0, 6.0], MeanMode::FullSequence),
            vec![10.0]
        );
        assert_eq!(tau_of(&[0.0, 0.0, 0.0], MeanMode::FullSequence), vec![5.0]);
        assert_eq!(tau_of(&[7.0, 7.0, 7.0], MeanMode::FullSequence), vec![7.0]);
        assert_eq!(
            tau_of(&[7.0, 7.0, 7.0], MeanMode::CausalPrefix),
            vec![7.0; 3]
        );
        // prefix means 4, 12, 10 → clipped 5, 10, 10
        assert_eq!(
            tau_of(&[4.0, 20.0, 6.0], MeanMode::CausalPrefix),
            vec![5.0, 10.0, 10.0]
        );
    }

    #[test]
    fn single_token_attends_to_itself() {
        let l = layer(TemperaturePolicy::focal_constant(0.4));
        let x = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 * 0.1 - 0.3);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let opts = AttendOptions::new(10_000.0, 16);
        let (out, traces) = attend_with_trace(&mut g, xv, &l, &opts, 0, None).unwrap();
        for t in &traces {
            assert_eq!(t.rows[0].probs, vec![1.0]);
        }
        // output = v₀ · W^O
        let v: Vec<f64> = (0..8)
            .map(|j| (0..8).map(|i| x.data()[i] * l.wv.get(&[i, j])).sum())
            .collect();
        for j in 0..8 {
            let want: f64 = (0..8).map(|i| v[i] * l.wo.get(&[i, j])).sum();
            assert!((g.value(out.out)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_causal_rows() {
        let l = layer(TemperaturePolicy::Baseline);
        let row: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) * 0.2).collect();
        let x = Tensor::<f64>::from_fn(&[4, 8], |i| row[i % 8]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let mut opts = AttendOptions::new(10_000.0, 16);
        opts.rope = false;
        let (_, traces) = attend_with_trace(&mut g, xv, &l, &opts, 0, None).unwrap();
        for t in &traces {
            for r in &t.rows {
                for &p in &r.probs {
                    assert!((p - 1.0 / (r.query + 1) as f64).abs() < 1e-12);
                }
            }
            assert_eq!(t.rows[2].probs.len(), 3);
        }
    }

    #[test]
    fn context_overflow_is_a_config_error() {
        let l = layer(TemperaturePolicy::Baseline);
        let x = Tensor::<f64>::zeros(&[5, 8]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let opts = AttendOptions::new(10_000.0, 4);
        assert!(matches!(
            attend(&mut g, xv, &l, &opts),
            Err(FocalError::Config(_))
        ));
    }

    #[test]
    fn trace_row_limit_keeps_last_rows() {
        let l = layer(TemperaturePolicy::Baseline);
        let x = Tensor::<f64>::from_fn(&[6, 8], |i| (i as f64).sin());
        let mut g = Graph::new();
        let xv = g.param(&x);
        let opts = AttendOptions::new(10_000.0, 16);
        let (_, traces) = attend_with_trace(&mut g, xv, &l, &opts, 1, Some(2)).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(
            traces[0].rows.iter().map(|r| r.query).collect::<Vec<_>>(),
            vec![4, 5]
        );
        assert_eq!(traces[1].layer, 1);
    }
}
