//! AdamW, the warmup + cosine schedule and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::model::ParamMut;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Sequences per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Tokens per sequence.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    /// Steps between validation passes; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_val_batches")]
    pub val_batches: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_final_fraction() -> f64 {
    0.10
}
fn default_batch_size() -> usize {
    16
}
fn default_seq_len() -> usize {
    256
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    1.0
}
fn default_val_batches() -> usize {
    32
}

/// Optimizer settings of the reference training runs: model preset, peak
/// learning rate. All use 100K steps, 2000 warmup steps and batches of
/// 0.26M tokens (128 sequences of 2048).
pub const REFERENCE_TRAIN_PRESETS: [(&str, f64); 6] = [
    ("400M", 4e-3),
    ("777M", 2e-3),
    ("1.3B", 1e-3),
    ("2.7B", 5e-4),
    ("6.7B", 4e-4),
    ("9.5B", 4e-4),
];

impl TrainConfig {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        TrainConfig {
            peak_lr,
            final_lr_fraction: default_final_fraction(),
            warmup_steps,
            total_steps,
            batch_size: default_batch_size(),
            seq_len: default_seq_len(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_eps(),
            weight_decay: default_weight_decay(),
            grad_clip_norm: default_clip(),
            eval_every: 0,
            checkpoint_every: 0,
            val_batches: default_val_batches(),
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, lr) = REFERENCE_TRAIN_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| FocalError::Config(format!("unknown training preset `{name}`")))?;
        let mut c = TrainConfig::new(*lr, 2000, 100_000);
        c.batch_size = 128;
        c.seq_len = 2048;
        Ok(c)
    }

    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FocalError::Config(m.to_string()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad("need warmup_steps < total_steps");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return bad("adam_eps and grad_clip_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `final_lr_fraction · peak_lr` at `total_steps` (held afterwards).
pub fn lr_at(step: u64, c: &TrainConfig) -> f64 {
    if step < c.warmup_steps {
        return c.peak_lr * step as f64 / c.warmup_steps as f64;
    }
    let span = (c.total_steps - c.warmup_steps) as f64;
    let progress = ((step - c.warmup_steps) as f64 / span).min(1.0);
    let f = c.final_lr_fraction;
    c.peak_lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moments per parameter, in the order of the parameter
/// list handed to [`adamw_step`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[ParamMut<'_, T>]) -> Self {
        OptimizerState {
            step: 0,
            m: params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
            v: params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
        }
    }

    fn check(&self, params: &[ParamMut<'_, T>]) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().enumerate().all(|(i, p)| {
                self.m[i].len() == p.tensor.numel() && self.v[i].len() == p.tensor.numel()
            });
        if ok {
            Ok(())
        } else {
            Err(FocalError::Config(
                "optimizer state does not match the parameter list".into(),
            ))
        }
    }
}

/// Bias-corrected AdamW. Decoupled decay `θ ← θ − lr·wd·θ` is applied first,
/// only to parameters flagged `decay`. Gradients are checked for finiteness
/// before anything is mutated.
pub fn adamw_step<T: Scalar>(
    params: &mut [ParamMut<'_, T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    c: &TrainConfig,
) -> Result<()> {
    state.check(params)?;
    for p in params.iter() {
        match p.tensor.grad() {
            None => {
                return Err(FocalError::Usage(format!(
                    "parameter `{}` has no gradient",
                    p.name
                )));
            }
            Some(g) => {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(FocalError::Numerical(format!(
                        "non-finite gradient in `{}` at element {i}",
                        p.name
                    )));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr_t = T::of(lr);
    let decay = T::one() - T::of(lr * c.weight_decay);
    let eps = T::of(c.adam_eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (theta, grad) = p.tensor.value_and_grad_mut();
        let grad = grad.expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..theta.len() {
            if p.decay {
                theta[j] *= decay;
            }
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient.
pub fn grad_norm<T: Scalar>(params: &[ParamMut<'_, T>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients to global norm `max_norm` when they exceed it.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [ParamMut<'_, T>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: Vec<f64>, g: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        let mut t = Tensor::new(vec![n], v).unwrap().requires_grad();
        t.grad_mut().unwrap().copy_from_slice(&g);
        t
    }

    #[test]
    fn schedule_anchor_points() {
        let c = TrainConfig::new(1e-3, 10, 110);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert!((lr_at(110, &c) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(500, &c), lr_at(110, &c));
        assert!((lr_at(5, &c) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut t = param(vec![1.0], vec![1.0]);
        let mut c = TrainConfig::new(0.1, 1, 10);
        c.weight_decay = 0.0;
        let mut ps = vec![ParamMut {
            name: "x".into(),
            tensor: &mut t,
            decay: true,
        }];
        let mut st = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut st, 0.1, &c).unwrap();
        assert!((t.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decay_with_zero_gradient() {
        let mut t = param(vec![2.0, -4.0], vec![0.0, 0.0]);
        let mut c = TrainConfig::new(0.1, 1, 10);
        c.weight_decay = 0.5;
        let mut ps = vec![ParamMut {
            name: "x".into(),
            tensor: &mut t,
            decay: true,
        }];
        let mut st = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut st, 0.1, &c).unwrap();
        assert_eq!(t.data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn exempt_parameters_do_not_decay() {
        let mut t = param(vec![3.0], vec![0.0]);
        let c = TrainConfig::new(0.1, 1, 10);
        let mut ps = vec![ParamMut {
            name: "gain".into(),
            tensor: &mut t,
            decay: false,
        }];
        let mut st = OptimizerState::new(&ps);
        adamw_step(&mut ps, &mut st, 0.1, &c).unwrap();
        assert_eq!(t.data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = param(vec![1.0], vec![0.5]);
        let mut b = param(vec![1.0, 2.0], vec![0.0, f64::NAN]);
        let c = TrainConfig::new(0.1, 1, 10);
        let mut ps = vec![
            ParamMut {
                name: "a".into(),
                tensor: &mut a,
                decay: true,
            },
            ParamMut {
                name: "blocks.0.attn.wq".into(),
                tensor: &mut b,
                decay: true,
            },
        ];
        let mut st = OptimizerState::new(&ps);
        let err = adamw_step(&mut ps, &mut st, 0.1, &c).unwrap_err();
        assert!(matches!(err, FocalError::Numerical(_)));
        assert!(err.to_string().contains("blocks.0.attn.wq"));
        assert_eq!(st.step, 0);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn clipping_examples() {
        let mut t = param(vec![0.0, 0.0], vec![3.0, 4.0]);
        let mut ps = vec![ParamMut {
            name: "x".into(),
            tensor: &mut t,
            decay: true,
        }];
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        let g = t.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        let mut u = param(vec![0.0], vec![0.5]);
        let mut ps = vec![ParamMut {
            name: "u".into(),
            tensor: &mut u,
            decay: true,
        }];
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 0.5);
        assert_eq!(u.grad().unwrap(), &[0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(1e-3, 10, 100).validate().is_ok());
        assert!(TrainConfig::new(1e-3, 100, 100).validate().is_err());
        assert!(TrainConfig::new(0.0, 1, 100).validate().is_err());
        let p = TrainConfig::preset("2.7B").unwrap();
        assert_eq!(p.peak_lr, 5e-4);
        assert_eq!(p.warmup_steps, 2000);
        assert_eq!(p.total_steps, 100_000);
        assert_eq!(p.batch_tokens(), 262_144);
        assert!(TrainConfig::preset("3B").is_err());
        let err = serde_json::from_str::<TrainConfig>(
            r#"{"peak_lr":1e-3,"warmup_steps":1,"total_steps":2,"wieght_decay":0.1}"#,
        );
        assert!(err.is_err());
    }
}
