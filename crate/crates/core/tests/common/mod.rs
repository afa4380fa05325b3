//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `f64` and shares no
//! code with the library beyond reading parameter values.

#![allow(dead_code)]

use focal_core::attention::{AttentionLayer, MeanMode};
use focal_core::{Scalar, TemperaturePolicy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `y = x · w` for row-major `x[n × k]`, `w[k × m]`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += x[i * k + l] * w[l * m + j];
            }
            y[i * m + j] = s;
        }
    }
    y
}

fn rms_norm(v: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    v.iter().zip(gain).map(|(a, g)| a * r * g).collect()
}

/// Rotates consecutive pairs `(2i, 2i+1)` by `pos · θ^(-2i/d)`.
fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

fn values<T: Scalar>(t: &focal_core::Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Learned temperature per query row.
fn reference_tau(x: &[f64], w: &[f64], n: usize, d: usize, policy: &TemperaturePolicy) -> Vec<f64> {
    let TemperaturePolicy::FocalLearned {
        tau_min,
        tau_max,
        mean_mode,
        ..
    } = *policy
    else {
        unreachable!()
    };
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| x[i * d + j] * w[j]).sum())
        .collect();
    let clip = |v: f64| v.max(tau_min).min(tau_max);
    match mean_mode {
        MeanMode::FullSequence => vec![clip(proj.iter().sum::<f64>() / n as f64); n],
        MeanMode::CausalPrefix => (0..n)
            .map(|i| clip(proj[..=i].iter().sum::<f64>() / (i + 1) as f64))
            .collect(),
    }
}

/// Multi-head attention of `x[n × d_model]` written out element by element:
/// project, RMS-normalize each query/key head, rotate, score, divide by the
/// policy's temperature, mask the future, softmax, mix values, project out.
pub fn reference_attention<T: Scalar>(
    x: &[f64],
    n: usize,
    layer: &AttentionLayer<T>,
    theta: f64,
    eps: f64,
    causal: bool,
) -> Vec<f64> {
    let (h, dh) = (layer.n_heads, layer.d_head);
    let d = h * dh;
    let q = matmul(x, &values(&layer.wq), n, d, d);
    let k = matmul(x, &values(&layer.wk), n, d, d);
    let v = matmul(x, &values(&layer.wv), n, d, d);
    let (qg, kg) = (values(&layer.q_gain), values(&layer.k_gain));
    let tau: Vec<f64> = match layer.policy {
        TemperaturePolicy::Baseline => vec![(dh as f64).sqrt(); n],
        TemperaturePolicy::FocalConstant { t } => vec![t * (dh as f64).sqrt(); n],
        TemperaturePolicy::FocalLearned { .. } => {
            let w = values(layer.w_tau.as_ref().expect("learned layer has w_tau"));
            reference_tau(x, &w, n, d, &layer.policy)
        }
    };

    let mut merged = vec![0.0; n * d];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        let qs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = rms_norm(&q[i * d..][cols.clone()], &qg, eps);
                rotate(&mut r, i, theta);
                r
            })
            .collect();
        let ks: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut r = rms_norm(&k[j * d..][cols.clone()], &kg, eps);
                rotate(&mut r, j, theta);
                r
            })
            .collect();
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / tau[i])
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..visible {
                    acc += e[j] / z * v[j * d + head * dh + c];
                }
                merged[i * d + head * dh + c] = acc;
            }
        }
    }
    matmul(&merged, &values(&layer.wo), n, d, d)
}

/// A layer with O(1) weights so errors are measured against O(1) outputs.
pub fn random_layer<T: Scalar>(
    d: usize,
    h: usize,
    policy: TemperaturePolicy,
    rng: &mut ChaCha8Rng,
) -> AttentionLayer<T> {
    let mut l = AttentionLayer::<T>::new(d, h, policy, 1.0, rng).unwrap();
    let scale = 1.0 / (d as f64).sqrt();
    for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
        for v in w.data_mut() {
            *v = T::of(rng.gen_range(-2.0..2.0) * scale);
        }
    }
    for gain in [&mut l.q_gain, &mut l.k_gain] {
        for v in gain.data_mut() {
            *v = T::of(rng.gen_range(0.5..1.5));
        }
    }
    if let Some(w) = l.w_tau.as_mut() {
        for v in w.data_mut() {
            *v = T::of(rng.gen_range(-4.0..4.0));
        }
    }
    l
}

/// Textbook AdamW on one scalar with decoupled decay applied before the
/// moment update.
#[derive(Debug, Clone, Copy)]
pub struct ScalarAdamW {
    pub theta: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdamW {
    pub fn new(theta: f64) -> Self {
        ScalarAdamW {
            theta,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, grad: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64, decay: bool) {
        self.t += 1;
        if decay {
            self.theta -= lr * wd * self.theta;
        }
        self.m = b1 * self.m + (1.0 - b1) * grad;
        self.v = b2 * self.v + (1.0 - b2) * grad * grad;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        self.theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Warmup then cosine decay to `final_fraction · peak`, written from the
/// schedule definition.
pub fn reference_lr(step: u64, peak: f64, warmup: u64, total: u64, final_fraction: f64) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
        let floor = final_fraction * peak;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
