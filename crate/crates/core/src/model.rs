//! LLaMA-style decoder-only transformer: pre-norm residual blocks of
//! attention and SwiGLU feed-forward, RMSNorm, RoPE, QK-norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, attend_with_trace, AttendOptions, AttentionLayer, TemperaturePolicy,
};
use crate::autodiff::{Graph, Var};
use crate::diagnostics::AttentionTrace;
use crate::error::{FocalError, Result};
use crate::tensor::{Scalar, Tensor};

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_true() -> bool {
    true
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub temperature: TemperaturePolicy,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Architecture presets of the 400M–9.5B family: (name, hidden, intermediate,
/// heads, layers).
pub const REFERENCE_PRESETS: [(&str, usize, usize, usize, usize); 6] = [
    ("400M", 1024, 3072, 8, 24),
    ("777M", 1536, 4096, 12, 24),
    ("1.3B", 2048, 5504, 16, 24),
    ("2.7B", 2560, 6912, 20, 32),
    ("6.7B", 4096, 11008, 32, 32),
    ("9.5B", 4608, 12288, 36, 36),
];

/// Vocabulary of the LLaMA tokenizer used by the large presets.
pub const PRESET_VOCAB: usize = 32_000;
pub const PRESET_CONTEXT: usize = 2048;

impl ModelConfig {
    /// Desk-scale model: 2 layers, width 64, 4 heads, byte vocabulary.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 176,
            vocab_size: crate::data::BYTE_VOCAB,
            max_context: 256,
            rope_theta: default_rope_theta(),
            temperature: TemperaturePolicy::Baseline,
            tie_embeddings: true,
            norm_eps: default_norm_eps(),
            seed: 0,
        }
    }

    /// Named preset: `toy` or one of [`REFERENCE_PRESETS`]. The large presets use
    /// untied embeddings and the 32K vocabulary so their parameter counts
    /// land on the nominal sizes.
    pub fn preset(name: &str) -> Result<Self> {
        if name == "toy" {
            return Ok(Self::toy());
        }
        let &(_, hidden, inter, heads, layers) = REFERENCE_PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| FocalError::Config(format!("unknown model preset {name:?}")))?;
        Ok(ModelConfig {
            n_layers: layers,
            d_model: hidden,
            n_heads: heads,
            d_ffn: inter,
            vocab_size: PRESET_VOCAB,
            max_context: PRESET_CONTEXT,
            rope_theta: default_rope_theta(),
            temperature: TemperaturePolicy::Baseline,
            tie_embeddings: false,
            norm_eps: default_norm_eps(),
            seed: 0,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(FocalError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FocalError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(FocalError::Config(format!(
                "head width {} must be even for RoPE",
                self.d_head()
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return Err(FocalError::Config(
                "rope_theta and norm_eps must be positive".into(),
            ));
        }
        self.temperature.validate()
    }

    pub fn attend_options(&self) -> AttendOptions {
        let mut o = AttendOptions::new(self.rope_theta, self.max_context);
        o.norm_eps = self.norm_eps;
        o
    }
}

/// Exact parameter count for a configuration.
pub fn count_params(config: &ModelConfig) -> u64 {
    let (v, d, f) = (
        config.vocab_size as u64,
        config.d_model as u64,
        config.d_ffn as u64,
    );
    let dh = config.d_head() as u64;
    let per_layer = 2 * d          // attention and ffn norm gains
        + 4 * d * d                // W^Q, W^K, W^V, W^O
        + 2 * dh                   // QK-norm gains
        + 3 * d * f                // gate, up, down
        + if config.temperature.is_learned() { d } else { 0 };
    let embeddings = if config.tie_embeddings {
        v * d
    } else {
        2 * v * d
    };
    embeddings + d + config.n_layers as u64 * per_layer
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionLayer<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    /// Separate output head `[vocab × d_model]` when embeddings are untied.
    pub head: Option<Tensor<T>>,
}

/// Mutable view of one trainable tensor.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    /// False for norm gains and `w_τ`.
    pub decay: bool,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Learned temperature node of each layer (None for fixed policies).
    pub taus: Vec<Option<Var>>,
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng))).requires_grad()
}

fn ones<T: Scalar>(d: usize) -> Tensor<T> {
    Tensor::filled(&[d], T::one()).requires_grad()
}

/// Weights ~ normal(0, 0.02), residual output projections scaled by
/// `1/√(2·n_layers)`, norm gains at 1. Deterministic in `config.seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let embed = normal(&[v, d], 0.02, &mut rng);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn = AttentionLayer::new(d, config.n_heads, config.temperature, out_scale, &mut rng)?;
        blocks.push(Block {
            attn_norm: ones(d),
            attn,
            ffn_norm: ones(d),
            w_gate: normal(&[d, f], 0.02, &mut rng),
            w_up: normal(&[d, f], 0.02, &mut rng),
            w_down: normal(&[f, d], 0.02 * out_scale, &mut rng),
        });
    }
    let head = (!config.tie_embeddings).then(|| normal(&[v, d], 0.02, &mut rng));
    Ok(Model {
        config: config.clone(),
        embed,
        blocks,
        final_norm: ones(d),
        head,
    })
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        init_params(config)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(FocalError::Data("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(FocalError::Config(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(FocalError::Data(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[n × vocab]` for a token sequence.
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<ForwardOutput> {
        self.forward_impl(g, tokens, None)
    }

    /// Forward pass that also records attention rows of every layer/head.
    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        row_limit: Option<usize>,
    ) -> Result<(ForwardOutput, Vec<AttentionTrace>)> {
        let mut traces = Vec::new();
        let out = self.forward_impl(g, tokens, Some((&mut traces, row_limit)))?;
        Ok((out, traces))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        mut trace: Option<(&mut Vec<AttentionTrace>, Option<usize>)>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let eps = T::of(self.config.norm_eps);
        let opts = self.config.attend_options();
        let embed = g.param(&self.embed);
        let mut x = g.gather_rows(embed, tokens)?;
        let mut taus = Vec::with_capacity(self.blocks.len());
        for (li, block) in self.blocks.iter().enumerate() {
            let gain = g.param(&block.attn_norm);
            let h = g.rms_norm(x, gain, eps)?;
            let a = match trace.as_mut() {
                Some((sink, limit)) => {
                    let (a, t) = attend_with_trace(g, h, &block.attn, &opts, li, *limit)?;
                    sink.extend(t);
                    a
                }
                None => attend(g, h, &block.attn, &opts)?,
            };
            taus.push(a.tau);
            x = g.add(x, a.out)?;

            let gain = g.param(&block.ffn_norm);
            let h = g.rms_norm(x, gain, eps)?;
            let (wg, wu, wd) = (
                g.param(&block.w_gate),
                g.param(&block.w_up),
                g.param(&block.w_down),
            );
            let f = g.swiglu(h, wg, wu, wd)?;
            x = g.add(x, f)?;
        }
        let gain = g.param(&self.final_norm);
        let x = g.rms_norm(x, gain, eps)?;
        let head = match &self.head {
            Some(h) => g.param(h),
            None => embed,
        };
        let logits = g.matmul_nt(x, head)?;
        Ok(ForwardOutput { logits, taus })
    }

    /// Mean next-token loss; `targets` equal to `ignore` are skipped.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        targets: &[usize],
        ignore: usize,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, tokens)?;
        let loss = g.cross_entropy(out.logits, targets, ignore)?;
        Ok((loss, out))
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("attn_norm"), &b.attn_norm));
            out.push((p("attn.wq"), &b.attn.wq));
            out.push((p("attn.wk"), &b.attn.wk));
            out.push((p("attn.wv"), &b.attn.wv));
            out.push((p("attn.wo"), &b.attn.wo));
            out.push((p("attn.q_gain"), &b.attn.q_gain));
            out.push((p("attn.k_gain"), &b.attn.k_gain));
            if let Some(w) = &b.attn.w_tau {
                out.push((p("attn.w_tau"), w));
            }
            out.push((p("ffn_norm"), &b.ffn_norm));
            out.push((p("ffn.w_gate"), &b.w_gate));
            out.push((p("ffn.w_up"), &b.w_up));
            out.push((p("ffn.w_down"), &b.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn pm<'a, T>(name: String, tensor: &'a mut Tensor<T>, decay: bool) -> ParamMut<'a, T> {
            ParamMut {
                name,
                tensor,
                decay,
            }
        }
        let mut out = vec![pm("embed".into(), &mut self.embed, true)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push(pm(p("attn_norm"), &mut b.attn_norm, false));
            out.push(pm(p("attn.wq"), &mut b.attn.wq, true));
            out.push(pm(p("attn.wk"), &mut b.attn.wk, true));
            out.push(pm(p("attn.wv"), &mut b.attn.wv, true));
            out.push(pm(p("attn.wo"), &mut b.attn.wo, true));
            out.push(pm(p("attn.q_gain"), &mut b.attn.q_gain, false));
            out.push(pm(p("attn.k_gain"), &mut b.attn.k_gain, false));
            if let Some(w) = b.attn.w_tau.as_mut() {
                out.push(pm(p("attn.w_tau"), w, false));
            }
            out.push(pm(p("ffn_norm"), &mut b.ffn_norm, false));
            out.push(pm(p("ffn.w_gate"), &mut b.w_gate, true));
            out.push(pm(p("ffn.w_up"), &mut b.w_up, true));
            out.push(pm(p("ffn.w_down"), &mut b.w_down, true));
        }
        out.push(pm("final_norm".into(), &mut self.final_norm, false));
        if let Some(h) = self.head.as_mut() {
            out.push(pm("head".into(), h, true));
        }
        out
    }

    pub fn num_params(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Pulls this graph's leaf gradients into every parameter.
    pub fn accumulate_grads(&mut self, g: &Graph<T>) {
        for p in self.params_mut() {
            g.accumulate_into(p.tensor);
        }
    }

    /// Overrides every layer's temperature policy in place.
    pub fn set_temperature(&mut self, policy: TemperaturePolicy) -> Result<()> {
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7a75_5f74_6175);
        for b in &mut self.blocks {
            b.attn.set_policy(policy, &mut rng)?;
        }
        self.config.temperature = policy;
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embed: self.embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: b.attn_norm.cast(),
                    attn: AttentionLayer {
                        wq: b.attn.wq.cast(),
                        wk: b.attn.wk.cast(),
                        wv: b.attn.wv.cast(),
                        wo: b.attn.wo.cast(),
                        q_gain: b.attn.q_gain.cast(),
                        k_gain: b.attn.k_gain.cast(),
                        w_tau: b.attn.w_tau.as_ref().map(|w| w.cast()),
                        policy: b.attn.policy,
                        n_heads: b.attn.n_heads,
                        d_head: b.attn.d_head,
                    },
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.as_ref().map(|h| h.cast()),
        }
    }
}
