//! The training loop: batch, forward, loss, backward, clip, AdamW, schedule.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{save_checkpoint, step_dir, Checkpoint};
use crate::data::{Batch, PackedDataset, PAD};
use crate::error::{FocalError, Result};
use crate::model::Model;
use crate::optim::{adamw_step, clip_grad_norm, lr_at, OptimizerState, TrainConfig};
use crate::tensor::Scalar;

/// Anything that can hand out the batch for a given step.
pub trait BatchSource {
    fn batch_at(&self, step: u64) -> Batch;
}

impl BatchSource for PackedDataset {
    fn batch_at(&self, step: u64) -> Batch {
        PackedDataset::batch_at(self, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Number of optimizer updates completed, counting this one.
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Per layer; empty for fixed-temperature policies.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tau: Vec<TauStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

fn target_count(targets: &[usize]) -> usize {
    targets.iter().filter(|&&t| t != PAD).count()
}

/// Token-weighted mean loss over every sequence of `batches`. Leaves the
/// model untouched.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for seq in batches.iter().flat_map(|b| &b.sequences) {
        let n = target_count(&seq.targets);
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let (loss, _) = model.loss(&mut g, &seq.inputs, &seq.targets, PAD)?;
        sum += g.scalar_value(loss).as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(FocalError::Data(
            "validation set has no scored tokens".into(),
        ));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    pub data_seed: u64,
    /// Updates completed so far.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig, data_seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params_mut());
        Ok(Trainer {
            model,
            optimizer,
            config,
            data_seed,
            step: 0,
        })
    }

    /// Continues from a checkpoint. `config` overrides the stored training
    /// config; a checkpoint without optimizer state starts fresh moments.
    pub fn resume(ck: Checkpoint<T>, config: Option<TrainConfig>) -> Result<Self> {
        let config = config.or(ck.manifest.train.clone()).ok_or_else(|| {
            FocalError::Config("checkpoint has no training config; supply one".into())
        })?;
        let mut t = Trainer::new(ck.model, config, ck.manifest.data_seed)?;
        t.step = ck.manifest.step;
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        Ok(t)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        let total: usize = batch
            .sequences
            .iter()
            .map(|s| target_count(&s.targets))
            .sum();
        if total == 0 {
            return Err(FocalError::Data(format!(
                "batch at step {} has no scored tokens",
                self.step
            )));
        }
        let n_layers = self.model.config.n_layers;
        let mut tau_acc: Vec<(f64, usize, f64, f64)> =
            vec![(0.0, 0, f64::INFINITY, f64::NEG_INFINITY); n_layers];
        self.model.zero_grad();
        let mut loss_sum = 0.0f64;
        for seq in &batch.sequences {
            let n = target_count(&seq.targets);
            if n == 0 {
                continue;
            }
            let mut g = Graph::new();
            let (loss, out) = self.model.loss(&mut g, &seq.inputs, &seq.targets, PAD)?;
            let value = g.scalar_value(loss).as_f64();
            if !value.is_finite() {
                return Err(FocalError::Numerical(format!(
                    "non-finite loss at step {}",
                    self.step + 1
                )));
            }
            loss_sum += value * n as f64;
            for (l, tau) in out.taus.iter().enumerate() {
                if let Some(tau) = tau {
                    let acc = &mut tau_acc[l];
                    for &x in g.value(*tau) {
                        let x = x.as_f64();
                        acc.0 += x;
                        acc.1 += 1;
                        acc.2 = acc.2.min(x);
                        acc.3 = acc.3.max(x);
                    }
                }
            }
            let weighted = g.scale(loss, T::of(n as f64 / total as f64));
            g.backward(weighted)?;
            self.model.accumulate_grads(&g);
        }

        let lr = lr_at(self.step + 1, &self.config);
        let mut params = self.model.params_mut();
        let grad_norm = clip_grad_norm(&mut params, self.config.grad_clip_norm);
        adamw_step(&mut params, &mut self.optimizer, lr, &self.config)?;
        drop(params);
        self.step += 1;

        Ok(StepLog {
            step: self.step,
            lr,
            train_loss: loss_sum / total as f64,
            grad_norm,
            tau: tau_acc
                .into_iter()
                .filter(|a| a.1 > 0)
                .map(|(s, n, lo, hi)| TauStats {
                    mean: s / n as f64,
                    min: lo,
                    max: hi,
                })
                .collect(),
            val_loss: None,
            wall_time: 0.0,
        })
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        save_checkpoint(
            dir,
            &self.model,
            Some(&self.optimizer),
            self.step,
            Some(&self.config),
            self.data_seed,
            extra,
        )
    }

    /// Trains until `config.total_steps`, evaluating on `val` every
    /// `eval_every` steps and at the end, and checkpointing under `ckpt_root`
    /// every `checkpoint_every` steps and at the end. `on_step` sees each log
    /// as soon as it exists.
    pub fn run(
        &mut self,
        data: &dyn BatchSource,
        val: &[Batch],
        ckpt_root: Option<&Path>,
        on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
    ) -> Result<RunRecord> {
        self.run_until(self.config.total_steps, data, val, ckpt_root, on_step)
    }

    /// As [`Trainer::run`] but stops after update `until`.
    pub fn run_until(
        &mut self,
        until: u64,
        data: &dyn BatchSource,
        val: &[Batch],
        ckpt_root: Option<&Path>,
        on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
    ) -> Result<RunRecord> {
        let start = Instant::now();
        let mut steps = Vec::new();
        let mut last_val = None;
        while self.step < until {
            let batch = data.batch_at(self.step);
            let mut log = self.train_step(&batch)?;
            let at_end = self.step == until;
            let eval_now = !val.is_empty()
                && (at_end
                    || (self.config.eval_every > 0
                        && self.step.is_multiple_of(self.config.eval_every)));
            if eval_now {
                let v = evaluate_loss(&self.model, val)?;
                log.val_loss = Some(v);
                last_val = Some(v);
            }
            log.wall_time = start.elapsed().as_secs_f64();
            if let Some(root) = ckpt_root {
                let periodic = self.config.checkpoint_every > 0
                    && self.step.is_multiple_of(self.config.checkpoint_every);
                if periodic || at_end {
                    self.save(
                        &step_dir(root, self.step),
                        serde_json::json!({ "val_loss": last_val }),
                    )?;
                }
            }
            on_step(&log)?;
            steps.push(log);
        }
        let final_train_loss = steps.last().map_or(f64::NAN, |s| s.train_loss);
        Ok(RunRecord {
            steps,
            final_train_loss,
            final_val_loss: last_val,
        })
    }
}

/// Trains `model` from scratch on `data` for `config.total_steps` updates.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &PackedDataset,
    val: &[Batch],
    config: &TrainConfig,
) -> Result<(Model<T>, RunRecord)> {
    let mut t = Trainer::new(model, config.clone(), data.seed)?;
    let record = t.run(data, val, None, &mut |_| Ok(()))?;
    Ok((t.model, record))
}
