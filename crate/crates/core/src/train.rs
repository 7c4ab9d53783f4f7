//! AdamW training loop shared by pretraining, hard-pruning retraining and
//! projection training.
//!
//! Step `i` always consumes batch `i` of the stream, so a run resumed from a
//! checkpoint sees exactly the batches an uninterrupted run would.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::data::{Batch, TokenStream};
use crate::error::{Error, Result};
use crate::flops::{forward_flops, pc_step_overhead};
use crate::model::{forward, GptModel, Trainable, TransformerWeights};
use crate::plan::CompressionPlan;
use crate::projection::{attach_projections, ProjectedModel};
use crate::pruning::hard_prune;
use crate::tensor::Tensor;

/// Width of the reported loss window.
pub const LOSS_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to `min_lr_ratio · learning_rate`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Seed of the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 32,
            learning_rate: 3e-3,
            warmup_steps: 20,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("steps, batch_size and seq_len must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let lr = self.learning_rate;
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                let floor = lr * self.min_lr_ratio;
                floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }
}

/// First and second moments of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state. Moments exist only for trainable tensors, indexed like
/// [`Trainable::params`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    /// Number of scalars held in moment buffers.
    pub fn footprint(&self) -> usize {
        self.moments
            .iter()
            .flatten()
            .map(|m| m.m.len() + m.v.len())
            .sum()
    }
}

/// One AdamW update over `params`, reading each trainable tensor's grad.
/// Frozen tensors are skipped and never get moments.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if state.moments.is_empty() {
        state.moments = vec![None; params.len()];
    }
    if state.moments.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer state holds {} slots for {} parameters",
            state.moments.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((_, p), slot) in params.iter_mut().zip(state.moments.iter_mut()) {
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        let mo = slot.get_or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let decay = if p.shape().len() >= 2 {
            config.weight_decay
        } else {
            0.0
        };
        let g = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for i in 0..n {
            mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g[i];
            mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = mo.m[i] / c1;
            let v_hat = mo.v[i] / c2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + config.adam_eps) + decay * data[i]);
        }
    }
    Ok(())
}

/// Scales all trainable grads so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Tensor)], max_norm: Option<f64>) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            for (_, t) in params.iter_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    norm
}

/// Mean of the last `min(LOSS_WINDOW, len)` losses.
pub fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(LOSS_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
    /// Running hash over the consumed batches.
    pub batch_digest: [u8; 32],
}

impl TrainState {
    fn absorb(&mut self, batch: &Batch) {
        let mut h = Sha256::new();
        h.update(self.batch_digest);
        for &t in batch.inputs.iter().chain(&batch.targets) {
            h.update((t as u16).to_le_bytes());
        }
        self.batch_digest = h.finalize().into();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: usize,
    pub tokens: u64,
    pub first_loss: f64,
    pub last100_loss: f64,
    pub losses: Vec<f64>,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Scalars held by the optimizer (two per trainable scalar).
    pub optimizer_footprint: usize,
    /// Tensors that carry optimizer moments.
    pub tensors_with_moments: Vec<String>,
    pub forward_flops_per_step: u64,
    pub materialize_overhead_per_step: u64,
    pub batch_digest: String,
}

impl TrainReport {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.17e}\n"));
        }
        s
    }
}

/// Drives a [`Trainable`] through its steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: TrainState::default(),
        })
    }

    pub fn resume(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if state.losses.len() != state.step || state.step > config.steps {
            return Err(Error::Config(
                "train state inconsistent with its step".into(),
            ));
        }
        Ok(Self { config, state })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    fn check_stream(&self, stream: &TokenStream) -> Result<()> {
        if stream.seq_len() != self.config.seq_len || stream.seed() != self.config.seed {
            return Err(Error::Config(format!(
                "stream (seq_len {}, seed {}) differs from train config (seq_len {}, seed {})",
                stream.seq_len(),
                stream.seed(),
                self.config.seq_len,
                self.config.seed
            )));
        }
        Ok(())
    }

    /// Runs one optimizer step and returns its pre-update loss.
    pub fn step<M: Trainable>(&mut self, model: &mut M, stream: &mut TokenStream) -> Result<f64> {
        self.check_stream(stream)?;
        let step = self.state.step;
        let batch = stream.batch_at(step as u64, self.config.batch_size);
        let non_finite = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other,
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).map_err(non_finite)?;
        let logits = forward(
            &mut tape,
            &bound.weights,
            model.forward_config(),
            &batch.inputs,
            batch.batch_size,
        )
        .map_err(non_finite)?;
        let loss_var = tape
            .cross_entropy(logits, &batch.targets)
            .map_err(non_finite)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss_var)?;

        let mut params = model.params_mut();
        for ((name, t), leaf) in params.iter_mut().zip(&bound.leaves) {
            if !t.requires_grad() {
                continue;
            }
            let g = leaf
                .and_then(|v| grads.get(v))
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            t.accumulate_grad(g)?;
        }
        drop(tape);
        clip_grad_norm(&mut params, self.config.grad_clip_norm);
        let lr = self.config.lr_at(step);
        adamw_step(&mut params, &mut self.state.optimizer, lr, &self.config)?;
        for (_, t) in params.iter_mut() {
            t.zero_grad();
        }
        self.state.absorb(&batch);
        self.state.losses.push(loss);
        self.state.step += 1;
        Ok(loss)
    }

    /// Steps until `until` (capped at `config.steps`).
    pub fn run_until<M: Trainable>(
        &mut self,
        model: &mut M,
        stream: &mut TokenStream,
        until: usize,
    ) -> Result<()> {
        while self.state.step < until.min(self.config.steps) {
            self.step(model, stream)?;
        }
        Ok(())
    }

    pub fn report<M: Trainable>(&self, model: &M, overhead: u64) -> TrainReport {
        let params = model.params();
        let tensors_with_moments = params
            .iter()
            .zip(&self.state.optimizer.moments)
            .filter(|(_, m)| m.is_some())
            .map(|((n, _), _)| n.clone())
            .collect();
        let losses = self.state.losses.clone();
        TrainReport {
            config: self.config,
            steps: self.state.step,
            tokens: self.state.step as u64 * self.config.tokens_per_step(),
            first_loss: losses.first().copied().unwrap_or(f64::NAN),
            last100_loss: if losses.is_empty() {
                f64::NAN
            } else {
                tail_mean(&losses)
            },
            losses,
            trainable_params: model.trainable_count(),
            frozen_params: model.frozen_count(),
            optimizer_footprint: self.state.optimizer.footprint(),
            tensors_with_moments,
            forward_flops_per_step: forward_flops(
                model.forward_config(),
                self.config.batch_size,
                self.config.seq_len,
            ),
            materialize_overhead_per_step: overhead,
            batch_digest: hex::encode(self.state.batch_digest),
        }
    }
}

/// Trains `model` for `config.steps` steps from scratch.
pub fn train<M: Trainable>(
    model: &mut M,
    stream: &mut TokenStream,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut t = Trainer::new(*config)?;
    t.run_until(model, stream, config.steps)?;
    Ok(t.report(model, 0))
}

/// Like [`train`], with the per-step materialization overhead recorded.
pub fn train_projected(
    model: &mut ProjectedModel,
    stream: &mut TokenStream,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut t = Trainer::new(*config)?;
    t.run_until(model, stream, config.steps)?;
    Ok(t.report(model, pc_step_overhead(&model.plan)))
}

/// Mean loss over batches `0..n_batches` of `stream`, without updates.
pub fn evaluate<M: Trainable>(
    model: &M,
    stream: &mut TokenStream,
    n_batches: u64,
    batch_size: usize,
) -> Result<f64> {
    if n_batches == 0 {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut total = 0.0;
    for i in 0..n_batches {
        let b = stream.batch_at(i, batch_size);
        let logits = forward(
            &mut tape,
            &bound.weights,
            model.forward_config(),
            &b.inputs,
            batch_size,
        )?;
        let l = tape.cross_entropy(logits, &b.targets)?;
        total += tape.value(l)[0];
    }
    Ok(total / n_batches as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub compression_level: f64,
    pub residual: bool,
    pub pc: TrainReport,
    pub hpr: TrainReport,
    pub pc_last100: f64,
    pub hpr_last100: f64,
    /// `pc_last100 - hpr_last100`; negative means PC ended lower.
    pub margin: f64,
    /// Difference of the step-0 losses.
    pub initial_margin: f64,
    pub same_batches: bool,
}

/// Both arms after training, with the paired report.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub pc: ProjectedModel,
    pub hpr: GptModel,
}

/// Trains a PC arm and an HPR arm from the same base, plan, batches and
/// step count.
pub fn compare_pipelines(
    base: &TransformerWeights,
    plan: &CompressionPlan,
    residual: bool,
    stream: &TokenStream,
    config: &TrainConfig,
) -> Result<Comparison> {
    base.validate(&plan.source_config)?;
    let mut pc = attach_projections(base, plan, residual)?;
    let (cfg, w) = hard_prune(base, plan)?;
    let mut hpr = GptModel::new(cfg, w)?;

    let pc_report = train_projected(&mut pc, &mut stream.clone(), config)?;
    let hpr_report = train(&mut hpr, &mut stream.clone(), config)?;
    if pc_report.tokens != hpr_report.tokens {
        return Err(Error::Config("arms consumed different token counts".into()));
    }
    let report = ComparisonReport {
        compression_level: plan.compression_level,
        residual,
        pc_last100: pc_report.last100_loss,
        hpr_last100: hpr_report.last100_loss,
        margin: pc_report.last100_loss - hpr_report.last100_loss,
        initial_margin: pc_report.first_loss - hpr_report.first_loss,
        same_batches: pc_report.batch_digest == hpr_report.batch_digest,
        pc: pc_report,
        hpr: hpr_report,
    };
    Ok(Comparison { report, pc, hpr })
}
