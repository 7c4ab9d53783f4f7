//! Closed-form matmul FLOP counts for training-step cost comparisons.
//!
//! Every matmul `[m×k]·[k×n]` costs `2·m·k·n`. Elementwise work (norms,
//! softmax, GELU, bias adds, the `W_r` addition) is left out: it is the same
//! on both arms of a comparison. A backward pass is costed at twice its
//! forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{FlopCounts, Tape};
use crate::error::Result;
use crate::model::{forward, ModelConfig, Trainable};
use crate::plan::CompressionPlan;
use crate::projection::site_flops;

/// Backward FLOPs as a multiple of forward FLOPs.
pub const BACKWARD_FACTOR: u64 = 2;

/// Forward FLOPs over `batch·seq` tokens: Q/K/V/O and FFN projections,
/// attention scores and mixing, and the unembedding.
pub fn forward_flops(config: &ModelConfig, batch: usize, seq: usize) -> u64 {
    let (b, s) = (batch as u64, seq as u64);
    let t = b * s;
    let d = config.d_model as u64;
    let f = config.d_ff as u64;
    let v = config.vocab_size as u64;
    let projections = 4 * 2 * t * d * d;
    let ffn = 2 * 2 * t * d * f;
    // per head: scores [S×hd]·[hd×S] and mix [S×S]·[S×hd]; heads·hd = d
    let attention = 2 * 2 * b * s * s * d;
    let per_layer = projections + ffn + attention;
    config.n_layers as u64 * per_layer + 2 * t * d * v
}

/// FLOPs of materializing every site once.
pub fn materialization_flops(plan: &CompressionPlan) -> u64 {
    let src = &plan.source_config;
    plan.site_map
        .iter()
        .map(|(name, sides)| {
            let shape = name.shape(src);
            let dims = name.dims();
            let ds_in = sides
                .left()
                .then(|| plan.kept_for(dims[0]).map(|k| k.kept_dim()))
                .flatten();
            let ds_out = sides
                .right()
                .then(|| plan.kept_for(dims[1]).map(|k| k.kept_dim()))
                .flatten();
            site_flops(shape[0], shape[1], ds_in, ds_out)
        })
        .sum()
}

/// Extra FLOPs per PC optimizer step: materialization forward plus its
/// backward. Independent of batch size and sequence length.
pub fn pc_step_overhead(plan: &CompressionPlan) -> u64 {
    (1 + BACKWARD_FACTOR) * materialization_flops(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub batch: usize,
    pub seq: usize,
    pub base_forward_per_token: u64,
    pub compressed_forward_per_token: u64,
    /// Forward through materialized weights; the PC arm runs the target
    /// architecture.
    pub pc_forward_per_token: u64,
    pub pc_forward_step: u64,
    pub hpr_forward_step: u64,
    pub materialization_step: u64,
    pub pc_step_overhead: u64,
    /// `pc_step_overhead / (3 · forward FLOPs of one step)`.
    pub overhead_fraction: f64,
    /// Ratio of compressed to base per-token forward FLOPs.
    pub compressed_to_base: f64,
    pub parity: bool,
}

pub fn parity_report(plan: &CompressionPlan, batch: usize, seq: usize) -> FlopsBreakdown {
    let tokens = (batch * seq) as u64;
    let base = forward_flops(&plan.source_config, batch, seq);
    let hpr = forward_flops(&plan.target_config, batch, seq);
    let pc = forward_flops(&plan.target_config, batch, seq);
    let overhead = pc_step_overhead(plan);
    FlopsBreakdown {
        batch,
        seq,
        base_forward_per_token: base / tokens,
        compressed_forward_per_token: hpr / tokens,
        pc_forward_per_token: pc / tokens,
        pc_forward_step: pc,
        hpr_forward_step: hpr,
        materialization_step: materialization_flops(plan),
        pc_step_overhead: overhead,
        overhead_fraction: overhead as f64 / ((1 + BACKWARD_FACTOR) * pc) as f64,
        compressed_to_base: hpr as f64 / base as f64,
        parity: pc == hpr,
    }
}

/// CSV `batch,seq,tokens,forward_step,overhead,overhead_fraction`.
pub fn overhead_csv(plan: &CompressionPlan, seq: usize, batches: &[usize]) -> String {
    let mut out = String::from("batch,seq,tokens,forward_step,overhead,overhead_fraction\n");
    for &b in batches {
        let r = parity_report(plan, b, seq);
        out.push_str(&format!(
            "{b},{seq},{},{},{},{:.9e}\n",
            b * seq,
            r.pc_forward_step,
            r.pc_step_overhead,
            r.overhead_fraction
        ));
    }
    out
}

/// Matmul FLOPs counted by the tape for one bind plus forward pass.
pub fn instrumented_flops<M: Trainable>(
    model: &M,
    tokens: &[usize],
    batch: usize,
) -> Result<FlopCounts> {
    let mut tape = Tape::new();
    tape.enable_flop_count();
    let bound = model.bind(&mut tape)?;
    forward(
        &mut tape,
        &bound.weights,
        model.forward_config(),
        tokens,
        batch,
    )?;
    Ok(tape.flops())
}
