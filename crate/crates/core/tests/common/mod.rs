#![allow(dead_code)]

use std::path::PathBuf;

use projcomp::autodiff::Tape;
use projcomp::importance::{ImportanceMethod, ModelScores};
use projcomp::model::{forward, ModelConfig, Trainable, TransformerWeights};
use projcomp::plan::{plan_compression, CompressionPlan};
use projcomp::projection::{attach_projections, ProjectedModel};
use projcomp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sonnets.txt")
}

pub fn config(n_layers: usize, n_heads: usize, d_model: usize, d_ff: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff,
        vocab_size: 257,
        seq_len: 32,
        layer_norm_eps: 1e-5,
        tied_embeddings: true,
    }
}

/// Weights with every slot random, including biases and gains, so
/// slicing mistakes show up in the outputs.
pub fn random_weights(config: &ModelConfig, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    w.for_each_mut(|name, t| {
        if !name.is_matrix() {
            for v in t.data_mut() {
                *v += 0.1 * r.random_range(-1.0..1.0);
            }
        }
    });
    w
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

pub fn plan(weights: &TransformerWeights, config: &ModelConfig, level: f64) -> CompressionPlan {
    let scores = ModelScores::compute(weights, config, ImportanceMethod::Magnitude).unwrap();
    plan_compression(config, level, &scores).unwrap()
}

/// Mean cross-entropy of `model` on next-token targets for `tokens`.
pub fn loss<M: Trainable>(model: &M, tokens: &[usize], targets: &[usize], batch: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let logits = forward(
        &mut tape,
        &bound.weights,
        model.forward_config(),
        tokens,
        batch,
    )
    .unwrap();
    let l = tape.cross_entropy(logits, targets).unwrap();
    tape.value(l)[0]
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// SHA-256 of a tensor's raw bits.
pub fn hash(t: &Tensor) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Names, freeze flags and values agree bit for bit (gradient buffers are
/// ignored).
pub fn same_params<A: Trainable, B: Trainable>(a: &A, b: &B) -> bool {
    let (pa, pb) = (a.params(), b.params());
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| {
            na == nb && ta.requires_grad() == tb.requires_grad() && ta.bit_eq(tb)
        })
}

/// Name and hash of every frozen tensor.
pub fn frozen_hashes<M: Trainable>(m: &M) -> Vec<(String, [u8; 32])> {
    m.params()
        .into_iter()
        .filter(|(_, t)| !t.requires_grad())
        .map(|(n, t)| (n, hash(t)))
        .collect()
}

fn is_projection(name: &str) -> bool {
    name.ends_with(".p1") || name.ends_with(".p2") || name.ends_with(".wr")
}

/// Moves every projection away from selection so gradients are generic.
pub fn perturb_projections(pc: &mut ProjectedModel, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in pc.params_mut() {
        if t.requires_grad() && is_projection(&name) {
            for v in t.data_mut() {
                *v += 0.05 * r.random_range(-1.0..1.0);
            }
        }
    }
}

pub struct FdCheck {
    pub checked: usize,
    pub worst: f64,
}

/// Central differences (h = 1e-5) against the tape gradient of every
/// P1, P2 and W_r tensor of a 1-layer model, `per_tensor` coordinates each.
pub fn projection_fd_check(per_tensor: usize, seed: u64) -> FdCheck {
    let c = ModelConfig {
        seq_len: 6,
        ..config(1, 2, 8, 12)
    };
    // At the 0.02 init scale attention is nearly uniform and the key
    // gradients sit near the f64 roundoff floor of a central difference.
    let mut base = random_weights(&c, 21);
    base.for_each_mut(|name, t| {
        if name.is_matrix() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    });
    let p = plan(&base, &c, 0.5);
    let mut pc = attach_projections(&base, &p, true).unwrap();
    perturb_projections(&mut pc, 4);
    let tokens = random_tokens(2 * 6, c.vocab_size, 5);
    let targets = random_tokens(2 * 6, c.vocab_size, 6);

    let mut tape = Tape::new();
    let bound = pc.bind(&mut tape).unwrap();
    let logits = forward(&mut tape, &bound.weights, pc.forward_config(), &tokens, 2).unwrap();
    let l = tape.cross_entropy(logits, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = pc
        .params()
        .iter()
        .zip(&bound.leaves)
        .filter(|((n, _), _)| is_projection(n))
        .map(|((n, _), leaf)| (n.clone(), grads.get(leaf.unwrap()).unwrap().to_vec()))
        .collect();

    let h = 1e-5;
    let mut r = rng(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        for _ in 0..per_tensor {
            let j = r.random_range(0..g.len());
            let at = |delta: f64| {
                let mut m = pc.clone();
                for (n, t) in m.params_mut() {
                    if &n == name {
                        t.data_mut()[j] += delta;
                    }
                }
                loss(&m, &tokens, &targets, 2)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let denom = g[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((g[j] - numeric).abs() / denom);
            checked += 1;
        }
    }
    FdCheck { checked, worst }
}
