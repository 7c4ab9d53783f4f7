mod common;

use common::{plan, random_tokens, random_weights};
use projcomp::autodiff::{FlopCategory, FlopCounts, Tape};
use projcomp::flops::{
    forward_flops, instrumented_flops, materialization_flops, overhead_csv, parity_report,
    pc_step_overhead,
};
use projcomp::model::{GptModel, ModelConfig};
use projcomp::plan::LEVEL_PRESETS;
use projcomp::projection::{attach_projections, site_flops};
use projcomp::pruning::hard_prune;
use projcomp::Tensor;

fn toy() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 8,
        d_model: 64,
        d_ff: 256,
        vocab_size: 257,
        seq_len: 128,
        layer_norm_eps: 1e-5,
        tied_embeddings: true,
    }
}

#[test]
fn single_linear_on_one_token() {
    let mut tape = Tape::new();
    tape.enable_flop_count();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let w = tape.constant(Tensor::zeros(&[4, 4]));
    tape.matmul(x, w).unwrap();
    assert_eq!(
        tape.flops(),
        FlopCounts {
            forward: 32,
            materialize: 0
        }
    );
    tape.set_flop_category(FlopCategory::Materialize);
    tape.matmul(x, w).unwrap();
    assert_eq!(tape.flops().materialize, 32);
}

#[test]
fn one_layer_matches_hand_enumeration() {
    let c = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 257,
        seq_len: 16,
        layer_norm_eps: 1e-5,
        tied_embeddings: true,
    };
    let (b, s) = (3usize, 5usize);
    let t = b * s;
    let hd = 4;
    let mut products: Vec<(usize, usize, usize)> = vec![
        (t, 8, 8), // Q
        (t, 8, 8), // K
        (t, 8, 8), // V
    ];
    for _ in 0..b * 2 {
        products.push((s, hd, s)); // scores
        products.push((s, s, hd)); // mix
    }
    products.push((t, 8, 8)); // O
    products.push((t, 8, 12)); // w1
    products.push((t, 12, 8)); // w2
    products.push((t, 8, 257)); // unembedding
    let expect: u64 = products
        .iter()
        .map(|&(m, k, n)| 2 * (m * k * n) as u64)
        .sum();
    assert_eq!(forward_flops(&c, b, s), expect);
    assert_eq!(forward_flops(&c, 2 * b, s), 2 * expect);
}

#[test]
fn materialization_example_and_one_sided_sites() {
    assert_eq!(
        site_flops(4, 4, Some(2), Some(2)),
        2 * 2 * 4 * 4 + 2 * 2 * 4 * 2
    );
    assert_eq!(site_flops(4, 4, Some(2), Some(2)), 96);
    assert_eq!(site_flops(4, 4, None, Some(2)), 2 * 4 * 4 * 2);
    assert_eq!(site_flops(4, 4, Some(2), None), 2 * 2 * 4 * 4);
}

#[test]
fn parity_for_every_preset() {
    let c = toy();
    let base = random_weights(&c, 1);
    for (name, level) in LEVEL_PRESETS {
        let p = plan(&base, &c, level);
        let r = parity_report(&p, 16, 128);
        assert!(r.parity, "preset {name}");
        assert_eq!(r.pc_forward_per_token, r.compressed_forward_per_token);
        assert!(r.compressed_to_base < 1.0);
        // the projected model's forward through materialized weights costs
        // exactly the hard-pruned forward
        let tokens = random_tokens(2 * 16, c.vocab_size, 2);
        let pc = attach_projections(&base, &p, true).unwrap();
        let (hc, hw) = hard_prune(&base, &p).unwrap();
        let hpr = GptModel::new(hc, hw).unwrap();
        let pc_counts = instrumented_flops(&pc, &tokens, 2).unwrap();
        let hpr_counts = instrumented_flops(&hpr, &tokens, 2).unwrap();
        assert_eq!(pc_counts.forward, hpr_counts.forward);
        assert_eq!(pc_counts.forward, forward_flops(&p.target_config, 2, 16));
        assert_eq!(pc_counts.materialize, materialization_flops(&p));
        assert_eq!(hpr_counts.materialize, 0);
    }
}

#[test]
fn instrumented_base_forward_matches_closed_form() {
    for tied in [true, false] {
        let c = ModelConfig {
            tied_embeddings: tied,
            ..toy()
        };
        let m = GptModel::init(c, 0).unwrap();
        for (b, s) in [(1, 1), (2, 7), (3, 16)] {
            let tokens = random_tokens(b * s, c.vocab_size, 3);
            let counts = instrumented_flops(&m, &tokens, b).unwrap();
            assert_eq!(counts.forward, forward_flops(&c, b, s));
            assert_eq!(counts.materialize, 0);
        }
    }
}

#[test]
fn overhead_is_batch_independent_and_amortizes() {
    let c = toy();
    let base = random_weights(&c, 2);
    let p = plan(&base, &c, 0.5);
    let one = parity_report(&p, 1, 128);
    let many = parity_report(&p, 4096, 128);
    assert_eq!(one.pc_step_overhead, many.pc_step_overhead);
    assert_eq!(one.pc_step_overhead, pc_step_overhead(&p));
    assert_eq!(pc_step_overhead(&p), 3 * materialization_flops(&p));

    let at_2_15 = parity_report(&p, 256, 128);
    assert_eq!(at_2_15.batch * at_2_15.seq, 1 << 15);
    assert!(
        at_2_15.overhead_fraction < 0.01,
        "{}",
        at_2_15.overhead_fraction
    );
    let expect =
        pc_step_overhead(&p) as f64 / (3 * forward_flops(&p.target_config, 256, 128)) as f64;
    assert_eq!(at_2_15.overhead_fraction, expect);

    let mut prev = f64::INFINITY;
    for b in [1usize, 2, 4, 8, 16, 32] {
        let f = parity_report(&p, b, 128).overhead_fraction;
        assert!(f < prev);
        let doubled = parity_report(&p, 2 * b, 128).overhead_fraction;
        assert!((f / doubled - 2.0).abs() < 1e-12);
        prev = f;
    }
    let csv = overhead_csv(&p, 128, &[1, 2, 4]);
    assert_eq!(csv.lines().count(), 4);
}
