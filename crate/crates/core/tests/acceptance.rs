//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p projcomp --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{
    corpus, frozen_hashes, max_abs_diff, plan, projection_fd_check, random_tokens, random_weights,
    rng, same_params,
};
use projcomp::checkpoint::{Checkpoint, LoadedModel};
use projcomp::config::{ExperimentConfig, ImportanceKind};
use projcomp::data::TokenStream;
use projcomp::experiment::{make_plan, run_experiment, BaseModelRow, Observer};
use projcomp::flops::{forward_flops, instrumented_flops, materialization_flops, parity_report};
use projcomp::importance::ImportanceMethod;
use projcomp::model::{GptModel, ModelConfig, Trainable, TransformerWeights};
use projcomp::plan::{CompressionPlan, LEVEL_PRESETS};
use projcomp::projection::{
    attach_projections, projected_forward_equivalence, ProjectedModel, ProjectionModule,
};
use projcomp::pruning::hard_prune;
use projcomp::train::{compare_pipelines, Schedule, TrainConfig, Trainer};
use projcomp::Tensor;
use rand::Rng;

const LOGIT_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-9;
const IDENTITY_CASES: usize = 1000;
const FD_TOL: f64 = 1e-4;
const FD_MIN_COORDS: usize = 200;
const PC_STEPS: usize = 500;
const RESUME_AT: usize = 217;
const OVERHEAD_LIMIT: f64 = 0.01;
const EVAL_BATCHES: u64 = 10;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

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

fn pc_train_config() -> TrainConfig {
    TrainConfig {
        steps: PC_STEPS,
        batch_size: 4,
        seq_len: 32,
        learning_rate: 2e-3,
        warmup_steps: 20,
        schedule: Schedule::Cosine,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn stream(t: &TrainConfig) -> TokenStream {
    TokenStream::from_files(&[corpus()], t.seq_len, t.seed).unwrap()
}

/// The toy base, its 50% plan and a PC model trained for `PC_STEPS`.
struct Trained {
    base: TransformerWeights,
    plan: CompressionPlan,
    initial: ProjectedModel,
    model: ProjectedModel,
    trainer: Trainer,
}

fn trained() -> Trained {
    let c = toy();
    let base = random_weights(&c, 40);
    let plan = plan(&base, &c, 0.5);
    let initial = attach_projections(&base, &plan, true).unwrap();
    let mut model = initial.clone();
    let cfg = pc_train_config();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer
        .run_until(&mut model, &mut stream(&cfg), PC_STEPS)
        .unwrap();
    Trained {
        base,
        plan,
        initial,
        model,
        trainer,
    }
}

/// Frozen hashes unchanged and moments exactly on the trainable tensors.
fn freeze_invariant(
    initial: &ProjectedModel,
    model: &ProjectedModel,
    trainer: &Trainer,
) -> Outcome {
    let before = frozen_hashes(initial);
    let after = frozen_hashes(model);
    ensure(!before.is_empty(), || "no frozen tensors".into())?;
    ensure(before == after, || "a frozen tensor changed".into())?;
    let params = model.params();
    let moments = &trainer.state.optimizer.moments;
    ensure(params.len() == moments.len(), || {
        "moment table misaligned".into()
    })?;
    for ((name, t), m) in params.iter().zip(moments) {
        ensure(t.requires_grad() == m.is_some(), || {
            format!("{name}: moments do not follow the freeze flag")
        })?;
    }
    let with_moments = moments.iter().filter(|m| m.is_some()).count();
    Ok(format!(
        "{} frozen tensors unchanged after {} steps, {with_moments} tensors with moments",
        before.len(),
        trainer.state.step
    ))
}

fn init_equivalence() -> Outcome {
    let c = toy();
    let base = random_weights(&c, 1);
    let p = plan(&base, &c, 0.5);
    let pc = attach_projections(&base, &p, true).unwrap();
    let (hc, hw) = hard_prune(&base, &p).unwrap();
    let hpr = GptModel::new(hc, hw.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..EVAL_BATCHES {
        let tokens = random_tokens(4 * 32, c.vocab_size, 1000 + i);
        worst = worst.max(max_abs_diff(
            &pc.logits(&tokens, 4).unwrap(),
            &hpr.logits(&tokens, 4).unwrap(),
        ));
    }
    ensure(worst < LOGIT_TOL, || format!("max |dlogit| {worst:e}"))?;
    let (ec, ew) = pc.export_compressed().unwrap();
    ensure(ec == hpr.config, || "exported config differs".into())?;
    for ((n, a), (_, b)) in ew.iter().zip(hw.iter()) {
        ensure(a.bit_eq(b), || {
            format!("{n} differs from the hard-pruned slice")
        })?;
    }
    Ok(format!(
        "max |dlogit| {worst:.1e} over {EVAL_BATCHES} batches, export == hard_prune bit-exact"
    ))
}

fn dual_path_identity() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..IDENTITY_CASES {
        let (d_in, d_out) = (r.random_range(1..24), r.random_range(1..24));
        let (ds_in, ds_out) = (r.random_range(1..24), r.random_range(1..24));
        let sides = r.random_range(0..3u8);
        let residual = r.random_bool(0.5);
        let w = Tensor::randn(&[d_in, d_out], 1.0, &mut r);
        let p1 = (sides != 1).then(|| Tensor::randn(&[ds_in, d_in], 1.0, &mut r));
        let p2 = (sides != 0).then(|| Tensor::randn(&[d_out, ds_out], 1.0, &mut r));
        let rows = if p1.is_some() { ds_in } else { d_in };
        let cols = if p2.is_some() { ds_out } else { d_out };
        let wr = residual.then(|| Tensor::randn(&[rows, cols], 1.0, &mut r));
        let m = ProjectionModule::new(w, p1, p2, wr).map_err(|e| format!("case {case}: {e}"))?;
        let x = Tensor::randn(&[r.random_range(1..12), rows], 1.0, &mut r);
        let (lhs, rhs) =
            projected_forward_equivalence(&x, &m).map_err(|e| format!("case {case}: {e}"))?;
        worst = worst.max(max_abs_diff(&lhs, &rhs));
    }
    ensure(worst < IDENTITY_TOL, || format!("max |d| {worst:e}"))?;
    Ok(format!("{IDENTITY_CASES} cases, max |d| {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let fd = projection_fd_check(12, 9);
    ensure(fd.checked >= FD_MIN_COORDS, || {
        format!("only {} coordinates", fd.checked)
    })?;
    ensure(fd.worst < FD_TOL, || {
        format!("worst relative error {:e}", fd.worst)
    })?;
    Ok(format!(
        "{} coordinates, worst relative error {:.1e}",
        fd.checked, fd.worst
    ))
}

fn merge_closure(t: &Trained) -> Outcome {
    let (ec, ew) = t.model.export_compressed().unwrap();
    ensure(ec == t.plan.target_config, || {
        "exported config is not the target config".into()
    })?;
    let exported = GptModel::new(ec, ew).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..EVAL_BATCHES {
        let tokens = random_tokens(4 * 32, ec.vocab_size, 2000 + i);
        worst = worst.max(max_abs_diff(
            &t.model.logits(&tokens, 4).unwrap(),
            &exported.logits(&tokens, 4).unwrap(),
        ));
    }
    ensure(worst < LOGIT_TOL, || format!("max |dlogit| {worst:e}"))?;
    Ok(format!(
        "max |dlogit| {worst:.1e} over {EVAL_BATCHES} batches, plain model d_model {} d_ff {}",
        ec.d_model, ec.d_ff
    ))
}

fn flops_parity() -> Outcome {
    let c = toy();
    let base = random_weights(&c, 3);
    let mut parts = Vec::new();
    let levels: Vec<f64> = LEVEL_PRESETS.iter().map(|&(_, l)| l).collect();
    ensure(levels == [0.35, 0.5, 0.65], || {
        format!("presets {levels:?}")
    })?;
    for (name, level) in LEVEL_PRESETS {
        let p = plan(&base, &c, level);
        let r = parity_report(&p, 16, 128);
        ensure(
            r.parity && r.pc_forward_per_token == r.compressed_forward_per_token,
            || {
                format!(
                    "{name}: {} vs {}",
                    r.pc_forward_per_token, r.compressed_forward_per_token
                )
            },
        )?;
        let one = parity_report(&p, 1, 128);
        let many = parity_report(&p, 4096, 128);
        ensure(one.pc_step_overhead == many.pc_step_overhead, || {
            format!("{name}: overhead depends on batch")
        })?;
        let big = parity_report(&p, 256, 128);
        ensure(big.batch * big.seq == 1 << 15, || {
            "wrong token count".into()
        })?;
        ensure(big.overhead_fraction < OVERHEAD_LIMIT, || {
            format!("{name}: overhead fraction {}", big.overhead_fraction)
        })?;

        let tokens = random_tokens(2 * 16, c.vocab_size, 5);
        let pc = attach_projections(&base, &p, true).unwrap();
        let (hc, hw) = hard_prune(&base, &p).unwrap();
        let hpr = GptModel::new(hc, hw).unwrap();
        let pc_counts = instrumented_flops(&pc, &tokens, 2).unwrap();
        let hpr_counts = instrumented_flops(&hpr, &tokens, 2).unwrap();
        let analytic = forward_flops(&p.target_config, 2, 16);
        ensure(
            pc_counts.forward == analytic && hpr_counts.forward == analytic,
            || {
                format!(
                    "{name}: instrumented {} / {} vs analytic {analytic}",
                    pc_counts.forward, hpr_counts.forward
                )
            },
        )?;
        ensure(pc_counts.materialize == materialization_flops(&p), || {
            format!(
                "{name}: instrumented materialization {}",
                pc_counts.materialize
            )
        })?;
        parts.push(format!(
            "{name}: {} FLOPs/token, overhead {:.3}% at 2^15",
            r.pc_forward_per_token,
            100.0 * big.overhead_fraction
        ));
    }
    Ok(parts.join("; "))
}

/// Keeps the first snapshot for the determinism re-run.
#[derive(Default)]
struct FirstBase(Option<TransformerWeights>);

impl Observer for FirstBase {
    fn base_ready(&mut self, _row: &BaseModelRow, weights: &TransformerWeights) {
        if self.0.is_none() {
            self.0 = Some(weights.clone());
        }
    }
}

fn smoke_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.data.paths = vec![corpus()];
    c
}

fn experiment_and_ablation() -> (Outcome, Outcome) {
    let config = smoke_config();
    let mut first = FirstBase::default();
    let report = match run_experiment(&config, &mut first) {
        Ok(r) => r,
        Err(e) => {
            return (
                Err(e.to_string()),
                Err("experiment did not complete".into()),
            )
        }
    };

    let seven = (|| {
        let ratios: Vec<u64> = report.bases.iter().map(|b| b.token_ratio).collect();
        ensure(ratios == [20, 80], || format!("ratios {ratios:?}"))?;
        let budgets = config.protocol.budgets.len();
        ensure(budgets >= 3 && report.rows.len() == 2 * budgets, || {
            "missing budget rows".into()
        })?;
        for r in &report.rows {
            ensure(r.gate, || {
                format!(
                    "{}:1 at {} steps: loss did not fall",
                    r.token_ratio, r.steps
                )
            })?;
            ensure(r.same_batches, || "arms saw different batches".into())?;
        }
        ensure(report.gate(), || "gate".into())?;
        let margins: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("{}:1/{} {:+.4}", r.token_ratio, r.steps, r.margin))
            .collect();
        Ok(format!(
            "smoke profile, {} params, reduction {:.3}, PC-HPR margins {}",
            config.model.count_params(),
            report.achieved_reduction,
            margins.join(" ")
        ))
    })();

    let eight = (|| {
        let kinds: Vec<ImportanceKind> = report.ablation.iter().map(|c| c.importance).collect();
        ensure(
            kinds == [ImportanceKind::Magnitude, ImportanceKind::Random],
            || format!("cells {kinds:?}"),
        )?;
        let base = first.0.as_ref().ok_or("no snapshot observed")?;
        let arm =
            TokenStream::from_files(&config.data.paths, config.train.seq_len, config.train.seed)
                .map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            steps: config.protocol.ablation_budget,
            ..config.train
        };
        let mut grid = Vec::new();
        for cell in &report.ablation {
            ensure(
                cell.pc_last100.is_finite() && cell.hpr_last100.is_finite(),
                || "non-finite cell".into(),
            )?;
            let method = match cell.importance {
                ImportanceKind::Magnitude => ImportanceMethod::Magnitude,
                ImportanceKind::Random => ImportanceMethod::Random {
                    seed: config.compress.importance_seed,
                },
            };
            let p = make_plan(base, &config, method).map_err(|e| e.to_string())?;
            let again = compare_pipelines(base, &p, config.compress.residual, &arm, &tc)
                .map_err(|e| e.to_string())?
                .report;
            ensure(
                again.pc_last100.to_bits() == cell.pc_last100.to_bits()
                    && again.hpr_last100.to_bits() == cell.hpr_last100.to_bits(),
                || format!("{:?} cell is not reproducible", cell.importance),
            )?;
            grid.push(format!(
                "{:?} PC {:.4} HPR {:.4}",
                cell.importance, cell.pc_last100, cell.hpr_last100
            ));
        }
        Ok(format!(
            "2x2 grid reproduced bit-exactly: {}",
            grid.join(", ")
        ))
    })();
    (seven, eight)
}

fn reproducibility(t: &Trained) -> Outcome {
    // emitted config re-runs to the same loss curve
    let config = smoke_config();
    let emitted = ExperimentConfig::from_toml(&config.to_toml()).map_err(|e| e.to_string())?;
    ensure(emitted == config, || "config changed through TOML".into())?;
    let curve = |c: &ExperimentConfig| -> Vec<u64> {
        let tc = TrainConfig {
            steps: 60,
            ..c.pretrain
        };
        let mut m = GptModel::init(c.model, c.init_seed).unwrap();
        let mut s = TokenStream::from_files(&c.data.paths, tc.seq_len, tc.seed).unwrap();
        let mut trainer = Trainer::new(tc).unwrap();
        trainer.run_until(&mut m, &mut s, tc.steps).unwrap();
        trainer.state.losses.iter().map(|l| l.to_bits()).collect()
    };
    ensure(curve(&config) == curve(&emitted), || {
        "loss curves differ".into()
    })?;

    // bit-exact round trip of the trained projected model and its optimizer
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let path = dir.path().join("pc.ckpt");
    Checkpoint::from_projected(&t.model)
        .with_trainer(&t.trainer)
        .save(&path)
        .map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let back = loaded
        .model()
        .map_err(|e| e.to_string())?
        .into_projected()
        .map_err(|e| e.to_string())?;
    ensure(same_params(&back, &t.model), || {
        "projected round trip differs".into()
    })?;
    let state = loaded
        .trainer()
        .map_err(|e| e.to_string())?
        .ok_or("trainer state missing")?
        .state;
    ensure(state == t.trainer.state, || "trainer state differs".into())?;

    // interrupted run resumed from disk
    let cfg = pc_train_config();
    let mut part = t.initial.clone();
    let mut first = Trainer::new(cfg).unwrap();
    first
        .run_until(&mut part, &mut stream(&cfg), RESUME_AT)
        .unwrap();
    let mid = dir.path().join("mid.ckpt");
    Checkpoint::from_projected(&part)
        .with_trainer(&first)
        .save(&mid)
        .map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&mid).map_err(|e| e.to_string())?;
    let mut resumed = match ckpt.model().map_err(|e| e.to_string())? {
        LoadedModel::Projected(m) => m,
        LoadedModel::Gpt(_) => return Err("resumed checkpoint is not projected".into()),
    };
    let mut trainer = ckpt
        .trainer()
        .map_err(|e| e.to_string())?
        .ok_or("trainer state missing")?;
    trainer
        .run_until(&mut resumed, &mut stream(&cfg), PC_STEPS)
        .unwrap();
    ensure(same_params(&resumed, &t.model), || {
        "resumed run diverged from the straight run".into()
    })?;
    ensure(trainer.state.losses == t.trainer.state.losses, || {
        "resumed loss curve differs".into()
    })?;
    let freeze = freeze_invariant(&t.initial, &resumed, &trainer)?;

    let gpt = GptModel::new(t.plan.target_config, t.model.export_compressed().unwrap().1).unwrap();
    let plain = Checkpoint::from_bytes(&Checkpoint::from_model(&gpt).to_bytes().unwrap())
        .and_then(|c| c.model())
        .and_then(|m| m.into_gpt())
        .map_err(|e| e.to_string())?;
    ensure(same_params(&plain, &gpt), || {
        "plain round trip differs".into()
    })?;
    ensure(
        same_params(
            &attach_projections(&t.base, &t.plan, true).unwrap(),
            &t.initial,
        ),
        || "plan re-attach differs".into(),
    )?;
    Ok(format!("60-step curve identical from emitted TOML; round trips exact; resume at {RESUME_AT}: {freeze}"))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    report(n, name, outcome, t.elapsed().as_secs_f64())
}

fn report(n: usize, name: &str, outcome: Outcome, secs: f64) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS {n} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("FAIL {n} {name} ({secs:.1}s): {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run(1, "init equivalence", init_equivalence);
    ok &= run(2, "dual-path identity", dual_path_identity);
    ok &= run(3, "projection gradients", gradient_check);

    let t = Instant::now();
    let shared = catch_unwind(trained).map_err(|_| "500-step PC run failed".to_string());
    let secs = t.elapsed().as_secs_f64();
    ok &= report(
        4,
        "freeze invariance",
        shared
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|s| freeze_invariant(&s.initial, &s.model, &s.trainer)),
        secs,
    );
    ok &= run(5, "merge closure", || {
        shared
            .as_ref()
            .map_err(Clone::clone)
            .and_then(merge_closure)
    });
    ok &= run(6, "FLOPs parity", flops_parity);

    let t = Instant::now();
    let (seven, eight) = catch_unwind(experiment_and_ablation).unwrap_or_else(|_| {
        (
            Err("experiment panicked".into()),
            Err("experiment panicked".into()),
        )
    });
    let secs = t.elapsed().as_secs_f64();
    ok &= report(7, "directional experiment", seven, secs);
    ok &= report(8, "importance ablation", eight, secs);
    ok &= run(9, "reproducibility", || {
        shared
            .as_ref()
            .map_err(Clone::clone)
            .and_then(reproducibility)
    });

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
