//! The matched-compute comparison protocol.
//!
//! One pretraining run is snapshotted at each token-to-parameter ratio.
//! Every snapshot is compressed with magnitude importance and both arms are
//! retrained for each step budget on identical batches. An ablation grid
//! then crosses {magnitude, random} importance with {PC, HPR} on the first
//! snapshot.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ImportanceKind};
use crate::data::TokenStream;
use crate::error::{Error, Result};
use crate::importance::{ImportanceMethod, ModelScores};
use crate::model::{GptModel, TransformerWeights};
use crate::plan::{plan_compression, CompressionPlan};
use crate::train::{compare_pipelines, ComparisonReport, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelRow {
    pub token_ratio: u64,
    pub params: usize,
    pub steps: usize,
    pub tokens: u64,
    pub last100_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub token_ratio: u64,
    pub steps: usize,
    pub tokens: u64,
    pub pc_first: f64,
    pub hpr_first: f64,
    pub pc_last100: f64,
    pub hpr_last100: f64,
    pub margin: f64,
    pub same_batches: bool,
    /// Both arms finite and below their step-0 loss.
    pub gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub importance: ImportanceKind,
    pub pc_last100: f64,
    pub hpr_last100: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub target_params: usize,
    pub achieved_reduction: f64,
    pub bases: Vec<BaseModelRow>,
    pub rows: Vec<BudgetRow>,
    pub ablation: Vec<AblationCell>,
}

impl ExperimentReport {
    pub fn gate(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.gate && r.same_batches)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from(
            "token_ratio,steps,tokens,pc_first,hpr_first,pc_last100,hpr_last100,margin,gate\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:+.6},{}\n",
                r.token_ratio,
                r.steps,
                r.tokens,
                r.pc_first,
                r.hpr_first,
                r.pc_last100,
                r.hpr_last100,
                r.margin,
                r.gate
            ));
        }
        s
    }

    pub fn ablation_csv(&self) -> String {
        let mut s = String::from("importance,pc_last100,hpr_last100,margin\n");
        for c in &self.ablation {
            let name = match c.importance {
                ImportanceKind::Magnitude => "magnitude",
                ImportanceKind::Random => "random",
            };
            s.push_str(&format!(
                "{name},{:.6},{:.6},{:+.6}\n",
                c.pc_last100, c.hpr_last100, c.margin
            ));
        }
        s
    }
}

/// Pretraining steps that reach `ratio` tokens per parameter.
pub fn steps_for_ratio(ratio: u64, params: usize, config: &TrainConfig) -> usize {
    let tokens = ratio * params as u64;
    tokens.div_ceil(config.tokens_per_step()) as usize
}

/// Progress callbacks; all methods default to no-ops.
pub trait Observer {
    fn base_ready(&mut self, _row: &BaseModelRow, _weights: &TransformerWeights) {}
    fn budget_done(&mut self, _row: &BudgetRow, _report: &ComparisonReport) {}
    fn ablation_done(&mut self, _cell: &AblationCell) {}
}

impl Observer for () {}

/// Runs the protocol end to end.
pub fn run_experiment(
    config: &ExperimentConfig,
    observer: &mut dyn Observer,
) -> Result<ExperimentReport> {
    config.validate()?;
    let docs = load_docs(config)?;
    let pretrain_stream =
        TokenStream::from_documents(docs.clone(), config.pretrain.seq_len, config.pretrain.seed)?;
    let arm_stream = TokenStream::from_documents(docs, config.train.seq_len, config.train.seed)?;

    let mut base = GptModel::init(config.model, config.init_seed)?;
    let params = config.model.count_params();
    let targets: Vec<usize> = config
        .protocol
        .token_ratios
        .iter()
        .map(|&r| steps_for_ratio(r, params, &config.pretrain))
        .collect();
    let pretrain = TrainConfig {
        steps: *targets.last().expect("validated non-empty"),
        ..config.pretrain
    };
    let mut trainer = Trainer::new(pretrain)?;
    let mut stream = pretrain_stream;

    let mut bases = Vec::new();
    let mut rows = Vec::new();
    let mut ablation = Vec::new();
    let mut target_params = 0;
    let mut achieved_reduction = 0.0;
    for (i, (&ratio, &steps)) in config
        .protocol
        .token_ratios
        .iter()
        .zip(&targets)
        .enumerate()
    {
        trainer.run_until(&mut base, &mut stream, steps)?;
        let row = BaseModelRow {
            token_ratio: ratio,
            params,
            steps,
            tokens: steps as u64 * pretrain.tokens_per_step(),
            last100_loss: crate::train::tail_mean(&trainer.state.losses),
        };
        observer.base_ready(&row, &base.weights);
        bases.push(row);

        let plan = make_plan(&base.weights, config, ImportanceMethod::Magnitude)?;
        target_params = plan.target_config.count_params();
        achieved_reduction = plan.achieved_reduction;
        for &budget in &config.protocol.budgets {
            let tc = TrainConfig {
                steps: budget,
                ..config.train
            };
            let cmp = compare_pipelines(
                &base.weights,
                &plan,
                config.compress.residual,
                &arm_stream,
                &tc,
            )?;
            let r = &cmp.report;
            let below =
                |first: f64, last: f64| first.is_finite() && last.is_finite() && last < first;
            let row = BudgetRow {
                token_ratio: ratio,
                steps: budget,
                tokens: r.pc.tokens,
                pc_first: r.pc.first_loss,
                hpr_first: r.hpr.first_loss,
                pc_last100: r.pc_last100,
                hpr_last100: r.hpr_last100,
                margin: r.margin,
                same_batches: r.same_batches,
                gate: below(r.pc.first_loss, r.pc_last100)
                    && below(r.hpr.first_loss, r.hpr_last100),
            };
            observer.budget_done(&row, r);
            rows.push(row);
        }

        if i == 0 {
            for kind in [ImportanceKind::Magnitude, ImportanceKind::Random] {
                let method = match kind {
                    ImportanceKind::Magnitude => ImportanceMethod::Magnitude,
                    ImportanceKind::Random => ImportanceMethod::Random {
                        seed: config.compress.importance_seed,
                    },
                };
                let plan = make_plan(&base.weights, config, method)?;
                let tc = TrainConfig {
                    steps: config.protocol.ablation_budget,
                    ..config.train
                };
                let cmp = compare_pipelines(
                    &base.weights,
                    &plan,
                    config.compress.residual,
                    &arm_stream,
                    &tc,
                )?;
                let cell = AblationCell {
                    importance: kind,
                    pc_last100: cmp.report.pc_last100,
                    hpr_last100: cmp.report.hpr_last100,
                    margin: cmp.report.margin,
                };
                observer.ablation_done(&cell);
                ablation.push(cell);
            }
        }
    }
    Ok(ExperimentReport {
        config: config.clone(),
        target_params,
        achieved_reduction,
        bases,
        rows,
        ablation,
    })
}

pub fn make_plan(
    weights: &TransformerWeights,
    config: &ExperimentConfig,
    method: ImportanceMethod,
) -> Result<CompressionPlan> {
    let scores = ModelScores::compute(weights, &config.model, method)?;
    plan_compression(&config.model, config.compress.level, &scores)
}

fn load_docs(config: &ExperimentConfig) -> Result<Vec<Vec<u8>>> {
    if config.data.paths.is_empty() {
        return Err(Error::Config("data.paths is empty".into()));
    }
    config
        .data
        .paths
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::io(p, e)))
        .collect()
}
