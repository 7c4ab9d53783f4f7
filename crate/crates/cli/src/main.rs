//! `projcomp` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use projcomp::checkpoint::{Checkpoint, LoadedModel};
use projcomp::config::{ExperimentConfig, ImportanceKind, Method};
use projcomp::data::TokenStream;
use projcomp::experiment::{
    make_plan, run_experiment, AblationCell, BaseModelRow, BudgetRow, Observer,
};
use projcomp::flops::{overhead_csv, parity_report};
use projcomp::model::{GptModel, ModelConfig, Trainable, TransformerWeights};
use projcomp::plan::{parse_level, CompressionPlan};
use projcomp::projection::{attach_projections, ProjectedModel};
use projcomp::pruning::hard_prune;
use projcomp::train::{compare_pipelines, evaluate, ComparisonReport, Trainer};
use projcomp::ErrorCategory;

#[derive(Parser, Debug)]
#[command(
    name = "projcomp",
    version,
    about = "Projected compression and hard pruning of GPT-style models"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a base model from random initialization.
    Pretrain(PretrainArgs),
    /// Build a compression plan and a compressed model from a base checkpoint.
    Compress(CompressArgs),
    /// Train a plain or projected checkpoint, resuming if it holds state.
    Train(TrainArgs),
    /// Mean loss of a checkpoint over fixed batches.
    Eval(EvalArgs),
    /// Materialize a projected checkpoint into a plain model.
    Export(ExportArgs),
    /// Train PC and HPR arms side by side from one base checkpoint.
    Compare(CompareArgs),
    /// Analytic FLOPs breakdown for a compression plan.
    Flops(FlopsArgs),
    /// Run the full pretrain, compress and compare protocol.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Desk,
    Smoke,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); defaults to the built-in profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Corpus files; replaces `data.paths`.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    /// Seed of the batch order.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompressFlags {
    /// `pc` (trainable projections) or `hpr` (hard pruning).
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Fraction in (0, 1), a percentage, or a preset (35, 50, 65).
    #[arg(long, value_parser = parse_level_arg)]
    level: Option<f64>,
    /// Omit the residual term W_r.
    #[arg(long)]
    no_residual: bool,
    /// `magnitude` or `random`.
    #[arg(long, value_parser = parse_importance)]
    importance: Option<ImportanceKind>,
    /// Seed for random importance scores.
    #[arg(long)]
    importance_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: CompressFlags,
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to train.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Stop after this many steps and checkpoint the state.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    batches: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: CompressFlags,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: CompressFlags,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq: Option<usize>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_level_arg(s: &str) -> Result<f64, String> {
    parse_level(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "pc" => Ok(Method::Pc),
        "hpr" => Ok(Method::Hpr),
        _ => Err(format!("unknown method {s:?} (expected pc or hpr)")),
    }
}

fn parse_importance(s: &str) -> Result<ImportanceKind, String> {
    match s {
        "magnitude" => Ok(ImportanceKind::Magnitude),
        "random" => Ok(ImportanceKind::Random),
        _ => Err(format!(
            "unknown importance {s:?} (expected magnitude or random)"
        )),
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match common.profile {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Smoke => ExperimentConfig::smoke(),
        },
    };
    if !common.data.is_empty() {
        c.data.paths = common.data.clone();
    }
    if let Some(s) = common.data_seed {
        c.pretrain.seed = s;
        c.train.seed = s;
    }
    Ok(c)
}

fn apply_flags(c: &mut ExperimentConfig, f: &CompressFlags) {
    if let Some(m) = f.method {
        c.compress.method = m;
    }
    if let Some(l) = f.level {
        c.compress.level = l;
    }
    if f.no_residual {
        c.compress.residual = false;
    }
    if let Some(i) = f.importance {
        c.compress.importance = i;
    }
    if let Some(s) = f.importance_seed {
        c.compress.importance_seed = s;
    }
}

/// Validates the resolved config and writes it into the output directory.
fn prepare(out: &Path, c: &ExperimentConfig) -> Result<()> {
    c.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "config.toml", &c.to_toml())
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, content).with_context(|| format!("writing {}", p.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, &serde_json::to_string_pretty(value)?)
}

fn stream(c: &ExperimentConfig, seq_len: usize, seed: u64) -> Result<TokenStream> {
    Ok(TokenStream::from_files(&c.data.paths, seq_len, seed)?)
}

fn load_base(path: &Path) -> Result<GptModel> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ckpt.model()?.into_gpt()?)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    if let Some(s) = a.steps {
        c.pretrain.steps = s;
    }
    if let Some(s) = a.init_seed {
        c.init_seed = s;
    }
    let out = &a.common.out;
    prepare(out, &c)?;
    let mut model = GptModel::init(c.model, c.init_seed)?;
    let mut data = stream(&c, c.pretrain.seq_len, c.pretrain.seed)?;
    let mut trainer = Trainer::new(c.pretrain)?;
    run_with_progress(&mut trainer, &mut model, &mut data, c.pretrain.steps)?;
    let report = trainer.report(&model, 0);
    Checkpoint::from_model(&model)
        .with_trainer(&trainer)
        .save(&out.join("model.ckpt"))?;
    write_json(out, "train_report.json", &report)?;
    write(out, "losses.csv", &report.losses_csv())?;
    println!(
        "pretrained {} params for {} steps; last-100 loss {:.6}",
        report.trainable_params, report.steps, report.last100_loss
    );
    Ok(())
}

fn run_with_progress<M: Trainable>(
    trainer: &mut Trainer,
    model: &mut M,
    data: &mut TokenStream,
    until: usize,
) -> Result<()> {
    let every = (until / 10).max(1);
    while trainer.state.step < until.min(trainer.config.steps) {
        let loss = trainer.step(model, data)?;
        let s = trainer.state.step;
        if s % every == 0 {
            eprintln!("step {s}/{}: loss {loss:.4}", trainer.config.steps);
        }
    }
    Ok(())
}

fn build_plan(c: &ExperimentConfig, base: &GptModel) -> Result<CompressionPlan> {
    Ok(make_plan(&base.weights, c, c.compress.importance_method())?)
}

fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    apply_flags(&mut c, &a.flags);
    let base = load_base(&a.base)?;
    c.model = base.config;
    let out = &a.common.out;
    prepare(out, &c)?;
    let plan = build_plan(&c, &base)?;
    write(out, "plan.json", &plan.to_json())?;
    let ckpt = match c.compress.method {
        Method::Pc => Checkpoint::from_projected(&attach_projections(
            &base.weights,
            &plan,
            c.compress.residual,
        )?),
        Method::Hpr => {
            let (cfg, w) = hard_prune(&base.weights, &plan)?;
            Checkpoint::from_model(&GptModel::new(cfg, w)?)
        }
    };
    ckpt.save(&out.join("model.ckpt"))?;
    println!(
        "target d_model {} d_ff {}; parameter reduction {:.4}",
        plan.target_config.d_model, plan.target_config.d_ff, plan.achieved_reduction
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    let ckpt = Checkpoint::load(&a.model)?;
    let model = ckpt.model()?;
    // A checkpoint with unfinished state resumes with its own configuration;
    // --steps may extend it.
    let mut trainer = match ckpt.trainer()? {
        Some(mut t) if !t.is_done() || a.steps.is_some_and(|s| s > t.state.step) => {
            if let Some(s) = a.steps {
                t.config.steps = s;
            }
            t
        }
        _ => {
            if let Some(s) = a.steps {
                c.train.steps = s;
            }
            Trainer::new(c.train)?
        }
    };
    c.train = trainer.config;
    c.model = match &model {
        LoadedModel::Gpt(m) => m.config,
        LoadedModel::Projected(m) => m.plan.source_config,
    };
    let out = &a.common.out;
    prepare(out, &c)?;
    let mut data = stream(&c, trainer.config.seq_len, trainer.config.seed)?;
    let until = a.stop_after.unwrap_or(trainer.config.steps);
    let (report, saved) = match model {
        LoadedModel::Gpt(mut m) => {
            run_with_progress(&mut trainer, &mut m, &mut data, until)?;
            (trainer.report(&m, 0), Checkpoint::from_model(&m))
        }
        LoadedModel::Projected(mut m) => {
            run_with_progress(&mut trainer, &mut m, &mut data, until)?;
            let overhead = projcomp::flops::pc_step_overhead(&m.plan);
            (trainer.report(&m, overhead), Checkpoint::from_projected(&m))
        }
    };
    saved.with_trainer(&trainer).save(&out.join("model.ckpt"))?;
    write_json(out, "train_report.json", &report)?;
    write(out, "losses.csv", &report.losses_csv())?;
    println!(
        "trained to step {}/{}; last-100 loss {:.6}",
        report.steps, trainer.config.steps, report.last100_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    batches: u64,
    batch_size: usize,
    seq_len: usize,
    data_seed: u64,
    loss: f64,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let c = resolve(&a.common)?;
    let model = Checkpoint::load(&a.model)?.model()?;
    let seq = c.train.seq_len.min(model.forward_config().seq_len);
    let mut data = stream(&c, seq, c.train.seed)?;
    let bs = c.train.batch_size;
    let loss = match &model {
        LoadedModel::Gpt(m) => evaluate(m, &mut data, a.batches, bs)?,
        LoadedModel::Projected(m) => evaluate(m, &mut data, a.batches, bs)?,
    };
    let out = &a.common.out;
    prepare(out, &c)?;
    let report = EvalReport {
        model: a.model.display().to_string(),
        batches: a.batches,
        batch_size: bs,
        seq_len: seq,
        data_seed: c.train.seed,
        loss,
    };
    write_json(out, "eval.json", &report)?;
    println!("{loss:.17e}");
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let projected: ProjectedModel = Checkpoint::load(&a.model)?.model()?.into_projected()?;
    let (cfg, w) = projected.export_compressed()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    Checkpoint::from_model(&GptModel::new(cfg, w)?).save(&a.out.join("model.ckpt"))?;
    write(&a.out, "plan.json", &projected.plan.to_json())?;
    println!("exported d_model {} d_ff {}", cfg.d_model, cfg.d_ff);
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    apply_flags(&mut c, &a.flags);
    if let Some(s) = a.steps {
        c.train.steps = s;
    }
    let base = load_base(&a.base)?;
    c.model = base.config;
    let out = &a.common.out;
    prepare(out, &c)?;
    let plan = build_plan(&c, &base)?;
    write(out, "plan.json", &plan.to_json())?;
    let data = stream(&c, c.train.seq_len, c.train.seed)?;
    let cmp = compare_pipelines(&base.weights, &plan, c.compress.residual, &data, &c.train)?;
    let r = &cmp.report;
    write_json(out, "comparison.json", r)?;
    write(out, "pc_losses.csv", &r.pc.losses_csv())?;
    write(out, "hpr_losses.csv", &r.hpr.losses_csv())?;
    Checkpoint::from_projected(&cmp.pc).save(&out.join("pc.ckpt"))?;
    Checkpoint::from_model(&cmp.hpr).save(&out.join("hpr.ckpt"))?;
    println!(
        "PC {:.6}  HPR {:.6}  margin {:+.6}  (last-100 CE over {} steps)",
        r.pc_last100, r.hpr_last100, r.margin, r.pc.steps
    );
    Ok(())
}

fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    apply_flags(&mut c, &a.flags);
    let out = &a.common.out;
    prepare(out, &c)?;
    // Plan sizes do not depend on which channels are kept.
    let weights = TransformerWeights::init(&c.model, c.init_seed)?;
    let plan = make_plan(&weights, &c, c.compress.importance_method())?;
    let batch = a.batch.unwrap_or(c.train.batch_size);
    let seq = a.seq.unwrap_or(c.train.seq_len);
    let report = parity_report(&plan, batch, seq);
    write_json(out, "flops.json", &report)?;
    let batches: Vec<usize> = (0..=12).map(|p| 1usize << p).collect();
    write(out, "overhead.csv", &overhead_csv(&plan, seq, &batches))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

struct ProgressWriter {
    out: PathBuf,
    config: ModelConfig,
}

impl ProgressWriter {
    fn log(&self, line: &str) {
        eprintln!("{line}");
        if let Ok(mut f) = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out.join("progress.log"))
        {
            let _ = writeln!(f, "{line}");
        }
    }
}

impl Observer for ProgressWriter {
    fn base_ready(&mut self, row: &BaseModelRow, weights: &TransformerWeights) {
        self.log(&format!(
            "base {}:1 after {} steps, last-100 loss {:.6}",
            row.token_ratio, row.steps, row.last100_loss
        ));
        let path = self.out.join(format!("base_{}to1.ckpt", row.token_ratio));
        let saved = GptModel::new(self.config, weights.clone())
            .and_then(|m| Checkpoint::from_model(&m).save(&path));
        if let Err(e) = saved {
            self.log(&format!("warning: base checkpoint not saved: {e}"));
        }
    }

    fn budget_done(&mut self, row: &BudgetRow, report: &ComparisonReport) {
        self.log(&format!(
            "{}:1, {} steps: PC {:.6} HPR {:.6} margin {:+.6} gate {}",
            row.token_ratio, row.steps, row.pc_last100, row.hpr_last100, row.margin, row.gate
        ));
        let name = format!("comparison_{}to1_{}steps.json", row.token_ratio, row.steps);
        if let Ok(s) = serde_json::to_string_pretty(report) {
            let _ = fs::write(self.out.join(name), s);
        }
    }

    fn ablation_done(&mut self, cell: &AblationCell) {
        self.log(&format!(
            "ablation {:?}: PC {:.6} HPR {:.6} margin {:+.6}",
            cell.importance, cell.pc_last100, cell.hpr_last100, cell.margin
        ));
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let c = resolve(&a.common)?;
    let out = &a.common.out;
    prepare(out, &c)?;
    let mut obs = ProgressWriter {
        out: out.clone(),
        config: c.model,
    };
    let report = run_experiment(&c, &mut obs)?;
    write_json(out, "experiment.json", &report)?;
    write(out, "budgets.csv", &report.rows_csv())?;
    write(out, "ablation.csv", &report.ablation_csv())?;
    print!("{}", report.rows_csv());
    print!("{}", report.ablation_csv());
    if !report.gate() {
        bail!("directional gate failed: some arm did not improve on its step-0 loss");
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<projcomp::Error>()) {
        Some(err) => match err.category() {
            ErrorCategory::Config => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Format => 5,
            ErrorCategory::Io => 6,
            ErrorCategory::Numeric => 7,
        },
        None if e
            .chain()
            .any(|c| c.downcast_ref::<std::io::Error>().is_some()) =>
        {
            6
        }
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let category = e
                .chain()
                .find_map(|c| c.downcast_ref::<projcomp::Error>())
                .map(|err| format!("{:?}", err.category()).to_lowercase())
                .unwrap_or_else(|| "runtime".into());
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
