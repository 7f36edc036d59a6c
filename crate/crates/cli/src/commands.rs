use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use irm_core::checkpoint::NamedArrays;
use irm_core::checks::run_suite;
use irm_core::dataset::{
    annotate_items, build_dataset, compute_statistics, read_items, read_source_records, BuildOptions,
    HeuristicRewriter, IVQAItem,
};
use irm_core::eval::{
    breakdown_by_question_type, mc_accuracy, mean_over_seeds, Judge, LlmJudge, MockJudge, noisy_augment, open_ended_eval, psav_metrics,
    robustness_report, PredictionRecord, PsavRecord,
};
use irm_core::io::{read_jsonl, write_json, write_jsonl, write_text};
use irm_core::model::IrmModel;
use irm_core::pipeline::{clue_map, generate_clues, infer_with_clues, ClueFileRecord, ClueSource, InferConfig};
use irm_core::reasoner::make_backend;
use irm_core::synth::{separable_relation_dataset, smoke_dataset};
use irm_core::train::{relation_accuracy, train, TrainState};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{JudgeKind, RunConfig};
use crate::exit::CliError;

type CmdResult<T = ()> = Result<T, CliError>;

/// Reproducibility header attached to every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunHeader<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub seed: u64,
    pub config: &'a RunConfig,
}

pub struct Ctx<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
}

impl Ctx<'_> {
    fn header(&self, seed: u64) -> RunHeader<'_> {
        RunHeader { command: self.command, version: env!("CARGO_PKG_VERSION"), seed, config: self.config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn report<T: Serialize>(&self, name: &str, seed: u64, body: &T) -> CmdResult<PathBuf> {
        let path = self.out(name);
        write_json(&path, &json!({ "run": self.header(seed), "report": body }))?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    /// JSONL artifact plus a `<file>.meta.json` sidecar carrying the header.
    fn records<T: Serialize>(&self, path: &Path, seed: u64, records: &[T]) -> CmdResult<()> {
        write_jsonl(path, records)?;
        write_json(&meta_path(path), &json!({ "run": self.header(seed), "records": records.len() }))?;
        eprintln!("wrote {} ({} records)", path.display(), records.len());
        Ok(())
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn require_file(path: &Path) -> CmdResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("input file not found: {}", path.display())))
    }
}

fn load_items(path: &Path) -> CmdResult<Vec<IVQAItem>> {
    require_file(path)?;
    let items = read_items(path)?;
    if items.is_empty() {
        return Err(CliError::Validation(format!("{} contains no items", path.display())));
    }
    Ok(items)
}

fn load_records<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<Vec<T>> {
    require_file(path)?;
    Ok(read_jsonl(path)?)
}

pub enum DatasetInput {
    Source(PathBuf),
    Synthetic(usize),
    Separable { items: usize, clues_per_item: usize },
}

pub fn build_dataset_cmd(ctx: &Ctx, input: &DatasetInput) -> CmdResult {
    let cfg = ctx.config;
    let (mut items, excluded) = match input {
        DatasetInput::Source(path) => {
            require_file(path)?;
            let records = read_source_records(path)?;
            if records.is_empty() {
                return Err(CliError::Validation(format!("{} contains no source records", path.display())));
            }
            let options = BuildOptions {
                sigma: cfg.dataset.sigma,
                filter_temporal: cfg.dataset.filter_temporal,
                filter_wh: cfg.dataset.filter_wh,
            };
            let outcome = build_dataset(&records, &options, &HeuristicRewriter, &[])?;
            (outcome.items, outcome.excluded)
        }
        DatasetInput::Synthetic(n) => (smoke_dataset(*n, cfg.seed), Vec::new()),
        DatasetInput::Separable { items, clues_per_item } => {
            (separable_relation_dataset(*items, *clues_per_item, cfg.seed), Vec::new())
        }
    };
    if cfg.dataset.annotate {
        let judge = make_backend(&cfg.backend)?;
        let failures = annotate_items(&mut items, judge.as_ref(), cfg.exec_mode());
        ctx.records(&ctx.out("annotation_failures.jsonl"), cfg.seed, &failures)?;
    }
    ctx.records(&ctx.out("dataset.jsonl"), cfg.seed, &items)?;
    ctx.records(&ctx.out("exclusions.jsonl"), cfg.seed, &excluded)?;
    eprintln!("{} items kept, {} excluded", items.len(), excluded.len());
    if items.is_empty() {
        return Err(CliError::Validation("every source record was excluded".into()));
    }
    write_stats(ctx, &items)
}

fn write_stats(ctx: &Ctx, items: &[IVQAItem]) -> CmdResult {
    let stats = compute_statistics(items)?;
    ctx.report("stats.json", ctx.config.seed, &stats)?;
    for (stem, svg) in stats.render_svgs() {
        write_text(&ctx.out(&format!("stats/{stem}.svg")), &svg)?;
    }
    Ok(())
}

pub fn stats_cmd(ctx: &Ctx, dataset: &Path) -> CmdResult {
    write_stats(ctx, &load_items(dataset)?)
}

pub fn generate_clues_cmd(ctx: &Ctx, dataset: &Path) -> CmdResult {
    let cfg = ctx.config;
    let items = load_items(dataset)?;
    let backend = make_backend(&cfg.backend)?;
    let records = generate_clues(&items, &cfg.model, cfg.infer.frame_count, backend.as_ref(), cfg.exec_mode())?;
    ctx.records(&ctx.out("clues.jsonl"), cfg.seed, &records)?;
    let failed: Vec<&ClueFileRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    if let Some(first) = failed.first() {
        return Err(CliError::Transport(format!(
            "{} of {} items failed; first: {}",
            failed.len(),
            records.len(),
            first.error.as_deref().unwrap_or_default()
        )));
    }
    Ok(())
}

pub fn train_cmd(ctx: &Ctx, dataset: &Path, held_out: Option<&Path>, all_seeds: bool) -> CmdResult {
    let cfg = ctx.config;
    let items = load_items(dataset)?;
    let held = held_out.map(load_items).transpose()?;
    let seeds = if all_seeds { cfg.seeds.clone() } else { vec![cfg.seed] };
    let mut accuracies = Vec::new();
    for &seed in &seeds {
        let prefix = if all_seeds { format!("seed-{seed}/") } else { String::new() };
        let outcome = train(&items, cfg.model.clone(), &cfg.train, seed, cfg.exec_mode())?;
        ctx.records(&ctx.out(&format!("{prefix}train_log.jsonl")), seed, &outcome.log)?;

        let mut pack: NamedArrays = outcome.state.to_arrays();
        pack.metadata.insert("run".into(), serde_json::to_string(&ctx.header(seed)).map_err(anyhow::Error::new)?);
        let ckpt = ctx.out(&format!("{prefix}checkpoint.irm"));
        pack.save(&ckpt)?;
        eprintln!("wrote {}", ckpt.display());

        let eval_items = held.as_deref().unwrap_or(&items);
        let acc = relation_accuracy(&outcome.state.model, eval_items, cfg.train.frame_count, cfg.exec_mode())?;
        accuracies.push(acc.accuracy);
        let last = outcome.log.last();
        ctx.report(
            &format!("{prefix}train_report.json"),
            seed,
            &json!({
                "steps": outcome.steps,
                "epochs": outcome.log.len(),
                "final_combined_loss": last.map(|e| e.combined_loss),
                "relation_accuracy": acc,
                "evaluated_on": if held.is_some() { "held_out" } else { "train" },
            }),
        )?;
        eprintln!("seed {seed}: {} steps, relation accuracy {:.2}%", outcome.steps, acc.accuracy);
    }
    if all_seeds {
        let agg = mean_over_seeds(&seeds, &accuracies)?;
        ctx.report("seeds_summary.json", cfg.seed, &json!({ "relation_accuracy": agg }))?;
    }
    Ok(())
}

fn load_model(ctx: &Ctx, checkpoint: Option<&Path>) -> CmdResult<IrmModel> {
    match checkpoint {
        Some(path) => {
            require_file(path)?;
            let state = TrainState::from_arrays(&NamedArrays::load(path)?)?;
            Ok(state.model)
        }
        None => Ok(IrmModel::init(ctx.config.model.clone(), ctx.config.seed)?),
    }
}

pub struct InferArgs<'a> {
    pub dataset: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub clues: Option<&'a Path>,
    pub noise_ratio: Option<f64>,
    pub output: &'a str,
}

/// Runs inference and writes `<output>.jsonl`, `<output>_traces.jsonl` and a
/// summary. Returns the records and the number of failed items.
fn run_infer(ctx: &Ctx, args: &InferArgs) -> CmdResult<(Vec<PredictionRecord>, usize)> {
    let cfg = ctx.config;
    let mut items = load_items(args.dataset)?;
    if let Some(ratio) = args.noise_ratio {
        items = noisy_augment(&items, ratio, cfg.seed)?;
    }
    let model = load_model(ctx, args.checkpoint)?;
    let backend = make_backend(&cfg.backend)?;
    let mut infer_cfg: InferConfig = cfg.infer.clone();
    let external = match args.clues {
        Some(path) => {
            infer_cfg.clue_source = ClueSource::External;
            Some(clue_map(&load_records::<ClueFileRecord>(path)?))
        }
        None => None,
    };
    let results = infer_with_clues(&items, &model, backend.as_ref(), &infer_cfg, external.as_ref(), cfg.exec_mode())?;
    let traces: Vec<_> = results.iter().filter_map(|r| r.trace.clone()).collect();
    let records: Vec<PredictionRecord> = results.into_iter().map(|r| r.record).collect();
    let failed = records.iter().filter(|r| r.error.is_some()).count();

    ctx.records(&ctx.out(&format!("{}.jsonl", args.output)), cfg.seed, &records)?;
    ctx.records(&ctx.out(&format!("{}_traces.jsonl", args.output)), cfg.seed, &traces)?;
    let mc: Vec<PredictionRecord> = records.iter().filter(|r| r.gold_index.is_some()).cloned().collect();
    let accuracy = if mc.is_empty() { None } else { Some(mc_accuracy(&mc)?) };
    ctx.report(
        &format!("{}_summary.json", args.output),
        cfg.seed,
        &json!({
            "items": records.len(),
            "failed": failed,
            "noise_ratio": args.noise_ratio,
            "clue_source": infer_cfg.clue_source,
            "iterations": infer_cfg.iterations,
            "multi_choice_accuracy": accuracy,
        }),
    )?;
    eprintln!("{} items, {failed} failed", records.len());
    Ok((records, failed))
}

fn transport_summary(records: &[PredictionRecord], failed: usize) -> CmdResult {
    match records.iter().find_map(|r| r.error.as_deref()) {
        Some(first) => Err(CliError::Transport(format!("{failed} of {} items failed; first: {first}", records.len()))),
        None => Ok(()),
    }
}

pub fn infer_cmd(ctx: &Ctx, args: &InferArgs) -> CmdResult {
    let (records, failed) = run_infer(ctx, args)?;
    transport_summary(&records, failed)
}

fn make_judge(cfg: &RunConfig) -> CmdResult<Box<dyn Judge>> {
    Ok(match cfg.eval.judge {
        JudgeKind::Mock => Box::new(MockJudge),
        JudgeKind::Backend => Box::new(LlmJudge { backend: make_backend(&cfg.backend)? }),
    })
}

pub fn evaluate_cmd(ctx: &Ctx, predictions: Option<&Path>, psav: Option<&Path>) -> CmdResult {
    if predictions.is_none() && psav.is_none() {
        return Err(CliError::Validation("nothing to evaluate: pass --predictions and/or --psav".into()));
    }
    let cfg = ctx.config;
    let mut report = BTreeMap::<&str, Value>::new();
    if let Some(path) = predictions {
        let records: Vec<PredictionRecord> = load_records(path)?;
        if records.is_empty() {
            return Err(CliError::Validation(format!("{} contains no predictions", path.display())));
        }
        for r in &records {
            r.validate()?;
        }
        let (mc, open): (Vec<PredictionRecord>, Vec<PredictionRecord>) =
            records.iter().cloned().partition(|r| r.gold_index.is_some());
        if !mc.is_empty() {
            report.insert("multi_choice_accuracy", json!(mc_accuracy(&mc)?));
            report.insert("multi_choice_items", json!(mc.len()));
            report.insert("breakdown_by_question_type", json!(breakdown_by_question_type(&mc)?));
        }
        let open: Vec<PredictionRecord> = open.into_iter().filter(|r| r.gold_text.is_some()).collect();
        if !open.is_empty() {
            let judge = make_judge(cfg)?;
            report.insert("open_ended", json!(open_ended_eval(&open, judge.as_ref(), cfg.exec_mode())?));
        }
        report.insert("failed_items", json!(records.iter().filter(|r| r.error.is_some()).count()));
    }
    if let Some(path) = psav {
        let records: Vec<PsavRecord> = load_records(path)?;
        report.insert("psav", json!(psav_metrics(&records)?));
    }
    for (k, v) in &report {
        eprintln!("{k}: {v}");
    }
    ctx.report("evaluation.json", cfg.seed, &report)?;
    Ok(())
}

pub enum RobustnessInput<'a> {
    Predictions { vanilla: &'a Path, noisy: &'a Path },
    Run { dataset: &'a Path, checkpoint: Option<&'a Path> },
}

pub fn robustness_cmd(ctx: &Ctx, input: &RobustnessInput) -> CmdResult {
    let cfg = ctx.config;
    let (vanilla, noisy) = match input {
        RobustnessInput::Predictions { vanilla, noisy } => (load_records(vanilla)?, load_records(noisy)?),
        RobustnessInput::Run { dataset, checkpoint } => {
            let base = InferArgs { dataset, checkpoint: *checkpoint, clues: None, noise_ratio: None, output: "vanilla" };
            let (v, vf) = run_infer(ctx, &base)?;
            transport_summary(&v, vf)?;
            let noisy = InferArgs { noise_ratio: Some(cfg.eval.noise_ratio), output: "noisy", ..base };
            let (n, nf) = run_infer(ctx, &noisy)?;
            transport_summary(&n, nf)?;
            (v, n)
        }
    };
    let report = robustness_report(&vanilla, &noisy)?;
    eprintln!(
        "vanilla {:.2}%, noisy {:.2}%, drop {:.2}",
        report.vanilla_accuracy, report.noisy_accuracy, report.drop
    );
    ctx.report("robustness.json", cfg.seed, &json!({ "noise_ratio": cfg.eval.noise_ratio, "result": report }))?;
    Ok(())
}

pub fn gradcheck_cmd(ctx: &Ctx) -> CmdResult {
    let cfg = ctx.config;
    let seeds: Vec<u64> = (0..cfg.gradcheck.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let reports = run_suite(&seeds, cfg.gradcheck.tolerance, cfg.exec_mode());
    let mut per_op: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for r in &reports {
        let entry = per_op.entry(r.report.op.as_str()).or_insert((0, 0, 0.0));
        entry.0 += 1;
        entry.1 += usize::from(r.report.pass);
        let worst = r.report.per_param.iter().map(|p| p.max_relative_error).fold(0.0, f64::max);
        entry.2 = entry.2.max(worst);
    }
    for (op, (total, passed, worst)) in &per_op {
        eprintln!("{op:<22} {passed}/{total} passed, worst relative error {worst:.2e}");
    }
    ctx.report("gradcheck.json", cfg.seed, &reports)?;
    let failed: Vec<String> =
        reports.iter().filter(|r| !r.report.pass).map(|r| format!("{} (seed {})", r.report.op, r.seed)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("{} gradient checks failed: {}", failed.len(), failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_name() {
        assert_eq!(meta_path(Path::new("out/predictions.jsonl")), PathBuf::from("out/predictions.jsonl.meta.json"));
    }
}
