//! Per-item inference: frames, clues, iterative refinement, prompting, parsing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aim::{dump_clues, ClueCandidate, ClueDump};
use crate::dataset::{question_first_word, IVQAItem};
use crate::error::{Error, Result};
use crate::eval::PredictionRecord;
use crate::model::IrmModel;
use crate::par::{self, ExecMode};
use crate::reasoner::parse::parse_option_among;
use crate::reasoner::{build_mc_prompt, build_open_prompt, generate_clue_candidates, ChatBackend, VisualSurrogate};
use crate::reasoner::backend::stable_hash;
use crate::synth::item_frames;
use crate::vem::{run_iterations, FrameFeatures, IterationTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueSource {
    /// Clues stored on the item (annotated or loaded from an external file).
    #[default]
    Dataset,
    /// Ask the backend for candidates.
    Generate,
    /// Precomputed candidates keyed by item id, passed to [`infer_with_clues`].
    External,
}

/// One line of a clue file: candidates generated for an item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClueFileRecord {
    pub item_id: String,
    pub candidates: Vec<ClueCandidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub type ExternalClues = BTreeMap<String, Vec<ClueCandidate>>;

pub fn clue_map(records: &[ClueFileRecord]) -> ExternalClues {
    records.iter().filter(|r| r.error.is_none()).map(|r| (r.item_id.clone(), r.candidates.clone())).collect()
}

/// Asks `backend` for clue candidates for every item, from a digest of its visible
/// frames. Transport failures are recorded per item.
pub fn generate_clues(
    items: &[IVQAItem],
    model_config: &crate::model::ModelConfig,
    frame_count: usize,
    backend: &dyn ChatBackend,
    mode: ExecMode,
) -> Result<Vec<ClueFileRecord>> {
    par::map(mode, items, |item| {
        let frames = item_frames(item, frame_count, model_config.tokens_per_frame, model_config.d_visual)?;
        match generate_clue_candidates(&frame_digest(&frames), &item.question, backend) {
            Ok(g) => Ok(ClueFileRecord { item_id: item.item_id.clone(), candidates: g.candidates, warnings: g.warnings, error: None }),
            Err(e) if e.is_transport() || matches!(e, Error::Parse(_)) => Ok(ClueFileRecord {
                item_id: item.item_id.clone(),
                candidates: Vec::new(),
                warnings: Vec::new(),
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub iterations: usize,
    pub frame_count: usize,
    pub clue_source: ClueSource,
    pub record_latency: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { iterations: 0, frame_count: 8, clue_source: ClueSource::Dataset, record_latency: false }
    }
}

/// Refinement details for one item, for comparing runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemTrace {
    pub item_id: String,
    pub iterations: Vec<IterationTrace>,
    pub clues: Vec<ClueDump>,
    /// Hash of the enhanced visual tokens' bit patterns.
    pub enhanced_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub record: PredictionRecord,
    pub trace: Option<ItemTrace>,
}

pub fn frame_digest(frames: &FrameFeatures) -> VisualSurrogate {
    let times: Vec<String> = frames.timestamps().iter().map(|t| format!("{t:.2}s")).collect();
    VisualSurrogate::Digest(format!("{} visible frames at {}", frames.n_frames(), times.join(", ")))
}

fn bits_digest(values: impl Iterator<Item = f64>) -> String {
    let text: String = values.map(|v| format!("{:016x}", v.to_bits())).collect();
    stable_hash(&text)
}

fn base_record(item: &IVQAItem) -> PredictionRecord {
    PredictionRecord {
        item_id: item.item_id.clone(),
        predicted_index: None,
        predicted_text: None,
        gold_index: item.answer_index,
        gold_text: item.answer_text().map(str::to_string),
        question: item.question.clone(),
        question_first_word: question_first_word(&item.question),
        latency_secs: None,
        kept_clues: Vec::new(),
        error: None,
    }
}

fn run_item(
    item: &IVQAItem,
    model: &IrmModel,
    backend: &dyn ChatBackend,
    config: &InferConfig,
    external: Option<&ExternalClues>,
) -> Result<ItemResult> {
    let start = Instant::now();
    let frames = item_frames(item, config.frame_count, model.config.tokens_per_frame, model.config.d_visual)?;
    let candidates: Vec<ClueCandidate> = match config.clue_source {
        ClueSource::Dataset => item.clues.iter().map(ClueCandidate::from).collect(),
        ClueSource::Generate => generate_clue_candidates(&frame_digest(&frames), &item.question, backend)?.candidates,
        ClueSource::External => external
            .and_then(|m| m.get(&item.item_id))
            .cloned()
            .ok_or_else(|| Error::validation(format!("no external clues for item {}", item.item_id)))?,
    };
    let outcome = run_iterations(&frames, &candidates, &item.question, config.iterations, model)?;
    let refined: Vec<ClueCandidate> = outcome.refinement.kept.iter().map(|&i| candidates[i].clone()).collect();
    let prompt = if item.is_multi_choice() { build_mc_prompt(item, &refined)? } else { build_open_prompt(item, &refined)? };
    let reply = backend.complete(&prompt)?;

    let mut record = base_record(item);
    if item.is_multi_choice() {
        record.predicted_index = parse_option_among(&reply.text, item.options.len()).option_index;
    }
    record.predicted_text = Some(reply.text.trim().to_string());
    record.kept_clues = outcome.refinement.kept.clone();
    if config.record_latency {
        record.latency_secs = Some(start.elapsed().as_secs_f64());
    }
    let trace = ItemTrace {
        item_id: item.item_id.clone(),
        clues: dump_clues(&candidates, &outcome.logits, &outcome.refinement.kept),
        enhanced_digest: bits_digest(outcome.enhanced().iter().copied()),
        iterations: outcome.trace,
    };
    Ok(ItemResult { record, trace: Some(trace) })
}

/// Runs every item. Transport failures mark the item and move on; any other error
/// aborts the run.
pub fn infer(
    items: &[IVQAItem],
    model: &IrmModel,
    backend: &dyn ChatBackend,
    config: &InferConfig,
    mode: ExecMode,
) -> Result<Vec<ItemResult>> {
    infer_with_clues(items, model, backend, config, None, mode)
}

/// [`infer`] with an optional map of precomputed candidates, used when the clue
/// source is [`ClueSource::External`].
pub fn infer_with_clues(
    items: &[IVQAItem],
    model: &IrmModel,
    backend: &dyn ChatBackend,
    config: &InferConfig,
    external: Option<&ExternalClues>,
    mode: ExecMode,
) -> Result<Vec<ItemResult>> {
    par::map(mode, items, |item| match run_item(item, model, backend, config, external) {
        Err(e) if e.is_transport() => {
            let mut record = base_record(item);
            record.error = Some(e.to_string());
            Ok(ItemResult { record, trace: None })
        }
        other => other,
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::reasoner::{Completion, MockBackend, PromptBundle};
    use crate::synth::smoke_dataset;

    fn model() -> IrmModel {
        IrmModel::init(ModelConfig { d_model: 16, head_count: 2, d_visual: 8, visual_head_count: 2, n_queries: 4, tokens_per_frame: 2, embed_seed: 1 }, 3).unwrap()
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let items = smoke_dataset(6, 2);
        let m = model();
        let cfg = InferConfig::default();
        let a = infer(&items, &m, &MockBackend::new(), &cfg, ExecMode::Parallel).unwrap();
        let b = infer(&items, &m, &MockBackend::new(), &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.record.predicted_index.is_some()));
    }

    struct Down;
    impl ChatBackend for Down {
        fn complete(&self, _: &PromptBundle) -> Result<Completion> {
            Err(Error::Transport { request_id: "r1".into(), message: "connection refused".into() })
        }
    }

    #[test]
    fn transport_failures_are_per_item() {
        let items = smoke_dataset(3, 2);
        let out = infer(&items, &model(), &Down, &InferConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.record.error.is_some() && r.record.predicted_index.is_none()));
    }

    #[test]
    fn generated_clues_path() {
        let items = smoke_dataset(2, 4);
        let cfg = InferConfig { clue_source: ClueSource::Generate, iterations: 1, ..InferConfig::default() };
        let out = infer(&items, &model(), &MockBackend::new(), &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(out[0].trace.as_ref().unwrap().iterations.len(), 2);
    }

    #[test]
    fn external_clues_bypass_generation() {
        let items = smoke_dataset(3, 4);
        let records = generate_clues(&items, &model().config, 8, &MockBackend::new(), ExecMode::Sequential).unwrap();
        assert!(records.iter().all(|r| r.error.is_none() && !r.candidates.is_empty()));
        let map = clue_map(&records);
        let cfg = InferConfig { clue_source: ClueSource::External, ..InferConfig::default() };
        let out = infer_with_clues(&items, &model(), &MockBackend::new(), &cfg, Some(&map), ExecMode::Sequential).unwrap();
        let dumped: Vec<ClueCandidate> =
            out[0].trace.as_ref().unwrap().clues.iter().map(|c| ClueCandidate::new(&c.action, &c.intent)).collect();
        assert_eq!(dumped, map[&items[0].item_id]);
        assert!(infer_with_clues(&items, &model(), &MockBackend::new(), &cfg, None, ExecMode::Sequential).is_err());
    }
}
