//! Readers for grounded-VQA source annotations and the I-VQA construction pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::filters::{filter_temporal_answer, filter_wh_insufficient, ExclusionHook};
use super::item::{ClueAnnotation, IVQAItem};
use super::span::{check_clue_eligibility, extend_span, EvidenceSpan, DEFAULT_SIGMA};
use crate::error::{Error, Result};

/// A context QA pair from the same video, the raw material for one clue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceContextQa {
    pub question: String,
    pub answer: String,
    #[serde(alias = "location", alias = "timestamp")]
    pub span: [f64; 2],
    /// Pre-written declarative form of `question`; rewritten automatically when absent.
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub relation_label: Option<u8>,
}

/// One grounded QA record. Field aliases cover the common layouts
/// (`qid`/`video`/`choices`/`location`); anything unrecognized lands in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    #[serde(default, alias = "qid", alias = "item_id")]
    pub id: Option<Value>,
    #[serde(alias = "video", alias = "vid")]
    pub video_id: String,
    pub duration: f64,
    pub question: String,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default, alias = "choices", alias = "candidates")]
    pub options: Vec<String>,
    #[serde(default, alias = "answer_idx")]
    pub answer_index: Option<usize>,
    #[serde(default, alias = "location", alias = "spans", alias = "grounding")]
    pub grounded_spans: Vec<[f64; 2]>,
    #[serde(default)]
    pub context: Vec<SourceContextQa>,
    #[serde(default)]
    pub open_ended_eligible: bool,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SourceRecord {
    pub fn id_string(&self, position: usize) -> String {
        match &self.id {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => format!("{}#{position}", self.video_id),
            Some(other) => other.to_string(),
        }
    }
}

/// Reads either a JSON array of records or one record per line.
pub fn read_source_records(path: &Path) -> Result<Vec<SourceRecord>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    crate::io::read_jsonl(path)
}

/// Turns a context question into the declarative "action" half of a clue.
pub trait ActionRewriter: Send + Sync {
    fn rewrite(&self, question: &str) -> String;
}

/// Drops the leading wh-word and auxiliary plus trailing punctuation:
/// `"Why did the boy climb the bars?"` -> `"the boy climb the bars"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicRewriter;

impl ActionRewriter for HeuristicRewriter {
    fn rewrite(&self, question: &str) -> String {
        const WH: &[&str] = &["why", "what", "how", "who", "which", "when", "where"];
        const AUX: &[&str] = &["did", "does", "do", "is", "are", "was", "were", "has", "have", "can"];
        let words: Vec<&str> = question.split_whitespace().collect();
        let mut start = 0;
        if words.first().is_some_and(|w| WH.contains(&w.to_lowercase().as_str())) {
            start = 1;
            if words.get(1).is_some_and(|w| AUX.contains(&w.to_lowercase().as_str())) {
                start = 2;
            }
        }
        let text = words[start.min(words.len())..].join(" ");
        let text = text.trim_end_matches(['?', '.', '!', ' ']);
        if text.is_empty() {
            question.trim().to_string()
        } else {
            text.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    TemporalAnswer,
    WhInsufficient,
    Hook { name: String },
    Invalid { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub item_id: String,
    #[serde(flatten)]
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub sigma: f64,
    pub filter_temporal: bool,
    pub filter_wh: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, filter_temporal: true, filter_wh: true }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutcome {
    pub items: Vec<IVQAItem>,
    pub excluded: Vec<Exclusion>,
}

/// Converts one source record: extends and masks the grounded evidence, resolves the
/// answer index, and keeps only context clues whose span avoids the masked evidence.
pub fn convert_record(
    record: &SourceRecord,
    position: usize,
    sigma: f64,
    rewriter: &dyn ActionRewriter,
) -> Result<IVQAItem> {
    let duration = record.duration;
    let excluded = record
        .grounded_spans
        .iter()
        .map(|&[s, e]| extend_span(EvidenceSpan::new(s, e)?, duration, sigma))
        .collect::<Result<Vec<_>>>()?;

    let answer_index = match record.answer_index {
        Some(i) => Some(i),
        None => record.answer.as_ref().and_then(|a| {
            let a = a.trim().to_lowercase();
            record.options.iter().position(|o| o.trim().to_lowercase() == a)
        }),
    };
    if !record.options.is_empty() && answer_index.is_none() {
        return Err(Error::validation("multi-choice record without a resolvable answer"));
    }

    let mut clues = Vec::new();
    for ctx in &record.context {
        let span = EvidenceSpan::new(ctx.span[0], ctx.span[1])?;
        span.check_within(duration)?;
        if !check_clue_eligibility(&span, &excluded) {
            continue;
        }
        let action = ctx.action.clone().unwrap_or_else(|| rewriter.rewrite(&ctx.question));
        let mut clue = ClueAnnotation::new(action, ctx.answer.trim(), span);
        clue.relation_label = ctx.relation_label;
        clues.push(clue);
    }

    let item = IVQAItem {
        item_id: record.id_string(position),
        video_id: record.video_id.clone(),
        duration,
        excluded_spans: excluded,
        question: record.question.clone(),
        options: record.options.clone(),
        answer_index,
        answer: record.answer.clone(),
        clues,
        open_ended_eligible: record.open_ended_eligible,
    };
    item.validate()?;
    Ok(item)
}

/// Runs conversion, the automated filters, then each hook in order. The first
/// filter that fires decides the recorded reason.
pub fn build_dataset(
    records: &[SourceRecord],
    options: &BuildOptions,
    rewriter: &dyn ActionRewriter,
    hooks: &[&dyn ExclusionHook],
) -> Result<BuildOutcome> {
    let mut outcome = BuildOutcome::default();
    'records: for (pos, record) in records.iter().enumerate() {
        let item_id = record.id_string(pos);
        let item = match convert_record(record, pos, options.sigma, rewriter) {
            Ok(item) => item,
            Err(e) => {
                outcome
                    .excluded
                    .push(Exclusion { item_id, reason: ExclusionReason::Invalid { message: e.to_string() } });
                continue;
            }
        };
        let reason = if options.filter_temporal && filter_temporal_answer(&item) {
            Some(ExclusionReason::TemporalAnswer)
        } else if options.filter_wh && filter_wh_insufficient(&item) {
            Some(ExclusionReason::WhInsufficient)
        } else {
            None
        };
        if let Some(reason) = reason {
            outcome.excluded.push(Exclusion { item_id, reason });
            continue;
        }
        for hook in hooks {
            if hook.exclude(&item)? {
                outcome
                    .excluded
                    .push(Exclusion { item_id, reason: ExclusionReason::Hook { name: hook.name().to_string() } });
                continue 'records;
            }
        }
        outcome.items.push(item);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(question: &str, answer: &str) -> SourceRecord {
        serde_json::from_value(serde_json::json!({
            "qid": 7,
            "video": "vid1",
            "duration": 60.0,
            "question": question,
            "answer": answer,
            "choices": ["run", answer, "sit"],
            "location": [[10.0, 20.0]],
            "context": [
                {"question": "Why did the boy climb the bars?", "answer": "practice", "span": [0.0, 6.0]},
                {"question": "What is the girl holding?", "answer": "a cup", "span": [5.0, 9.0]},
                {"question": "How did he land?", "answer": "softly", "span": [23.0, 30.0], "action": "he lands"}
            ],
            "split": "train"
        }))
        .unwrap()
    }

    #[test]
    fn conversion_masks_and_filters_clues() {
        let item = convert_record(&record("Why did he jump?", "jump"), 0, 20.0, &HeuristicRewriter).unwrap();
        assert_eq!(item.item_id, "7");
        assert_eq!(item.excluded_spans, vec![EvidenceSpan::new(7.0, 23.0).unwrap()]);
        assert_eq!(item.answer_index, Some(1));
        // the [5,9] context overlaps the extended evidence
        let actions: Vec<&str> = item.clues.iter().map(|c| c.action.as_str()).collect();
        assert_eq!(actions, vec!["the boy climb the bars", "he lands"]);
    }

    #[test]
    fn passthrough_keeps_unknown_fields() {
        let r = record("Why?", "jump");
        assert_eq!(r.extra.get("split"), Some(&Value::String("train".into())));
        let back: SourceRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.extra, r.extra);
    }

    #[test]
    fn pipeline_applies_filters_in_order() {
        let records = vec![
            record("Why did he jump?", "jump"),
            record("When did he jump?", "jump"),
            record("What happened?", "at 00:15"),
        ];
        let out = build_dataset(&records, &BuildOptions::default(), &HeuristicRewriter, &[]).unwrap();
        assert_eq!(out.items.len(), 1);
        let reasons: Vec<_> = out.excluded.iter().map(|e| e.reason.clone()).collect();
        assert_eq!(reasons, vec![ExclusionReason::WhInsufficient, ExclusionReason::TemporalAnswer]);
    }

    #[test]
    fn rewriter_examples() {
        assert_eq!(HeuristicRewriter.rewrite("What does the lady hold?"), "the lady hold");
        assert_eq!(HeuristicRewriter.rewrite("boy runs."), "boy runs");
    }
}
