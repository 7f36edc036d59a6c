use serde::{Deserialize, Serialize};

use super::span::{check_clue_eligibility, EvidenceSpan};
use crate::error::{Error, Result};

/// One action-intent clue attached to an item, derived from a context QA pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClueAnnotation {
    pub action: String,
    pub intent: String,
    pub source_span: EvidenceSpan,
    /// 1 when the clue contributes to answering the item's question; absent until annotated.
    pub relation_label: Option<u8>,
    /// Set on clues injected by noisy augmentation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noisy: bool,
    /// Video the clue was drawn from when it differs from the owning item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_video: Option<String>,
}

impl ClueAnnotation {
    pub fn new(action: impl Into<String>, intent: impl Into<String>, source_span: EvidenceSpan) -> Self {
        Self {
            action: action.into(),
            intent: intent.into(),
            source_span,
            relation_label: None,
            noisy: false,
            source_video: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.relation_label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.action.trim().is_empty() || self.intent.trim().is_empty() {
            return Err(Error::validation("clue action and intent must be non-empty"));
        }
        if let Some(label) = self.relation_label {
            if label > 1 {
                return Err(Error::validation(format!("relation label must be 0 or 1, got {label}")));
            }
        }
        Ok(())
    }
}

/// One implicit-question instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IVQAItem {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub item_id: String,
    pub video_id: String,
    pub duration: f64,
    pub excluded_spans: Vec<EvidenceSpan>,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: Option<usize>,
    /// Free-form gold answer, used by open-ended evaluation and the temporal-answer filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub clues: Vec<ClueAnnotation>,
    pub open_ended_eligible: bool,
}

impl IVQAItem {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::validation(format!("duration must be > 0, got {}", self.duration)));
        }
        for span in &self.excluded_spans {
            span.check_within(self.duration)?;
        }
        if !self.options.is_empty() && !(2..=5).contains(&self.options.len()) {
            return Err(Error::validation(format!(
                "expected 2-5 options or none, got {}",
                self.options.len()
            )));
        }
        if let Some(idx) = self.answer_index {
            if idx >= self.options.len() {
                return Err(Error::validation(format!(
                    "answer_index {idx} out of range for {} options",
                    self.options.len()
                )));
            }
        }
        for clue in &self.clues {
            clue.validate()?;
            if clue.noisy {
                // Spans of injected clues refer to their source video.
                continue;
            }
            clue.source_span.check_within(self.duration)?;
            if !check_clue_eligibility(&clue.source_span, &self.excluded_spans) {
                return Err(Error::validation(format!(
                    "clue span [{}, {}] overlaps masked evidence",
                    clue.source_span.start(),
                    clue.source_span.end()
                )));
            }
        }
        Ok(())
    }

    /// Gold answer text: the explicit answer if present, else the indexed option.
    pub fn answer_text(&self) -> Option<&str> {
        self.answer
            .as_deref()
            .or_else(|| self.answer_index.and_then(|i| self.options.get(i)).map(String::as_str))
    }

    pub fn is_multi_choice(&self) -> bool {
        !self.options.is_empty()
    }

    pub fn has_relation_labels(&self) -> bool {
        !self.clues.is_empty() && self.clues.iter().all(|c| c.relation_label.is_some())
    }
}

/// Normalized first word of a question: alphanumerics only, capitalized (`"why..."` -> `"Why"`).
pub fn question_first_word(question: &str) -> String {
    let word: String = question
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item() -> IVQAItem {
        IVQAItem {
            item_id: "v1#0".into(),
            video_id: "v1".into(),
            duration: 60.0,
            excluded_spans: vec![EvidenceSpan::new(7.0, 23.0).unwrap()],
            question: "Why did the boy climb?".into(),
            options: vec!["a".into(), "b".into(), "c".into()],
            answer_index: Some(1),
            answer: None,
            clues: vec![ClueAnnotation::new("boy walks", "reach bar", EvidenceSpan::new(23.0, 30.0).unwrap())],
            open_ended_eligible: false,
        }
    }

    #[test]
    fn valid_item_passes() {
        item().validate().unwrap();
        assert_eq!(item().answer_text(), Some("b"));
    }

    #[test]
    fn rejects_out_of_range_answer() {
        let mut it = item();
        it.answer_index = Some(3);
        assert!(it.validate().is_err());
    }

    #[test]
    fn rejects_overlapping_clue() {
        let mut it = item();
        it.clues[0].source_span = EvidenceSpan::new(20.0, 30.0).unwrap();
        assert!(it.validate().is_err());
    }

    #[test]
    fn rejects_bad_label_and_option_count() {
        let mut it = item();
        it.clues[0].relation_label = Some(2);
        assert!(it.validate().is_err());
        let mut it = item();
        it.options = vec!["only".into()];
        it.answer_index = None;
        assert!(it.validate().is_err());
    }

    #[test]
    fn first_word_normalization() {
        assert_eq!(question_first_word("  why… did it"), "Why");
        assert_eq!(question_first_word("WHAT is"), "What");
        assert_eq!(question_first_word(""), "");
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(item()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<IVQAItem>(v).is_err());
    }
}
