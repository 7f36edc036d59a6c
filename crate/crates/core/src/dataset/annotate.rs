//! Clue/question relation labeling through a judge backend.

use serde::{Deserialize, Serialize};

use super::item::IVQAItem;
use crate::aim::ClueCandidate;
use crate::error::Result;
use crate::par::{self, ExecMode};
use crate::reasoner::parse::parse_relation_labels;
use crate::reasoner::prompt::build_relation_judge_prompt;
use crate::reasoner::ChatBackend;

/// One binary label per clue, in order. An unparseable reply is an error; there is
/// no default label.
pub fn annotate_relations(clues: &[ClueCandidate], question: &str, judge: &dyn ChatBackend) -> Result<Vec<u8>> {
    if clues.is_empty() {
        return Ok(Vec::new());
    }
    let prompt = build_relation_judge_prompt(question, clues);
    let reply = judge.complete(&prompt)?;
    parse_relation_labels(&reply.text, clues.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub item_id: String,
    pub error: String,
}

/// Labels every item's clues in place. Items whose judge call fails keep their
/// previous labels and are reported back as incomplete.
pub fn annotate_items(items: &mut [IVQAItem], judge: &dyn ChatBackend, mode: ExecMode) -> Vec<AnnotationFailure> {
    let results = par::map(mode, items, |item| {
        let clues: Vec<ClueCandidate> = item.clues.iter().map(ClueCandidate::from).collect();
        annotate_relations(&clues, &item.question, judge)
    });
    let mut failures = Vec::new();
    for (item, result) in items.iter_mut().zip(results) {
        match result {
            Ok(labels) => {
                for (clue, label) in item.clues.iter_mut().zip(labels) {
                    clue.relation_label = Some(label);
                }
            }
            Err(e) => failures.push(AnnotationFailure { item_id: item.item_id.clone(), error: e.to_string() }),
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClueAnnotation, EvidenceSpan};
    use crate::reasoner::{MockBackend, TemplateId};

    fn clues(n: usize) -> Vec<ClueCandidate> {
        (0..n).map(|i| ClueCandidate::new(format!("act {i}"), format!("intent {i}"))).collect()
    }

    #[test]
    fn scripted_labels() {
        let judge = MockBackend::new().script_template(TemplateId::RelationJudge, "1,0,1");
        assert_eq!(annotate_relations(&clues(3), "why?", &judge).unwrap(), vec![1, 0, 1]);
        assert_eq!(annotate_relations(&[], "why?", &judge).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn unparseable_reply_flags_item() {
        let judge = MockBackend::new().script_template(TemplateId::RelationJudge, "probably the first one");
        assert!(annotate_relations(&clues(2), "why?", &judge).is_err());

        let span = EvidenceSpan::new(0.0, 1.0).unwrap();
        let mut items = vec![IVQAItem {
            item_id: "i0".into(),
            video_id: "v".into(),
            duration: 10.0,
            excluded_spans: vec![],
            question: "why?".into(),
            options: vec![],
            answer_index: None,
            answer: Some("x".into()),
            clues: vec![ClueAnnotation::new("a", "b", span)],
            open_ended_eligible: true,
        }];
        let failures = annotate_items(&mut items, &judge, ExecMode::Sequential);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].item_id, "i0");
        assert_eq!(items[0].clues[0].relation_label, None);
    }
}
