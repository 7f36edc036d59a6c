//! I-VQA dataset construction: masking, filtering, clue annotation, statistics.

pub mod annotate;
pub mod filters;
pub mod item;
pub mod source;
pub mod span;
pub mod stats;

use std::path::Path;

pub use annotate::{annotate_items, annotate_relations, AnnotationFailure};
pub use filters::{filter_temporal_answer, filter_wh_insufficient, ExclusionHook, IdListHook};
pub use item::{question_first_word, ClueAnnotation, IVQAItem};
pub use source::{build_dataset, read_source_records, BuildOptions, BuildOutcome, HeuristicRewriter, SourceRecord};
pub use span::{
    check_clue_eligibility, extend_span, sample_frames, union_measure, visible_timeline, EvidenceSpan, Interval,
    DEFAULT_SIGMA,
};
pub use stats::{compute_statistics, DatasetStats};

use crate::error::{Error, Result};

/// Reads a dataset file, validating every item. Items without an id get
/// `"{video_id}#{line}"`.
pub fn read_items(path: &Path) -> Result<Vec<IVQAItem>> {
    let mut items: Vec<IVQAItem> = crate::io::read_jsonl(path)?;
    for (idx, item) in items.iter_mut().enumerate() {
        if item.item_id.is_empty() {
            item.item_id = format!("{}#{idx}", item.video_id);
        }
        item.validate().map_err(|e| Error::Record {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
    }
    Ok(items)
}

pub fn write_items(path: &Path, items: &[IVQAItem]) -> Result<()> {
    crate::io::write_jsonl(path, items)
}
