//! Automated exclusion filters and pluggable judge hooks for the rest.

use std::sync::OnceLock;

use regex::Regex;

use super::item::IVQAItem;
use crate::error::Result;

/// Bumped whenever [`TIMESTAMP_PATTERNS`] changes.
pub const TIMESTAMP_PATTERNS_VERSION: u32 = 1;

const UNIT: &str = r"(?:s|secs?|seconds?|mins?|minutes?)";

/// Patterns marking an answer as a temporal location.
pub const TIMESTAMP_PATTERNS: &[&str] = &[
    // clock forms: 0:15, 00:15, 1:02:03
    r"\b\d{1,2}:\d{2}(?::\d{2})?\b",
    // at/from/to/until/after/before/around N <unit>
    r"\b(?:at|from|to|until|till|after|before|around)\s+\d+(?:\.\d+)?\s*{UNIT}\b",
    // from N to M, units optional
    r"\bfrom\s+\d+(?:\.\d+)?\s*{UNIT}?\s+to\s+\d+(?:\.\d+)?",
];

fn timestamp_regexes() -> &'static [Regex] {
    static CELL: OnceLock<Vec<Regex>> = OnceLock::new();
    CELL.get_or_init(|| {
        TIMESTAMP_PATTERNS
            .iter()
            .map(|p| Regex::new(&format!("(?i){}", p.replace("{UNIT}", UNIT))).expect("static pattern"))
            .collect()
    })
}

pub fn answer_has_timestamp(answer: &str) -> bool {
    timestamp_regexes().iter().any(|re| re.is_match(answer))
}

/// True when the gold answer names a timestamp. Items without answer text are kept.
pub fn filter_temporal_answer(item: &IVQAItem) -> bool {
    item.answer_text().is_some_and(answer_has_timestamp)
}

/// True when the question asks "when" or "where".
pub fn filter_wh_insufficient(item: &IVQAItem) -> bool {
    question_is_wh_insufficient(&item.question)
}

pub fn question_is_wh_insufficient(question: &str) -> bool {
    let q = question.trim_start().to_lowercase();
    q.starts_with("when") || q.starts_with("where")
}

/// External decision on whether to drop an item (commonsense-answerable, purely
/// descriptive, not deducible from context). Implementations typically wrap a
/// model or a human review export.
pub trait ExclusionHook: Send + Sync {
    fn name(&self) -> &str;
    fn exclude(&self, item: &IVQAItem) -> Result<bool>;
}

/// Hook backed by a fixed list of item ids, e.g. the output of a manual review.
#[derive(Debug, Clone, Default)]
pub struct IdListHook {
    pub name: String,
    pub ids: std::collections::HashSet<String>,
}

impl ExclusionHook for IdListHook {
    fn name(&self) -> &str {
        &self.name
    }

    fn exclude(&self, item: &IVQAItem) -> Result<bool> {
        Ok(self.ids.contains(&item.item_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // hand-labeled fixture: (answer text, is temporal)
    const FIXTURE: &[(&str, bool)] = &[
        ("at 00:15", true),
        ("happy", false),
        ("from 12s to 20s", true),
        ("at 5 seconds", true),
        ("around 2 minutes", true),
        ("1:02:03", true),
        ("after 30 sec", true),
        ("from 3 to 7", true),
        ("to get the ball", false),
        ("he throws 2 balls", false),
        ("at the table", false),
        ("from the kitchen to the garden", false),
        ("5 kids", false),
        ("ratio 3:1 mix", false),
        ("FROM 10 S TO 12 S", true),
    ];

    #[test]
    fn timestamp_fixture() {
        for &(text, expected) in FIXTURE {
            // "ratio 3:1" has a single trailing digit so the clock pattern does not fire
            assert_eq!(answer_has_timestamp(text), expected, "{text:?}");
        }
    }

    #[test]
    fn wh_examples() {
        assert!(question_is_wh_insufficient("When does the boy fall?"));
        assert!(question_is_wh_insufficient("  where is the vase?"));
        assert!(!question_is_wh_insufficient("Why did the man laugh?"));
    }

    #[test]
    fn filters_are_pure() {
        for &(text, _) in FIXTURE {
            assert_eq!(answer_has_timestamp(text), answer_has_timestamp(text));
        }
    }
}
