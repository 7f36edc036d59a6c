//! Parsers for model replies: chosen options, generated clues, judge labels.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompt::{option_letter, CONNECTORS, DEFAULT_CONNECTOR};
use crate::aim::ClueCandidate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Ambiguous,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerParse {
    pub option_index: Option<usize>,
    pub raw_text: String,
    pub parse_status: ParseStatus,
}

fn explicit_patterns() -> &'static [Regex] {
    static CELL: OnceLock<Vec<Regex>> = OnceLock::new();
    CELL.get_or_init(|| {
        [
            r"(?i:answer)\s*(?:(?i:is)\s*)?[:\-]?\s*\(?([A-Z])\b",
            r"(?i:option)\s*(?:(?i:is)\s*)?[:\-]?\s*\(?([A-Z])\b",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("static pattern"))
        .collect()
    })
}

fn enumerated_patterns() -> &'static [Regex] {
    static CELL: OnceLock<Vec<Regex>> = OnceLock::new();
    CELL.get_or_init(|| {
        [r"\(([A-Z])\)", r"(?:^|\s)([A-Z])[.)](?:\s|$)", r"^\s*([A-Z])\s*$"]
            .iter()
            .map(|p| Regex::new(p).expect("static pattern"))
            .collect()
    })
}

/// Parses an option letter among the first five (A-E).
pub fn parse_option(text: &str) -> AnswerParse {
    parse_option_among(text, 5)
}

/// Explicit forms ("Answer: C", "best option is (C)") win, earliest first. Otherwise
/// bare forms ("(C)", "C)", "C.") are collected; a single distinct letter is accepted
/// and several distinct letters (a restated option list) are ambiguous.
pub fn parse_option_among(text: &str, n_options: usize) -> AnswerParse {
    let in_range = |c: &str| {
        let idx = (c.as_bytes()[0] - b'A') as usize;
        (idx < n_options).then_some(idx)
    };
    let result = |option_index, parse_status| AnswerParse {
        option_index,
        raw_text: text.to_string(),
        parse_status,
    };

    let explicit = explicit_patterns()
        .iter()
        .flat_map(|re| re.captures_iter(text))
        .filter_map(|cap| {
            let m = cap.get(1)?;
            in_range(m.as_str()).map(|idx| (m.start(), idx))
        })
        .min_by_key(|&(pos, _)| pos);
    if let Some((_, idx)) = explicit {
        return result(Some(idx), ParseStatus::Ok);
    }

    let mut found: Vec<(usize, usize)> = enumerated_patterns()
        .iter()
        .flat_map(|re| re.captures_iter(text))
        .filter_map(|cap| {
            let m = cap.get(1)?;
            in_range(m.as_str()).map(|idx| (m.start(), idx))
        })
        .collect();
    found.sort_unstable();
    let first = match found.first() {
        Some(&(_, idx)) => idx,
        None => return result(None, ParseStatus::None),
    };
    if found.iter().all(|&(_, idx)| idx == first) {
        result(Some(first), ParseStatus::Ok)
    } else {
        result(None, ParseStatus::Ambiguous)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClueParse {
    pub candidates: Vec<ClueCandidate>,
    pub warnings: Vec<String>,
}

/// Reads `"{i}. {action}: {intent}"` lines; other non-blank lines become warnings.
pub fn parse_generated_clues(text: &str) -> ClueParse {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let re = LINE.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s*([^:]*?)\s*:\s*(.*?)\s*$").expect("static pattern"));
    let mut out = ClueParse::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match re.captures(line) {
            Some(cap) if !cap[1].is_empty() && !cap[2].is_empty() => {
                out.candidates.push(ClueCandidate::new(&cap[1], &cap[2]));
            }
            _ => out.warnings.push(format!("line {}: unparseable clue {:?}", lineno + 1, line)),
        }
    }
    out
}

/// Recovers `(action, intent)` pairs from the `Clues{i}:` lines of a rendered prompt,
/// splitting each at the earliest connector word. Inverse of the renderer when
/// actions contain no connector word and intents do not open with the default one.
pub fn parse_clue_block(rendered: &str) -> Vec<ClueCandidate> {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let re = LINE.get_or_init(|| Regex::new(r"^Clues\d+: (.*)$").expect("static pattern"));
    rendered
        .lines()
        .filter_map(|line| re.captures(line))
        .filter_map(|cap| {
            let body = cap.get(1)?.as_str();
            let (pos, conn) = CONNECTORS
                .iter()
                .filter_map(|c| body.find(&format!(" {c} ")).map(|p| (p, *c)))
                .min_by_key(|&(p, _)| p)?;
            // the default connector is inserted by rendering; any other belongs to the intent
            let intent = if conn == DEFAULT_CONNECTOR { &body[pos + conn.len() + 2..] } else { &body[pos + 1..] };
            Some(ClueCandidate::new(&body[..pos], intent))
        })
        .collect()
}

/// Exactly `expected` labels, each 0 or 1, separated by commas or whitespace.
pub fn parse_relation_labels(text: &str, expected: usize) -> Result<Vec<u8>> {
    let tokens: Vec<&str> = text
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    let labels = tokens
        .iter()
        .map(|t| match *t {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Parse(format!("unexpected relation label {other:?} in {text:?}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    if labels.len() != expected {
        return Err(Error::Parse(format!("expected {expected} labels, got {} in {text:?}", labels.len())));
    }
    Ok(labels)
}

/// Reads `"score: N, correct: yes|no"`.
pub fn parse_judge_reply(text: &str) -> Result<(f64, bool)> {
    static SCORE: OnceLock<Regex> = OnceLock::new();
    static CORRECT: OnceLock<Regex> = OnceLock::new();
    let score_re = SCORE.get_or_init(|| Regex::new(r"(?i)score\s*[:=]\s*(\d+(?:\.\d+)?)").expect("static pattern"));
    let correct_re =
        CORRECT.get_or_init(|| Regex::new(r"(?i)correct\s*[:=]\s*(yes|no|true|false)").expect("static pattern"));
    let score: f64 = score_re
        .captures(text)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| Error::Parse(format!("no score in judge reply {text:?}")))?;
    if !(0.0..=5.0).contains(&score) {
        return Err(Error::Parse(format!("judge score {score} outside [0, 5]")));
    }
    let correct = correct_re
        .captures(text)
        .map(|c| matches!(c[1].to_lowercase().as_str(), "yes" | "true"))
        .ok_or_else(|| Error::Parse(format!("no verdict in judge reply {text:?}")))?;
    Ok((score, correct))
}

/// `"The best option is (C)."` style reply used by the mock backend.
pub fn format_option_reply(index: usize) -> String {
    format!("The best option is ({}).", option_letter(index))
}
