//! Prompt templates. Rendering is byte-stable: each turn is one line terminated by `\n`.

use serde::{Deserialize, Serialize};

use crate::aim::ClueCandidate;
use crate::dataset::IVQAItem;
use crate::error::{Error, Result};

pub const IMPLICIT_PREAMBLE: &str = "The question involves implicit visual information, with key visual evidence being invisible, requiring the deduction of the answer based on contextual visual information and provided intention, action clues";
pub const CLUE_HEADER: &str = "Context clues are as follows: ";
pub const SELECT_INSTRUCTION: &str = "Based on the clues, select the option that accurately addresses the question.";
pub const CLOSING: &str = "Only give the best option.";
pub const PSAV_HEADER: &str = "Please choose one advertising strategy that aligns with the intent of the advertisement: ";

/// The twelve persuasion strategies, in their fixed A-L order. Entry K keeps its
/// trailing space to match the published list.
pub const PSAV_STRATEGIES: [&str; 12] = [
    "Social Identity",
    "Concreteness",
    "Anchoring and Comparison",
    "Overcoming Reactance",
    "Reciprocity",
    "Foot-in-the-Door",
    "Authority",
    "Social Impact",
    "Anthropomorphism",
    "Scarcity",
    "Social Proof ",
    "Unclear",
];

/// Instruction handed to the visual compressor; `{q}` is replaced by the question.
pub const COMPRESSOR_INSTRUCTION: &str = "Extract the context clues related to the question: {q}";

/// Default word joining action and intent in a rendered clue line.
pub const DEFAULT_CONNECTOR: &str = "to";
pub const CONNECTORS: [&str; 3] = ["to", "by", "before"];

pub const SPEAKER: &str = "Human";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    MultiChoice,
    OpenEnded,
    Psav,
    ClueGeneration,
    /// Repo-owned clue/question relation labeling prompt.
    RelationJudge,
    /// Repo-owned open-ended answer grading prompt.
    AnswerJudge,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::MultiChoice => "multi_choice",
            TemplateId::OpenEnded => "open_ended",
            TemplateId::Psav => "psav",
            TemplateId::ClueGeneration => "clue_generation",
            TemplateId::RelationJudge => "relation_judge",
            TemplateId::AnswerJudge => "answer_judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_id: TemplateId,
    pub turns: Vec<Turn>,
    pub rendered: String,
}

impl PromptBundle {
    fn from_lines(template_id: TemplateId, lines: Vec<String>) -> Self {
        let mut rendered = String::new();
        for line in &lines {
            rendered.push_str(line);
            rendered.push('\n');
        }
        let turns = lines.into_iter().map(|text| Turn { speaker: SPEAKER.to_string(), text }).collect();
        PromptBundle { template_id, turns, rendered }
    }

    /// Lines of the rendered text, without terminators.
    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.rendered.lines()
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

/// `"{action} to {intent}"`, unless the intent already opens with a connector word.
pub fn render_clue(clue: &ClueCandidate) -> String {
    let intent = clue.intent.trim();
    let first = intent.split_whitespace().next().unwrap_or("").to_lowercase();
    if CONNECTORS.contains(&first.as_str()) {
        format!("{} {}", clue.action.trim(), intent)
    } else {
        format!("{} {DEFAULT_CONNECTOR} {}", clue.action.trim(), intent)
    }
}

/// Header plus one `Clues{i}:` line per clue; nothing at all for an empty list.
pub fn clue_block(clues: &[ClueCandidate]) -> Vec<String> {
    if clues.is_empty() {
        return Vec::new();
    }
    let mut lines = vec![CLUE_HEADER.to_string()];
    lines.extend(clues.iter().enumerate().map(|(i, c)| format!("Clues{}: {}", i + 1, render_clue(c))));
    lines
}

fn check_question(item: &IVQAItem) -> Result<()> {
    if item.question.trim().is_empty() {
        return Err(Error::validation("empty question"));
    }
    Ok(())
}

pub fn build_mc_prompt(item: &IVQAItem, clues: &[ClueCandidate]) -> Result<PromptBundle> {
    check_question(item)?;
    if item.options.is_empty() {
        return Err(Error::validation("item has no options; use the open-ended prompt"));
    }
    if item.options.len() > 26 {
        return Err(Error::validation("too many options"));
    }
    let mut lines = vec![IMPLICIT_PREAMBLE.to_string()];
    lines.extend(clue_block(clues));
    lines.push(SELECT_INSTRUCTION.to_string());
    lines.push(format!("Question: {}", item.question));
    lines.extend(item.options.iter().enumerate().map(|(i, o)| format!("({}) {o}", option_letter(i))));
    lines.push(CLOSING.to_string());
    Ok(PromptBundle::from_lines(TemplateId::MultiChoice, lines))
}

pub fn build_open_prompt(item: &IVQAItem, clues: &[ClueCandidate]) -> Result<PromptBundle> {
    check_question(item)?;
    let mut lines = vec![IMPLICIT_PREAMBLE.to_string()];
    lines.extend(clue_block(clues));
    lines.push(format!("Question: {}", item.question));
    Ok(PromptBundle::from_lines(TemplateId::OpenEnded, lines))
}

pub fn build_psav_prompt(clues: &[ClueCandidate]) -> PromptBundle {
    let mut lines = vec![PSAV_HEADER.to_string()];
    lines.extend(PSAV_STRATEGIES.iter().enumerate().map(|(i, s)| format!("({}) {s}", option_letter(i))));
    lines.extend(clue_block(clues));
    lines.push(SELECT_INSTRUCTION.to_string());
    lines.push(CLOSING.to_string());
    PromptBundle::from_lines(TemplateId::Psav, lines)
}

/// What the clue generator is shown in place of pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualSurrogate {
    /// `(timestamp seconds, caption)` per sampled frame.
    Captions(Vec<(f64, String)>),
    /// Free-form summary of frame features.
    Digest(String),
}

const CLUE_TASK: &str = "Task: Please extract the context clues from the visible video content that help answer the question. Describe each clue as an observed action and the intent behind that action.";
const CLUE_FORMAT: &str = "Output one clue per line in the form \"{i}. {action}: {intent}\".";
const CLUE_EXAMPLE: [&str; 3] = [
    "Example:",
    "1. boy climbs onto apparatus: engage in gymnastics activity",
    "2. the boy holds onto gymnastic bars: practice balance",
];

/// Clue-generation instruction with its in-context example.
pub fn build_clue_generation_prompt(surrogate: &VisualSurrogate, question: &str) -> Result<PromptBundle> {
    if question.trim().is_empty() {
        return Err(Error::validation("empty question"));
    }
    let mut lines = vec![CLUE_TASK.to_string(), CLUE_FORMAT.to_string()];
    lines.extend(CLUE_EXAMPLE.iter().map(|s| s.to_string()));
    match surrogate {
        VisualSurrogate::Captions(caps) => {
            lines.push("Frames:".to_string());
            lines.extend(caps.iter().enumerate().map(|(i, (t, c))| format!("Frame{} ({t:.2}s): {c}", i + 1)));
        }
        VisualSurrogate::Digest(d) => lines.push(format!("Visual summary: {d}")),
    }
    lines.push(format!("Question: {question}"));
    Ok(PromptBundle::from_lines(TemplateId::ClueGeneration, lines))
}

pub fn build_relation_judge_prompt(question: &str, clues: &[ClueCandidate]) -> PromptBundle {
    let mut lines = vec![
        "Task: For each context clue, decide whether acquiring it causally contributes to deducing the answer of the question. Consider the counterfactual: would the answer still follow without the clue? Label contributing clues 1 and the others 0.".to_string(),
        format!("Question: {question}"),
    ];
    lines.extend(clue_block(clues));
    lines.push("Reply with the labels only, comma-separated, in clue order.".to_string());
    PromptBundle::from_lines(TemplateId::RelationJudge, lines)
}

pub fn build_answer_judge_prompt(question: &str, gold: &str, predicted: &str) -> PromptBundle {
    let lines = vec![
        "Task: Evaluate whether the predicted answer to a video question matches the correct answer in meaning. Rate its quality with an integer from 0 to 5 and state whether it is correct.".to_string(),
        format!("Question: {question}"),
        format!("Correct Answer: {gold}"),
        format!("Predicted Answer: {predicted}"),
        "Reply exactly in the form \"score: N, correct: yes\" or \"score: N, correct: no\".".to_string(),
    ];
    PromptBundle::from_lines(TemplateId::AnswerJudge, lines)
}
