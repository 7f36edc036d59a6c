use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reasoner::parse::parse_judge_reply;
use crate::reasoner::prompt::build_answer_judge_prompt;
use crate::reasoner::ChatBackend;
use crate::text::token_f1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: f64,
    pub correct: bool,
}

impl JudgeVerdict {
    pub fn new(score: f64, correct: bool) -> Result<Self> {
        if !(0.0..=5.0).contains(&score) {
            return Err(Error::validation(format!("judge score {score} outside [0, 5]")));
        }
        Ok(Self { score, correct })
    }
}

pub trait Judge: Send + Sync {
    fn judge(&self, question: &str, gold: &str, predicted: &str) -> Result<JudgeVerdict>;
}

/// Token-F1 judge: score `round(5 F1)`, correct when `F1 >= 0.5`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl Judge for MockJudge {
    fn judge(&self, _question: &str, gold: &str, predicted: &str) -> Result<JudgeVerdict> {
        let f1 = token_f1(predicted, gold);
        JudgeVerdict::new((5.0 * f1).round(), f1 >= 0.5)
    }
}

/// Asks a chat backend to grade the answer.
pub struct LlmJudge {
    pub backend: Box<dyn ChatBackend>,
}

impl Judge for LlmJudge {
    fn judge(&self, question: &str, gold: &str, predicted: &str) -> Result<JudgeVerdict> {
        let reply = self.backend.complete(&build_answer_judge_prompt(question, gold, predicted))?;
        let (score, correct) = parse_judge_reply(&reply.text)?;
        JudgeVerdict::new(score, correct)
    }
}
