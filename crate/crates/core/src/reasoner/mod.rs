//! Prompt assembly, chat backends, and reply parsing.

pub mod backend;
pub mod parse;
pub mod prompt;

pub use backend::{
    make_backend, BackendConfig, BackendKind, ChatBackend, Completion, MockBackend, RemoteBackend,
};
pub use parse::{parse_option, parse_option_among, AnswerParse, ParseStatus};
pub use prompt::{
    build_clue_generation_prompt, build_mc_prompt, build_open_prompt, build_psav_prompt, PromptBundle, TemplateId,
    VisualSurrogate,
};

use crate::aim::ClueCandidate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClues {
    pub candidates: Vec<ClueCandidate>,
    pub warnings: Vec<String>,
}

/// Prompts `backend` for action-intent candidates. The same call serves both the
/// external-generator path and self-generation; only the backend differs.
pub fn generate_clue_candidates(
    surrogate: &VisualSurrogate,
    question: &str,
    backend: &dyn ChatBackend,
) -> Result<GeneratedClues> {
    let prompt = build_clue_generation_prompt(surrogate, question)?;
    let reply = backend.complete(&prompt)?;
    let parsed = parse::parse_generated_clues(&reply.text);
    if parsed.candidates.is_empty() {
        return Err(Error::Parse("no clue candidates".to_string()));
    }
    Ok(GeneratedClues { candidates: parsed.candidates, warnings: parsed.warnings })
}

pub fn complete(backend: &dyn ChatBackend, prompt: &PromptBundle) -> Result<Completion> {
    backend.complete(prompt)
}
