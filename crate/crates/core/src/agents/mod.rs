//! The three LLM roles: predictor, analyzer and generator.
//!
//! Each role is a trait so the engine can be driven either by the HTTP
//! chat-completion backend in [`http`] or by deterministic closures from
//! [`scripted`].

pub mod http;
pub mod scripted;
pub mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Feedback, Prompt};

pub use http::{chat_complete, AgentConfig, HttpAnalyzer, HttpBackend, HttpGenerator, HttpPredictor};
pub use templates::{parse_generated_prompt, Templates};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("agent produced empty output")]
    EmptyOutput,
    #[error("{0}")]
    Other(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationMode {
    /// Crossover followed by a mutation that addresses the parents' feedback.
    Guided,
    /// Crossover followed by a meaning-preserving rephrase; feedback is ignored.
    #[serde(alias = "random")]
    RandomMutation,
}

/// One wrong prediction shown to the analyzer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ErrorCase<'a> {
    pub question: &'a str,
    pub gold: &'a str,
    pub predicted: &'a str,
}

/// Analyzer output before the engine attaches ownership and provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Analysis {
    pub analysis: String,
    pub guidance: String,
}

#[derive(Clone, Copy, Debug)]
pub struct GenerationRequest<'a> {
    pub parent_a: &'a Prompt,
    pub parent_b: &'a Prompt,
    pub feedback_a: Option<&'a Feedback>,
    pub feedback_b: Option<&'a Feedback>,
    pub mode: MutationMode,
    /// Drawn from the engine RNG for every attempt. Stochastic backends may
    /// ignore it; scripted ones use it in place of sampling temperature.
    pub variation: u64,
}

pub trait Predictor: Send + Sync {
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError>;
}

pub trait Analyzer: Send + Sync {
    fn analyze(&self, prompt_text: &str, cases: &[ErrorCase<'_>]) -> Result<Analysis, AgentError>;
}

pub trait Generator: Send + Sync {
    /// Returns the child prompt text.
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, AgentError>;
}

impl<T: Predictor + ?Sized> Predictor for &T {
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError> {
        (**self).predict(prompt_text, question)
    }
}

impl<T: Analyzer + ?Sized> Analyzer for &T {
    fn analyze(&self, prompt_text: &str, cases: &[ErrorCase<'_>]) -> Result<Analysis, AgentError> {
        (**self).analyze(prompt_text, cases)
    }
}

impl<T: Generator + ?Sized> Generator for &T {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, AgentError> {
        (**self).generate(request)
    }
}

/// Borrowed bundle of the three roles.
#[derive(Clone, Copy)]
pub struct Agents<'a> {
    pub predictor: &'a dyn Predictor,
    pub analyzer: &'a dyn Analyzer,
    pub generator: &'a dyn Generator,
}
