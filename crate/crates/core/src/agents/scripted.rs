//! Deterministic agent backends built from closures, for tests and simulations.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{AgentError, Analysis, Analyzer, ErrorCase, GenerationRequest, Generator, Predictor};

pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&str, &str) -> Result<String, AgentError> + Send + Sync,
{
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError> {
        (self.0)(prompt_text, question)
    }
}

pub struct FnAnalyzer<F>(pub F);

impl<F> Analyzer for FnAnalyzer<F>
where
    F: Fn(&str, &[ErrorCase<'_>]) -> Result<Analysis, AgentError> + Send + Sync,
{
    fn analyze(&self, prompt_text: &str, cases: &[ErrorCase<'_>]) -> Result<Analysis, AgentError> {
        (self.0)(prompt_text, cases)
    }
}

pub struct FnGenerator<F>(pub F);

impl<F> Generator for FnGenerator<F>
where
    F: Fn(&GenerationRequest<'_>) -> Result<String, AgentError> + Send + Sync,
{
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, AgentError> {
        (self.0)(request)
    }
}

/// Wraps a predictor and counts calls per prompt text.
pub struct CountingPredictor<P> {
    inner: P,
    calls: Mutex<HashMap<String, usize>>,
}

impl<P: Predictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: Mutex::new(HashMap::new()) }
    }

    pub fn calls_for(&self, prompt_text: &str) -> usize {
        self.calls.lock().unwrap().get(prompt_text).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }

    pub fn per_prompt(&self) -> HashMap<String, usize> {
        self.calls.lock().unwrap().clone()
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError> {
        *self.calls.lock().unwrap().entry(prompt_text.to_string()).or_default() += 1;
        self.inner.predict(prompt_text, question)
    }
}
