//! Prompt optimization by guided genetic search.
//!
//! A population of instruction prompts is scored on a QA training set by a
//! predictor model. Wrong answers are clustered by topic, the dominant
//! cluster is summarized into improvement guidance by an analyzer model, and
//! a generator model breeds new prompts from roulette-selected parents and
//! their guidance. The best `K` prompts survive each round.

pub mod agents;
pub mod datasets;
pub mod eval;
pub mod evolve;
pub mod keyword_world;
pub mod topics;
pub mod types;

pub use agents::{AgentError, Agents, Analyzer, Generator, MutationMode, Predictor};
pub use datasets::{load_dataset, split_holdout, Dataset, Split};
pub use eval::{extract_answer, score_prompt, wrong_samples, EvalOptions, ScoreCache};
pub use evolve::{Engine, EvolveConfig, EvolveError, FeedbackMode, HistoryEntry, RunOutcome, RunPaths, RunState};
pub use topics::{EmbedField, EmbeddingProvider, HashEmbedder};
pub use types::{
    validate_population, Feedback, FitnessRecord, Member, Population, PredictionOutcome, Prompt, PromptId, Sample,
    Score, TaskKind, Violation,
};

/// Generic starting instructions shipped with the crate.
pub fn builtin_seeds() -> Vec<String> {
    include_str!("../templates/seeds.txt").lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()
}
