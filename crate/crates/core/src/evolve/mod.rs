//! The genetic search over prompts.

mod engine;
mod generation;
mod merge;
mod selection;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentError, MutationMode};
use crate::eval::EvalError;
use crate::topics::{EmbedError, EmbedField};
use crate::types::TypeError;

pub use engine::{
    load_checkpoint, latest_checkpoint, read_history_csv, write_history_csv, Checkpoint, Engine, HistoryEntry,
    RunOutcome, RunPaths, RunState,
};
pub use generation::{generate_children, IdAllocator};
pub use merge::{elitist_merge, rank_members, retain_top_k};
pub use selection::{roulette_draw, select_parents, selection_probabilities};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("negative fitness {0} at position {1}")]
    NegativeFitness(f64, usize),
    #[error("cannot select from an empty population")]
    EmptyPopulation,
    #[error("population needs at least 2 members to select parents, has {0}")]
    TooFewMembers(usize),
    #[error("member {0} has not been evaluated")]
    Unevaluated(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("run aborted during iteration {iteration}; resume from {checkpoint}: {source}")]
    Aborted { iteration: u32, checkpoint: String, source: Box<EvolveError> },
}

/// How wrong predictions are picked for the analyzer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Cluster error embeddings and analyze the largest cluster.
    Topic,
    /// Analyze a uniform random subset of the errors.
    RandomSample,
    /// Collect no feedback at all.
    None,
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackMode::Topic => "topic",
            FeedbackMode::RandomSample => "random_sample",
            FeedbackMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    pub population_size: usize,
    pub max_iterations: u32,
    pub selection_seed: u64,
    pub feedback_mode: FeedbackMode,
    pub mutation_mode: MutationMode,
    pub num_clusters: usize,
    pub max_feedback_samples: usize,
    pub child_retry_budget: u32,
    pub embed_field: EmbedField,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            population_size: 4,
            max_iterations: 20,
            selection_seed: 0,
            feedback_mode: FeedbackMode::Topic,
            mutation_mode: MutationMode::Guided,
            num_clusters: 3,
            max_feedback_samples: 5,
            child_retry_budget: 3,
            embed_field: EmbedField::Gold,
        }
    }
}

impl EvolveConfig {
    /// Checks bounds and applies the rule that running without feedback implies random mutation.
    pub fn validated(mut self) -> Result<Self, EvolveError> {
        if self.population_size < 2 {
            return Err(EvolveError::Config(format!("population_size must be at least 2, got {}", self.population_size)));
        }
        if self.max_iterations < 1 {
            return Err(EvolveError::Config("max_iterations must be at least 1".into()));
        }
        if self.num_clusters < 1 {
            return Err(EvolveError::Config("num_clusters must be at least 1".into()));
        }
        if self.max_feedback_samples < 1 {
            return Err(EvolveError::Config("max_feedback_samples must be at least 1".into()));
        }
        if self.feedback_mode == FeedbackMode::None && self.mutation_mode != MutationMode::RandomMutation {
            tracing::info!("feedback_mode=none: switching mutation_mode to random_mutation");
            self.mutation_mode = MutationMode::RandomMutation;
        }
        Ok(self)
    }

    /// Hash of every setting that shapes the search; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::datasets::hex(&Sha256::digest(&json)[..16])
    }
}
