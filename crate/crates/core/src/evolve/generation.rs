//! Child prompt generation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{select_parents, EvolveConfig, EvolveError};
use crate::agents::{GenerationRequest, Generator, MutationMode};
use crate::types::{Population, Prompt, PromptId};

/// Hands out sequential prompt ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn allocate(&mut self) -> PromptId {
        let id = PromptId::from_counter(self.next);
        self.next += 1;
        id
    }
}

/// Produces `population_size` children of the current population.
///
/// A child whose text duplicates a member or an earlier child is regenerated
/// with a fresh variation, up to `child_retry_budget` times, then kept as is.
/// Feedback is passed only in guided mode.
pub fn generate_children<G: Generator + ?Sized, R: RngCore + ?Sized>(
    pop: &Population,
    generator: &G,
    cfg: &EvolveConfig,
    rng: &mut R,
    ids: &mut IdAllocator,
) -> Result<Vec<Prompt>, EvolveError> {
    let mut children: Vec<Prompt> = Vec::with_capacity(cfg.population_size);
    let generation = pop.iteration + 1;
    let guided = cfg.mutation_mode == MutationMode::Guided && cfg.feedback_mode != super::FeedbackMode::None;
    for _ in 0..cfg.population_size {
        let (i, j) = select_parents(pop, rng)?;
        let (a, b) = (&pop.members[i], &pop.members[j]);
        let mut attempt = 0;
        let text = loop {
            let request = GenerationRequest {
                parent_a: &a.prompt,
                parent_b: &b.prompt,
                feedback_a: if guided { a.feedback.as_ref() } else { None },
                feedback_b: if guided { b.feedback.as_ref() } else { None },
                mode: cfg.mutation_mode,
                variation: rng.next_u64(),
            };
            let text = generator.generate(&request)?;
            let duplicate = pop.contains_text(&text) || children.iter().any(|c| c.text == text);
            if !duplicate || attempt >= cfg.child_retry_budget {
                if duplicate {
                    tracing::debug!("keeping duplicate child after {attempt} retries");
                }
                break text;
            }
            attempt += 1;
        };
        let generation = generation.max(a.prompt.generation.max(b.prompt.generation) + 1);
        children.push(Prompt::child(ids.allocate(), text, generation, (&a.prompt, &b.prompt))?);
    }
    Ok(children)
}
