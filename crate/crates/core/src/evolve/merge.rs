//! Elitist survivor selection.

use std::cmp::Ordering;

use super::EvolveError;
use crate::types::{Member, Population};

/// Survivor order: higher score first, then earlier generation, then lower id.
/// Incumbents therefore win ties against their children.
pub fn rank_members(a: &Member, b: &Member) -> Ordering {
    b.score()
        .cmp(&a.score())
        .then(a.prompt.generation.cmp(&b.prompt.generation))
        .then_with(|| a.prompt.id.cmp(&b.prompt.id))
}

fn require_evaluated(members: &[Member]) -> Result<(), EvolveError> {
    match members.iter().find(|m| m.fitness.is_none()) {
        Some(m) => Err(EvolveError::Unevaluated(m.prompt.id.to_string())),
        None => Ok(()),
    }
}

/// Keeps the `capacity` best members without advancing the iteration.
pub fn retain_top_k(mut pop: Population) -> Result<Population, EvolveError> {
    require_evaluated(&pop.members)?;
    pop.members.sort_by(rank_members);
    pop.members.truncate(pop.capacity);
    Ok(pop)
}

/// Top-`k` of the current members and the evaluated children; advances the iteration.
pub fn elitist_merge(current: Population, children: Vec<Member>, k: usize) -> Result<Population, EvolveError> {
    require_evaluated(&children)?;
    let iteration = current.iteration + 1;
    let mut members = current.members;
    members.extend(children);
    let mut merged = retain_top_k(Population { members, capacity: k, iteration })?;
    merged.iteration = iteration;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FitnessRecord, PredictionOutcome, Prompt, PromptId};

    fn member(n: u64, generation: u32, correct: u32) -> Member {
        let id = PromptId::from_counter(n);
        let outcomes = (0..10)
            .map(|i| PredictionOutcome {
                sample_id: i,
                predicted_answer: String::new(),
                extracted_answer: String::new(),
                correct: (i as u32) < correct,
            })
            .collect();
        let prompt = Prompt { id: id.clone(), text: format!("p{n}"), generation, parent_ids: vec![] };
        Member::evaluated(prompt, FitnessRecord::from_outcomes(id, outcomes, generation))
    }

    fn scores(p: &Population) -> Vec<u32> {
        p.members.iter().map(|m| m.score().unwrap().correct).collect()
    }

    #[test]
    fn keeps_best_of_union() {
        let cur = Population::new(vec![member(0, 0, 9), member(1, 0, 5)], 2);
        let merged = elitist_merge(cur, vec![member(2, 1, 7), member(3, 1, 6)], 2).unwrap();
        assert_eq!(scores(&merged), vec![9, 7]);
        assert_eq!(merged.iteration, 1);
    }

    #[test]
    fn worse_children_leave_population_unchanged() {
        let cur = Population::new(vec![member(0, 0, 9), member(1, 0, 8)], 2);
        let before = cur.clone();
        let merged = elitist_merge(cur, vec![member(2, 1, 1), member(3, 1, 2)], 2).unwrap();
        assert_eq!(merged.members, before.members);
        assert_eq!(merged.iteration, before.iteration + 1);
    }

    #[test]
    fn incumbent_wins_tie_at_cutoff() {
        let cur = Population::new(vec![member(0, 0, 9), member(1, 0, 5)], 2);
        let merged = elitist_merge(cur, vec![member(2, 1, 5)], 2).unwrap();
        let ids: Vec<_> = merged.members.iter().map(|m| m.prompt.id.clone()).collect();
        assert_eq!(ids, vec![PromptId::from_counter(0), PromptId::from_counter(1)]);
    }

    #[test]
    fn unevaluated_child_is_rejected() {
        let cur = Population::new(vec![member(0, 0, 9), member(1, 0, 5)], 2);
        let mut child = member(2, 1, 3);
        child.fitness = None;
        assert!(elitist_merge(cur, vec![child], 2).is_err());
    }

    #[test]
    fn retain_trims_oversized_seed_sets() {
        let pop = Population::new((0..6).map(|n| member(n, 0, n as u32)).collect(), 4);
        let kept = retain_top_k(pop).unwrap();
        assert_eq!(scores(&kept), vec![5, 4, 3, 2]);
        assert_eq!(kept.iteration, 0);
    }
}
