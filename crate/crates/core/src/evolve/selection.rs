//! Fitness-proportional (roulette wheel) parent selection.

use rand::Rng;

use super::EvolveError;
use crate::types::Population;

/// Redraws allowed for the second parent before falling back to the best distinct member.
pub const MAX_REDRAWS: usize = 100;

/// `f_k / Σ f`, or uniform when every fitness is zero.
pub fn selection_probabilities(fitness: &[f64]) -> Result<Vec<f64>, EvolveError> {
    if fitness.is_empty() {
        return Err(EvolveError::EmptyPopulation);
    }
    if let Some((i, &f)) = fitness.iter().enumerate().find(|(_, f)| f.is_nan() || **f < 0.0) {
        return Err(EvolveError::NegativeFitness(f, i));
    }
    let total: f64 = fitness.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / fitness.len() as f64; fitness.len()]);
    }
    Ok(fitness.iter().map(|f| f / total).collect())
}

/// One spin of the wheel.
pub fn roulette_draw<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Two distinct member positions drawn by roulette.
///
/// The second draw repeats until it differs from the first, at most
/// [`MAX_REDRAWS`] times; after that the highest-fitness member other than
/// the first parent is taken.
pub fn select_parents<R: Rng + ?Sized>(pop: &Population, rng: &mut R) -> Result<(usize, usize), EvolveError> {
    if pop.members.len() < 2 {
        return Err(EvolveError::TooFewMembers(pop.members.len()));
    }
    let scores = pop
        .members
        .iter()
        .map(|m| m.score().ok_or_else(|| EvolveError::Unevaluated(m.prompt.id.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let fitness: Vec<f64> = scores.iter().map(|s| s.value()).collect();
    let probs = selection_probabilities(&fitness)?;

    let i = roulette_draw(&probs, rng);
    for _ in 0..MAX_REDRAWS {
        let j = roulette_draw(&probs, rng);
        if j != i {
            return Ok((i, j));
        }
    }
    let j = (0..scores.len())
        .filter(|&j| j != i)
        .max_by(|&a, &b| scores[a].cmp(&scores[b]).then(b.cmp(&a)))
        .expect("at least two members");
    Ok((i, j))
}
