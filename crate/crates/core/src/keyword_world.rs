//! A synthetic task with a known optimum, used to exercise the optimizer
//! end to end without a language model.
//!
//! Every sample requires one of eight hidden keywords. The predictor answers
//! a sample correctly exactly when the prompt mentions that sample's
//! keyword, so a prompt naming all eight scores 1.0. The analyzer names a
//! keyword only when a strict majority of the error cases it is shown share
//! one; mixed error sets yield generic advice. The generator unions the
//! parents' keywords and adds the keywords named in their feedback, or a
//! random vocabulary word when no feedback names one (which is also what
//! random mutation does).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    AgentError, Agents, Analysis, Analyzer, ErrorCase, GenerationRequest, Generator, MutationMode, Predictor,
};
use crate::datasets::{Dataset, Split};
use crate::eval::ScoreCache;
use crate::evolve::{Engine, EvolveConfig, EvolveError, HistoryEntry, RunOutcome};
use crate::topics::HashEmbedder;
use crate::types::{Sample, TaskKind};

/// The first [`HIDDEN_KEYWORDS`] entries are required by samples; the rest are decoys.
pub const VOCABULARY: [&str; 24] = [
    "amber", "basil", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kelp", "lagoon",
    "mesa", "nectar", "onyx", "prairie", "quartz", "russet", "saffron", "tundra", "umber", "violet", "willow", "zephyr",
];
pub const HIDDEN_KEYWORDS: usize = 8;
pub const DEFAULT_SAMPLES: usize = 40;

const FOCUS: &str = " Focus on:";
const UNSURE: &str = "unsure";

/// Vocabulary indices mentioned in `text`, ascending.
pub fn keywords_in(text: &str) -> Vec<usize> {
    let mut found: Vec<usize> = text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter_map(|tok| VOCABULARY.iter().position(|w| w.eq_ignore_ascii_case(tok)))
        .collect();
    found.sort_unstable();
    found.dedup();
    found
}

/// `n` samples, each requiring a uniformly drawn hidden keyword.
pub fn dataset(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let kw = VOCABULARY[rng.random_range(0..HIDDEN_KEYWORDS)];
            let question = format!("Riddle {i}: which word completes the {kw} pattern?");
            Sample::new(i as u64, question, kw, TaskKind::FreeText).expect("non-empty sample")
        })
        .collect();
    Dataset::new(format!("keyword_world_{seed}"), samples, Split::Train).expect("unique ids")
}

/// Generic seed instructions; none mention a vocabulary word.
pub fn seed_prompts() -> Vec<String> {
    crate::builtin_seeds()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn render(base: &str, keywords: &[usize]) -> String {
    let words: Vec<&str> = keywords.iter().map(|&k| VOCABULARY[k]).collect();
    format!("{base}{FOCUS} {}.", words.join(", "))
}

fn base_of(text: &str) -> &str {
    text.split_once(FOCUS).map_or(text, |(b, _)| b).trim()
}

pub struct WorldPredictor;

impl Predictor for WorldPredictor {
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError> {
        let Some(&required) = keywords_in(question).first() else {
            return Ok(UNSURE.into());
        };
        Ok(if keywords_in(prompt_text).contains(&required) { VOCABULARY[required].into() } else { UNSURE.into() })
    }
}

pub struct WorldAnalyzer;

impl Analyzer for WorldAnalyzer {
    fn analyze(&self, _prompt_text: &str, cases: &[ErrorCase<'_>]) -> Result<Analysis, AgentError> {
        let mut counts = [0usize; VOCABULARY.len()];
        for c in cases {
            for k in keywords_in(c.gold) {
                counts[k] += 1;
            }
        }
        let (top, n) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, &n)| (k, n))
            .unwrap_or((0, 0));
        if n * 2 > cases.len() {
            let kw = VOCABULARY[top];
            Ok(Analysis {
                analysis: format!("{n} of {} errors concern the {kw} pattern.", cases.len()),
                guidance: format!("Always account for the {kw} pattern."),
            })
        } else {
            Ok(Analysis {
                analysis: "The errors have no common theme.".into(),
                guidance: "Read each question more carefully.".into(),
            })
        }
    }
}

pub struct WorldGenerator;

impl Generator for WorldGenerator {
    fn generate(&self, r: &GenerationRequest<'_>) -> Result<String, AgentError> {
        let mut kws = keywords_in(&r.parent_a.text);
        kws.extend(keywords_in(&r.parent_b.text));
        let named: Vec<usize> = match r.mode {
            MutationMode::Guided => [r.feedback_a, r.feedback_b]
                .into_iter()
                .flatten()
                .flat_map(|f| keywords_in(&f.guidance))
                .collect(),
            MutationMode::RandomMutation => Vec::new(),
        };
        if named.is_empty() {
            kws.push((splitmix(r.variation) % VOCABULARY.len() as u64) as usize);
        } else {
            kws.extend(named);
        }
        kws.sort_unstable();
        kws.dedup();
        Ok(render(base_of(&r.parent_a.text), &kws))
    }
}

/// Runs the optimizer on `dataset(data_seed, DEFAULT_SAMPLES)` with the world's agents.
pub fn run(cfg: EvolveConfig, data_seed: u64) -> Result<RunOutcome, EvolveError> {
    let train = dataset(data_seed, DEFAULT_SAMPLES);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let agents = Agents { predictor: &WorldPredictor, analyzer: &WorldAnalyzer, generator: &WorldGenerator };
    let engine = Engine::new(cfg, agents, &embedder, &train, &cache)?;
    engine.run(&seed_prompts())
}

/// First iteration whose best member scores 1.0.
pub fn iterations_to_optimum(history: &[HistoryEntry]) -> Option<u32> {
    history.iter().find(|e| e.best_score.is_perfect()).map(|e| e.iteration)
}
