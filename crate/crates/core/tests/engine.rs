use std::sync::atomic::{AtomicU32, Ordering};

use greentea_core::agents::scripted::{CountingPredictor, FnAnalyzer, FnGenerator};
use greentea_core::agents::{AgentError, Analysis, ErrorCase, GenerationRequest, Generator};
use greentea_core::evolve::{
    latest_checkpoint, load_checkpoint, read_history_csv, Engine, EvolveConfig, EvolveError, FeedbackMode, RunPaths,
};
use greentea_core::keyword_world::{self, iterations_to_optimum, WorldAnalyzer, WorldGenerator, WorldPredictor};
use greentea_core::{validate_population, Agents, EvalOptions, HashEmbedder, MutationMode, ScoreCache};

fn cfg(max_iterations: u32, seed: u64) -> EvolveConfig {
    EvolveConfig { max_iterations, selection_seed: seed, ..Default::default() }
}

fn world_agents<'a>() -> Agents<'a> {
    Agents { predictor: &WorldPredictor, analyzer: &WorldAnalyzer, generator: &WorldGenerator }
}

#[test]
fn single_iteration_records_two_history_entries() {
    let out = keyword_world::run(cfg(1, 0), 0).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.history[0].iteration, 0);
    assert_eq!(out.history[1].iteration, 1);
    assert_eq!(out.population.iteration, 1);
    assert_eq!(out.population.len(), 4);
}

#[test]
fn runs_are_deterministic() {
    let a = keyword_world::run(cfg(8, 3), 3).unwrap();
    let b = keyword_world::run(cfg(8, 3), 3).unwrap();
    assert_eq!(a, b);
    let c = keyword_world::run(cfg(8, 4), 3).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_score_never_decreases_and_population_stays_valid() {
    for mode in [FeedbackMode::Topic, FeedbackMode::RandomSample, FeedbackMode::None] {
        let c = EvolveConfig { feedback_mode: mode, ..cfg(12, 1) };
        let out = keyword_world::run(c, 1).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1].best_score >= w[0].best_score, "{mode}: {:?}", out.history);
        }
        assert_eq!(validate_population(&out.population), vec![]);
    }
}

#[test]
fn topic_feedback_reaches_the_optimum() {
    let out = keyword_world::run(cfg(20, 0), 0).unwrap();
    let t = iterations_to_optimum(&out.history).expect("optimum reached");
    assert!(t <= 15);
    assert!(out.population.best().unwrap().score().unwrap().is_perfect());
}

#[test]
fn feedback_is_attached_to_surviving_imperfect_members() {
    let train = keyword_world::dataset(2, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let engine = Engine::new(cfg(3, 2), world_agents(), &embedder, &train, &cache).unwrap();
    let mut state = engine.initialize(&keyword_world::seed_prompts()).unwrap();
    engine.step(&mut state).unwrap();
    // Feedback is collected at the start of a step for the members that entered it.
    let before: Vec<_> = state.population.members.iter().map(|m| m.prompt.id.clone()).collect();
    engine.step(&mut state).unwrap();
    for id in before {
        let m = &state.archive[&id];
        if !m.score().unwrap().is_perfect() {
            let fb = m.feedback.as_ref().expect("feedback");
            assert_eq!(fb.prompt_id, id);
            assert!(!fb.guidance.is_empty());
            assert!(!fb.source_sample_ids.is_empty() && fb.source_sample_ids.len() <= 5);
            assert!(fb.source_cluster_size >= fb.source_sample_ids.len());
        }
    }
}

#[test]
fn no_feedback_mode_never_calls_the_analyzer() {
    let train = keyword_world::dataset(0, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let analyzer =
        FnAnalyzer(|_: &str, _: &[ErrorCase<'_>]| -> Result<Analysis, AgentError> { panic!("analyzer called") });
    let agents = Agents { predictor: &WorldPredictor, analyzer: &analyzer, generator: &WorldGenerator };
    let c = EvolveConfig { feedback_mode: FeedbackMode::None, mutation_mode: MutationMode::Guided, ..cfg(4, 0) };
    let engine = Engine::new(c, agents, &embedder, &train, &cache).unwrap();
    assert_eq!(engine.config().mutation_mode, MutationMode::RandomMutation);
    let out = engine.run(&keyword_world::seed_prompts()).unwrap();
    assert!(out.population.members.iter().all(|m| m.feedback.is_none()));
}

#[test]
fn each_prompt_text_is_predicted_at_most_once_per_sample() {
    let train = keyword_world::dataset(5, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let predictor = CountingPredictor::new(WorldPredictor);
    let agents = Agents { predictor: &predictor, analyzer: &WorldAnalyzer, generator: &WorldGenerator };
    let engine = Engine::new(cfg(10, 5), agents, &embedder, &train, &cache)
        .unwrap()
        .with_eval_options(EvalOptions { parallelism: 4, ..Default::default() });
    engine.run(&keyword_world::seed_prompts()).unwrap();
    let counts = predictor.per_prompt();
    assert!(!counts.is_empty());
    for (text, n) in counts {
        assert!(n <= train.len(), "{text:?} predicted {n} times");
    }
}

#[test]
fn parallel_evaluation_matches_sequential() {
    let train = keyword_world::dataset(6, 40);
    let embedder = HashEmbedder::default();
    let run = |parallelism| {
        let cache = ScoreCache::in_memory();
        let engine = Engine::new(cfg(6, 6), world_agents(), &embedder, &train, &cache)
            .unwrap()
            .with_eval_options(EvalOptions { parallelism, ..Default::default() });
        engine.run(&keyword_world::seed_prompts()).unwrap()
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn too_few_seeds_is_a_config_error() {
    let train = keyword_world::dataset(0, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let engine = Engine::new(cfg(2, 0), world_agents(), &embedder, &train, &cache).unwrap();
    let err = engine.run(&["only one".to_string()]).unwrap_err();
    assert!(matches!(err, EvolveError::Config(_)));
}

#[test]
fn extra_seeds_are_trimmed_to_capacity() {
    let train = keyword_world::dataset(0, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let engine = Engine::new(cfg(1, 0), world_agents(), &embedder, &train, &cache).unwrap();
    let out = engine.run(&keyword_world::seed_prompts()).unwrap();
    assert_eq!(out.population.len(), 4);
    assert_eq!(out.history[1].members.len(), 4);
}

/// Delegates to the world generator until the watched iteration is reached.
struct FailingAt<'a> {
    current: &'a AtomicU32,
    fail_from: u32,
}

impl Generator for FailingAt<'_> {
    fn generate(&self, r: &GenerationRequest<'_>) -> Result<String, AgentError> {
        if self.current.load(Ordering::SeqCst) + 1 >= self.fail_from {
            return Err(AgentError::Transport("connection reset".into()));
        }
        WorldGenerator.generate(r)
    }
}

#[test]
fn killed_run_resumes_to_the_same_result() {
    let train = keyword_world::dataset(7, 40);
    let embedder = HashEmbedder::default();
    let seeds = keyword_world::seed_prompts();

    let reference_dir = tempfile::tempdir().unwrap();
    let cache = ScoreCache::open(&RunPaths::new(reference_dir.path()).scores()).unwrap();
    let reference = Engine::new(cfg(8, 7), world_agents(), &embedder, &train, &cache)
        .unwrap()
        .with_run_dir(reference_dir.path())
        .run(&seeds)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let current = AtomicU32::new(0);
    let failing = FailingAt { current: &current, fail_from: 4 };
    {
        let cache = ScoreCache::open(&paths.scores()).unwrap();
        let agents = Agents { predictor: &WorldPredictor, analyzer: &WorldAnalyzer, generator: &failing };
        let err = Engine::new(cfg(8, 7), agents, &embedder, &train, &cache)
            .unwrap()
            .with_run_dir(dir.path())
            .on_iteration(|e| current.store(e.iteration, Ordering::SeqCst))
            .run(&seeds)
            .unwrap_err();
        match err {
            EvolveError::Aborted { iteration, checkpoint, .. } => {
                assert_eq!(iteration, 4);
                assert!(checkpoint.ends_with("iter_3.json"), "{checkpoint}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(latest_checkpoint(&paths).unwrap().unwrap().0, 3);

    let predictor = CountingPredictor::new(WorldPredictor);
    let cache = ScoreCache::open(&paths.scores()).unwrap();
    assert!(!cache.is_empty());
    let agents = Agents { predictor: &predictor, analyzer: &WorldAnalyzer, generator: &WorldGenerator };
    let resumed =
        Engine::new(cfg(8, 7), agents, &embedder, &train, &cache).unwrap().with_run_dir(dir.path()).resume().unwrap();
    assert_eq!(resumed, reference);

    let a = std::fs::read_to_string(paths.history()).unwrap();
    let b = std::fs::read_to_string(RunPaths::new(reference_dir.path()).history()).unwrap();
    assert_eq!(a, b);
    // Prompts scored before the crash come from the persisted cache.
    let restored = load_checkpoint(&paths.iteration_file(3)).unwrap();
    for m in &restored.state.population.members {
        assert_eq!(predictor.calls_for(&m.prompt.text), 0);
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let train = keyword_world::dataset(0, 40);
    let embedder = HashEmbedder::default();
    let dir = tempfile::tempdir().unwrap();
    let cache = ScoreCache::in_memory();
    Engine::new(cfg(2, 0), world_agents(), &embedder, &train, &cache)
        .unwrap()
        .with_run_dir(dir.path())
        .run(&keyword_world::seed_prompts())
        .unwrap();
    let other = Engine::new(cfg(2, 1), world_agents(), &embedder, &train, &cache).unwrap().with_run_dir(dir.path());
    assert!(matches!(other.resume(), Err(EvolveError::Checkpoint { .. })));
}

#[test]
fn history_csv_has_one_row_per_member_per_iteration() {
    let train = keyword_world::dataset(1, 40);
    let embedder = HashEmbedder::default();
    let dir = tempfile::tempdir().unwrap();
    let cache = ScoreCache::in_memory();
    let out = Engine::new(cfg(3, 1), world_agents(), &embedder, &train, &cache)
        .unwrap()
        .with_run_dir(dir.path())
        .run(&keyword_world::seed_prompts())
        .unwrap();
    let rows = read_history_csv(&std::fs::read_to_string(RunPaths::new(dir.path()).history()).unwrap()).unwrap();
    assert_eq!(rows.len(), 4 * 4);
    let iterations: std::collections::BTreeSet<u32> = rows.iter().map(|r| r.0).collect();
    assert_eq!(iterations.len(), out.history.len());
    for (row, m) in rows.iter().rev().take(4).rev().zip(&out.population.members) {
        assert_eq!(row.2, m.prompt.id);
        assert_eq!(Some(row.3), m.score());
    }
}

#[test]
fn lineage_walks_back_to_seeds() {
    let train = keyword_world::dataset(0, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let engine = Engine::new(cfg(5, 0), world_agents(), &embedder, &train, &cache).unwrap();
    let mut state = engine.initialize(&keyword_world::seed_prompts()).unwrap();
    for _ in 0..5 {
        engine.step(&mut state).unwrap();
    }
    let best = state.population.best().unwrap().prompt.id.clone();
    let lineage = state.lineage(&best);
    assert_eq!(lineage[0].prompt.id, best);
    assert!(lineage.iter().any(|m| m.prompt.is_seed()));
}

#[test]
fn generator_errors_abort_without_a_run_dir() {
    let train = keyword_world::dataset(0, 40);
    let cache = ScoreCache::in_memory();
    let embedder = HashEmbedder::default();
    let broken = FnGenerator(|_: &GenerationRequest<'_>| Err(AgentError::EmptyOutput));
    let agents = Agents { predictor: &WorldPredictor, analyzer: &WorldAnalyzer, generator: &broken };
    let err = Engine::new(cfg(3, 0), agents, &embedder, &train, &cache).unwrap().run(&keyword_world::seed_prompts());
    assert!(matches!(err, Err(EvolveError::Aborted { iteration: 1, .. })));
}
