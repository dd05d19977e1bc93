//! Subcommand implementations. Each returns a [`CliError`] that maps to an exit code.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use greentea_core::agents::http::HttpEmbedder;
use greentea_core::agents::{HttpAnalyzer, HttpBackend, HttpGenerator, HttpPredictor, Templates};
use greentea_core::datasets::{load_dataset, split_holdout, Dataset, Split};
use greentea_core::evolve::{latest_checkpoint, load_checkpoint, Engine, EvolveError, HistoryEntry, RunPaths};
use greentea_core::keyword_world::{self, WorldAnalyzer, WorldGenerator, WorldPredictor};
use greentea_core::{
    builtin_seeds, score_prompt, Agents, Analyzer, EmbeddingProvider, EvalOptions, Generator, HashEmbedder, Predictor,
    Prompt, PromptId, ScoreCache,
};

use crate::config::{Backend, ConfigError, EmbeddingProviderKind, RunConfig, RUN_CONFIG_FILE};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, missing input or unknown id: exit code 2.
    Usage(String),
    /// The run or evaluation failed: exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

fn failed(e: impl fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Training and optional test split described by the data section.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let d = &cfg.data;
    let full = match &d.path {
        Some(p) => load_dataset(p, d.task_kind, Split::Train).map_err(usage)?,
        None => keyword_world::dataset(d.seed, keyword_world::DEFAULT_SAMPLES),
    };
    if let Some(p) = &d.test_path {
        let test = load_dataset(p, d.task_kind, Split::Test).map_err(usage)?;
        return Ok((full, Some(test)));
    }
    if d.holdout > 0.0 {
        let (train, test) = split_holdout(&full, d.holdout, d.seed).map_err(usage)?;
        return Ok((train, Some(test)));
    }
    Ok((full, None))
}

fn load_seeds(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let seeds = match &cfg.run.seeds_file {
        Some(p) => read_lines(p)?,
        None if !cfg.run.seeds.is_empty() => cfg.run.seeds.clone(),
        None => builtin_seeds(),
    };
    Ok(seeds)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Owned agents and embedder for one command.
pub struct Toolkit {
    predictor: Box<dyn Predictor>,
    analyzer: Box<dyn Analyzer>,
    generator: Box<dyn Generator>,
    embedder: Box<dyn EmbeddingProvider>,
}

impl Toolkit {
    pub fn build(cfg: &RunConfig, train: &Dataset) -> Result<Self, CliError> {
        let backend = HttpBackend::new(cfg.run.max_in_flight).map_err(usage)?;
        let embedder: Box<dyn EmbeddingProvider> = match cfg.embedding.provider {
            EmbeddingProviderKind::Hash => Box::new(HashEmbedder { dim: cfg.embedding.dim }),
            EmbeddingProviderKind::Http => {
                Box::new(HttpEmbedder { backend: backend.clone(), config: cfg.embedding.http.clone() })
            }
        };
        let kit = match cfg.agents.backend {
            Backend::KeywordWorld => Toolkit {
                predictor: Box::new(WorldPredictor),
                analyzer: Box::new(WorldAnalyzer),
                generator: Box::new(WorldGenerator),
                embedder,
            },
            Backend::Http => {
                let templates = Arc::new(match &cfg.run.templates_dir {
                    Some(dir) => Templates::load_dir(dir).map_err(usage)?,
                    None => Templates::default(),
                });
                let a = &cfg.agents;
                Toolkit {
                    predictor: Box::new(HttpPredictor {
                        backend: backend.clone(),
                        config: a.predictor.clone(),
                        templates: Arc::clone(&templates),
                        task_kind: train.task_kind().unwrap_or(cfg.data.task_kind),
                    }),
                    analyzer: Box::new(HttpAnalyzer {
                        backend: backend.clone(),
                        config: a.analyzer.clone(),
                        templates: Arc::clone(&templates),
                    }),
                    generator: Box::new(HttpGenerator { backend, config: a.generator.clone(), templates }),
                    embedder,
                }
            }
        };
        Ok(kit)
    }

    pub fn agents(&self) -> Agents<'_> {
        Agents { predictor: &*self.predictor, analyzer: &*self.analyzer, generator: &*self.generator }
    }
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { parallelism: cfg.run.parallelism, ..Default::default() }
}

fn print_entry(e: &HistoryEntry) {
    println!("iteration {:>3}  best {:.4}  mean {:.4}", e.iteration, e.best_score.value(), e.mean_score);
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Starts a fresh run in `run.checkpoint_dir`.
pub fn optimize(mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    for p in [&mut cfg.data.path, &mut cfg.data.test_path, &mut cfg.run.seeds_file, &mut cfg.run.templates_dir]
        .into_iter()
        .flatten()
    {
        *p = absolute(p);
    }
    let (train, test) = load_splits(&cfg)?;
    let seeds = load_seeds(&cfg)?;
    let kit = Toolkit::build(&cfg, &train)?;
    let paths = RunPaths::new(&cfg.run.checkpoint_dir);
    if latest_checkpoint(&paths).map_err(failed)?.is_some() {
        return Err(usage(format!(
            "{} already holds a run; use `greentea resume {}` or choose another --checkpoint-dir",
            paths.root.display(),
            paths.root.display()
        )));
    }
    fs::create_dir_all(&paths.root).map_err(|e| usage(format!("cannot create {}: {e}", paths.root.display())))?;
    let saved = paths.root.join(RUN_CONFIG_FILE);
    fs::write(&saved, cfg.render()).map_err(|e| failed(format!("cannot write {}: {e}", saved.display())))?;

    let cache = ScoreCache::open(&paths.scores()).map_err(failed)?;
    let engine = Engine::new(cfg.evolve.clone(), kit.agents(), &*kit.embedder, &train, &cache)
        .map_err(usage)?
        .with_eval_options(eval_options(&cfg))
        .with_run_dir(&paths.root)
        .on_iteration(print_entry);
    let outcome = engine.run(&seeds).map_err(run_error)?;
    report(&outcome.population, &kit, test.as_ref(), &cfg)?;
    println!("history written to {}", paths.history().display());
    Ok(())
}

/// Continues the run stored in `dir` from its newest checkpoint.
pub fn resume(dir: &Path) -> Result<(), CliError> {
    let saved = dir.join(RUN_CONFIG_FILE);
    if !saved.is_file() {
        return Err(usage(format!("{} not found; is {} a run directory?", saved.display(), dir.display())));
    }
    let mut cfg = RunConfig::load(&saved)?;
    cfg.run.checkpoint_dir = dir.to_path_buf();
    cfg.validate()?;
    let (train, test) = load_splits(&cfg)?;
    let kit = Toolkit::build(&cfg, &train)?;
    let paths = RunPaths::new(dir);
    let cache = ScoreCache::open(&paths.scores()).map_err(failed)?;
    let engine = Engine::new(cfg.evolve.clone(), kit.agents(), &*kit.embedder, &train, &cache)
        .map_err(usage)?
        .with_eval_options(eval_options(&cfg))
        .with_run_dir(dir)
        .on_iteration(print_entry);
    let state = engine.load_latest().map_err(failed)?;
    println!("resuming {} from iteration {}", dir.display(), state.iteration());
    let outcome = engine.run_from(state).map_err(run_error)?;
    report(&outcome.population, &kit, test.as_ref(), &cfg)?;
    Ok(())
}

fn run_error(e: EvolveError) -> CliError {
    match e {
        EvolveError::Config(_) => usage(e),
        other => failed(other),
    }
}

fn report(
    pop: &greentea_core::Population,
    kit: &Toolkit,
    test: Option<&Dataset>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let best = pop.best().ok_or_else(|| failed("final population is empty"))?;
    println!("best prompt {} ({}):", best.prompt.id, best.score().map(|s| s.to_string()).unwrap_or_default());
    println!("{}", best.prompt.text);
    if let Some(test) = test {
        let cache = ScoreCache::in_memory();
        let rec = score_prompt(&best.prompt, test, &*kit.predictor, &cache, &eval_options(cfg), pop.iteration)
            .map_err(failed)?;
        println!("test accuracy {:.4} ({:.2}%) on {} samples", rec.score.value(), rec.score.value() * 100.0, test.len());
    }
    Ok(())
}

/// Scores every prompt in `prompt_file` on the chosen split without touching any run's cache.
pub fn evaluate(cfg: RunConfig, prompt_file: &Path, split: Split) -> Result<(), CliError> {
    cfg.validate()?;
    if !prompt_file.is_file() {
        return Err(usage(format!("prompt file not found: {}", prompt_file.display())));
    }
    let texts = read_lines(prompt_file)?;
    if texts.is_empty() {
        return Err(usage(format!("{} holds no prompts", prompt_file.display())));
    }
    let (train, test) = load_splits(&cfg)?;
    let ds = match split {
        Split::Train => train,
        Split::Test => test.ok_or_else(|| usage("no test split: set data.test_path or data.holdout"))?,
    };
    let kit = Toolkit::build(&cfg, &ds)?;
    let cache = ScoreCache::in_memory();
    let mut total = 0.0;
    for (n, text) in texts.iter().enumerate() {
        let prompt = Prompt::seed(PromptId::from_counter(n as u64), text.clone()).map_err(usage)?;
        let rec = score_prompt(&prompt, &ds, &*kit.predictor, &cache, &eval_options(&cfg), 0).map_err(failed)?;
        let v = rec.score.value();
        total += v;
        println!("prompt {n}: {} = {v:.4} ({:.2}%)", rec.score, v * 100.0);
    }
    let mean = total / texts.len() as f64;
    println!("mean over {} prompts on {split}: {mean:.4} ({:.2}%)", texts.len(), mean * 100.0);
    Ok(())
}

/// Prints per-iteration scores of a run and, optionally, one prompt's lineage.
pub fn inspect(dir: &Path, prompt_id: Option<&str>) -> Result<(), CliError> {
    let paths = RunPaths::new(dir);
    let (_, file) = latest_checkpoint(&paths)
        .map_err(failed)?
        .ok_or_else(|| usage(format!("no checkpoints in {}", paths.checkpoint_dir().display())))?;
    let state = load_checkpoint(&file).map_err(failed)?.state;
    for entry in &state.history {
        print_entry(entry);
        for (rank, m) in entry.members.iter().enumerate() {
            println!("    {rank}  {}  {}", m.prompt_id, m.score);
        }
    }
    let Some(raw) = prompt_id else {
        return Ok(());
    };
    let id: PromptId = raw.parse().map_err(|e| usage(format!("invalid prompt id {raw:?}: {e}")))?;
    if !state.archive.contains_key(&id) {
        return Err(usage(format!("prompt {id} is not part of the run in {}", dir.display())));
    }
    println!();
    println!("lineage of {id}:");
    for m in state.lineage(&id) {
        let score = m.score().map(|s| s.to_string()).unwrap_or_else(|| "unscored".into());
        let parents: Vec<&str> = m.prompt.parent_ids.iter().map(PromptId::as_str).collect();
        let origin = if parents.is_empty() { "seed".to_string() } else { format!("from {}", parents.join(" + ")) };
        println!("- {} generation {} score {score} ({origin})", m.prompt.id, m.prompt.generation);
        println!("  prompt: {}", m.prompt.text);
        if let Some(fb) = &m.feedback {
            println!("  feedback: {}", fb.guidance);
        }
    }
    Ok(())
}
