//! The optimization loop, checkpoints and run history.
//!
//! One iteration evaluates any unscored members, collects feedback for
//! members that have none, trims to the top `K`, breeds `K` children,
//! scores them and keeps the best `K` of parents and children. State is
//! checkpointed after initialization and after every iteration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{elitist_merge, generate_children, retain_top_k, EvolveConfig, EvolveError, FeedbackMode, IdAllocator};
use crate::agents::{AgentError, Agents, ErrorCase};
use crate::datasets::Dataset;
use crate::eval::{score_prompt, wrong_samples, EvalOptions, ScoreCache};
use crate::topics::{cluster_errors, embed_errors, select_major_cluster, select_random, EmbeddingProvider};
use crate::types::{validate_population, Feedback, Member, Population, Prompt, PromptId, Score};

pub const HISTORY_HEADER: &str = "iteration,member_rank,prompt_id,score_num,score_den,mean_score,best_score";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryMember {
    pub prompt_id: PromptId,
    pub score: Score,
}

/// Population snapshot after one iteration (iteration 0 is the scored seed set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub members: Vec<HistoryMember>,
    pub mean_score: f64,
    pub best_score: Score,
}

impl HistoryEntry {
    fn of(pop: &Population) -> Self {
        let members: Vec<HistoryMember> = pop
            .members
            .iter()
            .filter_map(|m| m.score().map(|score| HistoryMember { prompt_id: m.prompt.id.clone(), score }))
            .collect();
        let mean_score = members.iter().map(|m| m.score.value()).sum::<f64>() / members.len().max(1) as f64;
        let best_score = members.iter().map(|m| m.score).max().unwrap_or(Score::new(0, 0));
        Self { iteration: pop.iteration, members, mean_score, best_score }
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub population: Population,
    pub rng: ChaCha8Rng,
    pub ids: IdAllocator,
    pub history: Vec<HistoryEntry>,
    /// Every prompt created during the run, with its score and feedback when known.
    pub archive: BTreeMap<PromptId, Member>,
}

impl RunState {
    pub fn iteration(&self) -> u32 {
        self.population.iteration
    }

    /// Ancestry of `id`, starting with the prompt itself, depth first.
    pub fn lineage(&self, id: &PromptId) -> Vec<&Member> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        let mut seen = std::collections::HashSet::new();
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur) {
                continue;
            }
            if let Some(m) = self.archive.get(cur) {
                out.push(m);
                stack.extend(m.prompt.parent_ids.iter().rev());
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub state: RunState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub population: Population,
    pub history: Vec<HistoryEntry>,
}

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn iteration_file(&self, t: u32) -> PathBuf {
        self.checkpoint_dir().join(format!("iter_{t}.json"))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.jsonl")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
}

fn checkpoint_err(path: &Path, reason: impl ToString) -> EvolveError {
    EvolveError::Checkpoint { path: path.display().to_string(), reason: reason.to_string() }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvolveError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| checkpoint_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| checkpoint_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EvolveError> {
    let bytes = fs::read(path).map_err(|e| checkpoint_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| checkpoint_err(path, e))
}

/// Path of the highest-numbered `iter_<t>.json`, if any.
pub fn latest_checkpoint(paths: &RunPaths) -> Result<Option<(u32, PathBuf)>, EvolveError> {
    let dir = paths.checkpoint_dir();
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| checkpoint_err(&dir, e))? {
        let path = entry.map_err(|e| checkpoint_err(&dir, e))?.path();
        let t = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("iter_")?.strip_suffix(".json")?.parse::<u32>().ok());
        if let Some(t) = t {
            if best.as_ref().is_none_or(|(b, _)| t > *b) {
                best = Some((t, path));
            }
        }
    }
    Ok(best)
}

/// Renders the history as CSV, one row per member per iteration.
pub fn write_history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for entry in history {
        for (rank, m) in entry.members.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                entry.iteration,
                rank,
                m.prompt_id,
                m.score.correct,
                m.score.total,
                entry.mean_score,
                entry.best_score.value()
            );
        }
    }
    out
}

/// Parses `history.csv` rows as `(iteration, rank, prompt_id, score)`.
pub fn read_history_csv(text: &str) -> Result<Vec<(u32, usize, PromptId, Score)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HISTORY_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("row {}: malformed {line:?}", i + 2);
            if f.len() != 7 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                Score::new(f[3].parse().map_err(|_| bad())?, f[4].parse().map_err(|_| bad())?),
            ))
        })
        .collect()
}

type IterationHook<'a> = Box<dyn Fn(&HistoryEntry) + Sync + 'a>;

pub struct Engine<'a> {
    cfg: EvolveConfig,
    agents: Agents<'a>,
    embedder: &'a dyn EmbeddingProvider,
    train: &'a Dataset,
    cache: &'a ScoreCache,
    eval: EvalOptions,
    paths: Option<RunPaths>,
    on_iteration: Option<IterationHook<'a>>,
}

impl<'a> Engine<'a> {
    pub fn new(
        cfg: EvolveConfig,
        agents: Agents<'a>,
        embedder: &'a dyn EmbeddingProvider,
        train: &'a Dataset,
        cache: &'a ScoreCache,
    ) -> Result<Self, EvolveError> {
        if train.is_empty() {
            return Err(EvolveError::Config("training set is empty".into()));
        }
        Ok(Self {
            cfg: cfg.validated()?,
            agents,
            embedder,
            train,
            cache,
            eval: EvalOptions::default(),
            paths: None,
            on_iteration: None,
        })
    }

    pub fn with_eval_options(mut self, eval: EvalOptions) -> Self {
        self.eval = eval;
        self
    }

    /// Enables checkpointing and `history.csv` under `root`.
    pub fn with_run_dir(mut self, root: impl Into<PathBuf>) -> Self {
        self.paths = Some(RunPaths::new(root));
        self
    }

    /// Called with every new history entry, including the initial one.
    pub fn on_iteration(mut self, f: impl Fn(&HistoryEntry) + Sync + 'a) -> Self {
        self.on_iteration = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &EvolveConfig {
        &self.cfg
    }

    /// Scores the seed prompts, keeps the best `K` and records iteration 0.
    pub fn initialize(&self, seed_texts: &[String]) -> Result<RunState, EvolveError> {
        if seed_texts.len() < self.cfg.population_size {
            return Err(EvolveError::Config(format!(
                "need {} seed prompts, got {}",
                self.cfg.population_size,
                seed_texts.len()
            )));
        }
        let mut ids = IdAllocator::default();
        let members = seed_texts
            .iter()
            .map(|t| Prompt::seed(ids.allocate(), t.clone()).map(Member::new))
            .collect::<Result<Vec<_>, _>>()?;
        let mut state = RunState {
            population: Population::new(members, self.cfg.population_size),
            rng: ChaCha8Rng::seed_from_u64(self.cfg.selection_seed),
            ids,
            history: Vec::new(),
            archive: BTreeMap::new(),
        };
        self.evaluate_members(&mut state)?;
        state.population = retain_top_k(state.population)?;
        self.record(&mut state)?;
        Ok(state)
    }

    /// Runs one full iteration. `state` is only modified when the iteration succeeds.
    pub fn step(&self, state: &mut RunState) -> Result<(), EvolveError> {
        let mut next = state.clone();
        self.evaluate_members(&mut next)?;
        self.attach_feedback(&mut next)?;
        next.population = retain_top_k(next.population)?;

        let children = generate_children(&next.population, self.agents.generator, &self.cfg, &mut next.rng, &mut next.ids)?;
        let t = next.population.iteration + 1;
        let evaluated = self.score_all(&children, t)?;
        let children: Vec<Member> =
            children.into_iter().zip(evaluated).map(|(p, rec)| Member::evaluated(p, rec)).collect();
        for c in &children {
            next.archive.insert(c.prompt.id.clone(), c.clone());
        }
        next.population = elitist_merge(next.population, children, self.cfg.population_size)?;
        debug_assert_eq!(validate_population(&next.population), vec![]);
        self.record(&mut next)?;
        *state = next;
        Ok(())
    }

    /// Iterates until `max_iterations` is reached.
    pub fn run_from(&self, mut state: RunState) -> Result<RunOutcome, EvolveError> {
        while state.iteration() < self.cfg.max_iterations {
            if let Err(e) = self.step(&mut state) {
                let checkpoint = match &self.paths {
                    Some(p) => p.iteration_file(state.iteration()).display().to_string(),
                    None => "(no checkpoint directory)".into(),
                };
                return Err(EvolveError::Aborted { iteration: state.iteration() + 1, checkpoint, source: Box::new(e) });
            }
        }
        Ok(RunOutcome { population: state.population, history: state.history })
    }

    pub fn run(&self, seed_texts: &[String]) -> Result<RunOutcome, EvolveError> {
        let state = self.initialize(seed_texts)?;
        self.run_from(state)
    }

    /// Loads the newest checkpoint in the run directory.
    pub fn load_latest(&self) -> Result<RunState, EvolveError> {
        let paths = self.paths.as_ref().ok_or_else(|| EvolveError::Config("no run directory configured".into()))?;
        let (_, path) = latest_checkpoint(paths)?
            .ok_or_else(|| checkpoint_err(&paths.checkpoint_dir(), "no checkpoints found"))?;
        let cp = load_checkpoint(&path)?;
        if cp.config_fingerprint != self.cfg.fingerprint() {
            return Err(checkpoint_err(&path, "written with a different evolution config"));
        }
        if cp.dataset_fingerprint != self.train.fingerprint() {
            return Err(checkpoint_err(&path, "written for a different training set"));
        }
        Ok(cp.state)
    }

    pub fn resume(&self) -> Result<RunOutcome, EvolveError> {
        let state = self.load_latest()?;
        self.run_from(state)
    }

    fn score_all(&self, prompts: &[Prompt], iteration: u32) -> Result<Vec<crate::types::FitnessRecord>, EvolveError> {
        let score = |p: &Prompt| score_prompt(p, self.train, self.agents.predictor, self.cache, &self.eval, iteration);
        let results: Vec<_> = if self.eval.parallelism > 1 && prompts.len() > 1 {
            thread::scope(|s| {
                let handles: Vec<_> = prompts.iter().map(|p| s.spawn(move || score(p))).collect();
                handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
            })
        } else {
            prompts.iter().map(score).collect()
        };
        results.into_iter().map(|r| r.map_err(EvolveError::from)).collect()
    }

    fn evaluate_members(&self, state: &mut RunState) -> Result<(), EvolveError> {
        let pending: Vec<usize> =
            (0..state.population.members.len()).filter(|&i| state.population.members[i].fitness.is_none()).collect();
        let prompts: Vec<Prompt> = pending.iter().map(|&i| state.population.members[i].prompt.clone()).collect();
        let records = self.score_all(&prompts, state.population.iteration)?;
        for (i, rec) in pending.into_iter().zip(records) {
            let m = &mut state.population.members[i];
            m.fitness = Some(rec);
            state.archive.insert(m.prompt.id.clone(), m.clone());
        }
        Ok(())
    }

    fn attach_feedback(&self, state: &mut RunState) -> Result<(), EvolveError> {
        if self.cfg.feedback_mode == FeedbackMode::None {
            return Ok(());
        }
        for i in 0..state.population.members.len() {
            if state.population.members[i].feedback.is_some() {
                continue;
            }
            let seed = state.rng.next_u64();
            let fb = self.collect_feedback(&state.population.members[i], seed)?;
            if let Some(fb) = fb {
                let m = &mut state.population.members[i];
                m.feedback = Some(fb);
                state.archive.insert(m.prompt.id.clone(), m.clone());
            }
        }
        Ok(())
    }

    fn collect_feedback(&self, member: &Member, seed: u64) -> Result<Option<Feedback>, EvolveError> {
        let Some(record) = &member.fitness else {
            return Err(EvolveError::Unevaluated(member.prompt.id.to_string()));
        };
        let wrong = wrong_samples(record, self.train);
        if wrong.is_empty() {
            return Ok(None);
        }
        let max = self.cfg.max_feedback_samples;
        let (picked, cluster_size) = match self.cfg.feedback_mode {
            FeedbackMode::Topic => {
                let vectors = embed_errors(&wrong, self.embedder, self.cfg.embed_field)?;
                let clusters = cluster_errors(&vectors, self.cfg.num_clusters, seed);
                let size = clusters.iter().map(|c| c.len()).max().unwrap_or(0);
                (select_major_cluster(&clusters, max, seed.rotate_left(32)), size)
            }
            FeedbackMode::RandomSample => {
                let picked = select_random(wrong.len(), max, seed);
                let n = picked.len();
                (picked, n)
            }
            FeedbackMode::None => return Ok(None),
        };
        let cases: Vec<ErrorCase<'_>> = picked
            .iter()
            .map(|&i| ErrorCase {
                question: &wrong[i].0.question,
                gold: &wrong[i].0.gold_answer,
                predicted: &wrong[i].1.predicted_answer,
            })
            .collect();
        let analysis = self.agents.analyzer.analyze(&member.prompt.text, &cases)?;
        if analysis.guidance.trim().is_empty() {
            return Err(AgentError::EmptyOutput.into());
        }
        Ok(Some(Feedback {
            prompt_id: member.prompt.id.clone(),
            analysis: analysis.analysis,
            guidance: analysis.guidance,
            source_cluster_size: cluster_size,
            source_sample_ids: picked.iter().map(|&i| wrong[i].0.id).collect(),
        }))
    }

    fn record(&self, state: &mut RunState) -> Result<(), EvolveError> {
        let entry = HistoryEntry::of(&state.population);
        if let Some(cb) = &self.on_iteration {
            cb(&entry);
        }
        state.history.push(entry);
        if let Some(paths) = &self.paths {
            let dir = paths.checkpoint_dir();
            fs::create_dir_all(&dir).map_err(|e| checkpoint_err(&dir, e))?;
            let cp = Checkpoint {
                config_fingerprint: self.cfg.fingerprint(),
                dataset_fingerprint: self.train.fingerprint(),
                state: state.clone(),
            };
            let json = serde_json::to_vec_pretty(&cp).map_err(|e| checkpoint_err(&dir, e))?;
            write_atomic(&paths.iteration_file(state.iteration()), &json)?;
            write_atomic(&paths.history(), write_history_csv(&state.history).as_bytes())?;
        }
        Ok(())
    }
}
