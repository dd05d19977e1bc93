//! Domain types shared by every stage of the optimizer.
//!
//! All types serialize to snake_case JSON objects and are immutable once
//! constructed, so they can be shared freely across evaluation workers.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prompts longer than this are logged; they are never truncated.
pub const PROMPT_LENGTH_WARNING: usize = 8_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("identifier {0:?} is not a lowercase hex string")]
    InvalidId(String),
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("prompt must have 0 or 2 parents, got {0}")]
    ParentCount(usize),
    #[error("child generation {child} must exceed parent generation {parent}")]
    ParentGeneration { child: u32, parent: u32 },
    #[error("sample {0} has an empty question or answer")]
    EmptySample(u64),
    #[error("unknown task kind {0:?}")]
    UnknownTaskKind(String),
    #[error("fitness record covers {got} outcomes but stores a total of {total}")]
    InconsistentScore { got: usize, total: u32 },
}

/// Lowercase hex identifier for prompts and runs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptId(String);

impl PromptId {
    /// Fixed-width id from a counter; lexical order follows creation order.
    pub fn from_counter(n: u64) -> Self {
        Self(format!("{n:016x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PromptId {
    type Error = TypeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if !s.is_empty() && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Self(s))
        } else {
            Err(TypeError::InvalidId(s))
        }
    }
}

impl FromStr for PromptId {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::try_from(s.to_string())
    }
}

impl From<PromptId> for String {
    fn from(id: PromptId) -> Self {
        id.0
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A candidate instruction plus its lineage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPrompt")]
pub struct Prompt {
    pub id: PromptId,
    pub text: String,
    pub generation: u32,
    pub parent_ids: Vec<PromptId>,
}

#[derive(Deserialize)]
struct RawPrompt {
    id: PromptId,
    text: String,
    generation: u32,
    parent_ids: Vec<PromptId>,
}

impl TryFrom<RawPrompt> for Prompt {
    type Error = TypeError;

    fn try_from(raw: RawPrompt) -> Result<Self, Self::Error> {
        check_text(&raw.text)?;
        if !raw.parent_ids.is_empty() && raw.parent_ids.len() != 2 {
            return Err(TypeError::ParentCount(raw.parent_ids.len()));
        }
        if raw.parent_ids.len() == 2 && raw.generation == 0 {
            return Err(TypeError::ParentGeneration { child: 0, parent: 0 });
        }
        Ok(Self {
            id: raw.id,
            text: raw.text,
            generation: raw.generation,
            parent_ids: raw.parent_ids,
        })
    }
}

fn check_text(text: &str) -> Result<(), TypeError> {
    if text.trim().is_empty() {
        return Err(TypeError::EmptyPrompt);
    }
    if text.chars().count() > PROMPT_LENGTH_WARNING {
        tracing::warn!(chars = text.chars().count(), "prompt exceeds length warning threshold");
    }
    Ok(())
}

impl Prompt {
    /// An initial prompt with no parents at generation 0.
    pub fn seed(id: PromptId, text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        check_text(&text)?;
        Ok(Self { id, text, generation: 0, parent_ids: Vec::new() })
    }

    /// A GA child of two parents.
    pub fn child(
        id: PromptId,
        text: impl Into<String>,
        generation: u32,
        parents: (&Prompt, &Prompt),
    ) -> Result<Self, TypeError> {
        let text = text.into();
        check_text(&text)?;
        for parent in [parents.0, parents.1] {
            if parent.generation >= generation {
                return Err(TypeError::ParentGeneration { child: generation, parent: parent.generation });
            }
        }
        Ok(Self {
            id,
            text,
            generation,
            parent_ids: vec![parents.0.id.clone(), parents.1.id.clone()],
        })
    }

    pub fn is_seed(&self) -> bool {
        self.parent_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Numeric,
    MultipleChoice,
    BinaryLabel,
    FreeText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Numeric, TaskKind::MultipleChoice, TaskKind::BinaryLabel, TaskKind::FreeText];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Numeric => "numeric",
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::BinaryLabel => "binary_label",
            TaskKind::FreeText => "free_text",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TypeError::UnknownTaskKind(s.to_string()))
    }
}

/// One question/answer pair. `gold_answer` is already normalized for `task_kind`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub question: String,
    pub gold_answer: String,
    pub task_kind: TaskKind,
}

impl Sample {
    pub fn new(
        id: u64,
        question: impl Into<String>,
        gold_answer: impl Into<String>,
        task_kind: TaskKind,
    ) -> Result<Self, TypeError> {
        let (question, gold_answer) = (question.into(), gold_answer.into());
        if question.trim().is_empty() || gold_answer.trim().is_empty() {
            return Err(TypeError::EmptySample(id));
        }
        Ok(Self { id, question, gold_answer, task_kind })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub sample_id: u64,
    pub predicted_answer: String,
    pub extracted_answer: String,
    pub correct: bool,
}

/// Accuracy as an exact fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Score {
    pub correct: u32,
    pub total: u32,
}

impl Score {
    pub fn new(correct: u32, total: u32) -> Self {
        debug_assert!(correct <= total);
        Self { correct, total }
    }

    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.correct) / f64::from(self.total)
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.total > 0 && self.correct == self.total
    }
}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    /// Compares the fractions exactly by cross-multiplication.
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = u64::from(self.correct) * u64::from(other.total.max(1));
        let rhs = u64::from(other.correct) * u64::from(self.total.max(1));
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.total)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub prompt_id: PromptId,
    pub score: Score,
    pub outcomes: Vec<PredictionOutcome>,
    pub evaluated_at: u32,
}

impl FitnessRecord {
    pub fn from_outcomes(prompt_id: PromptId, outcomes: Vec<PredictionOutcome>, evaluated_at: u32) -> Self {
        let correct = outcomes.iter().filter(|o| o.correct).count() as u32;
        let score = Score::new(correct, outcomes.len() as u32);
        Self { prompt_id, score, outcomes, evaluated_at }
    }

    /// Recomputes the score from the outcomes and compares with the stored value.
    pub fn check(&self) -> Result<(), TypeError> {
        let correct = self.outcomes.iter().filter(|o| o.correct).count() as u32;
        if self.outcomes.len() as u32 != self.score.total || correct != self.score.correct {
            return Err(TypeError::InconsistentScore { got: self.outcomes.len(), total: self.score.total });
        }
        Ok(())
    }
}

/// Error analysis and improvement guidance for one prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub prompt_id: PromptId,
    pub analysis: String,
    pub guidance: String,
    pub source_cluster_size: usize,
    pub source_sample_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub prompt: Prompt,
    pub fitness: Option<FitnessRecord>,
    pub feedback: Option<Feedback>,
}

impl Member {
    pub fn new(prompt: Prompt) -> Self {
        Self { prompt, fitness: None, feedback: None }
    }

    pub fn evaluated(prompt: Prompt, fitness: FitnessRecord) -> Self {
        Self { prompt, fitness: Some(fitness), feedback: None }
    }

    pub fn score(&self) -> Option<Score> {
        self.fitness.as_ref().map(|f| f.score)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Member>,
    pub capacity: usize,
    pub iteration: u32,
}

impl Population {
    pub fn new(members: Vec<Member>, capacity: usize) -> Self {
        Self { members, capacity, iteration: 0 }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> Option<&Member> {
        self.members.iter().filter(|m| m.fitness.is_some()).max_by(|a, b| {
            a.score().cmp(&b.score()).then_with(|| b.prompt.id.cmp(&a.prompt.id))
        })
    }

    pub fn contains_text(&self, text: &str) -> bool {
        self.members.iter().any(|m| m.prompt.text == text)
    }
}

/// A broken population invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    CapacityTooSmall(usize),
    Size { len: usize, capacity: usize },
    DuplicateId(PromptId),
    EmptyText(PromptId),
    ParentCount(PromptId, usize),
    ParentGeneration { child: PromptId, parent: PromptId },
    FitnessOwner(PromptId),
    InconsistentScore(PromptId),
    FeedbackOwner(PromptId),
    EmptyGuidance(PromptId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CapacityTooSmall(k) => write!(f, "capacity {k} is below the minimum of 2"),
            Violation::Size { len, capacity } => {
                write!(f, "population holds {len} members but capacity is {capacity}")
            }
            Violation::DuplicateId(id) => write!(f, "duplicate prompt id {id}"),
            Violation::EmptyText(id) => write!(f, "prompt {id} has empty text"),
            Violation::ParentCount(id, n) => write!(f, "prompt {id} has {n} parents (expected 0 or 2)"),
            Violation::ParentGeneration { child, parent } => {
                write!(f, "prompt {child} is not younger than its parent {parent}")
            }
            Violation::FitnessOwner(id) => write!(f, "fitness record attached to {id} belongs to another prompt"),
            Violation::InconsistentScore(id) => write!(f, "stored score of {id} disagrees with its outcomes"),
            Violation::FeedbackOwner(id) => write!(f, "feedback attached to {id} belongs to another prompt"),
            Violation::EmptyGuidance(id) => write!(f, "feedback for {id} has a source cluster but no guidance"),
        }
    }
}

/// Lists every broken invariant; an empty result means the population is well formed.
pub fn validate_population(pop: &Population) -> Vec<Violation> {
    let mut out = Vec::new();
    if pop.capacity < 2 {
        out.push(Violation::CapacityTooSmall(pop.capacity));
    }
    if pop.members.len() != pop.capacity {
        out.push(Violation::Size { len: pop.members.len(), capacity: pop.capacity });
    }
    let mut seen = HashSet::new();
    for m in &pop.members {
        let p = &m.prompt;
        if !seen.insert(&p.id) {
            out.push(Violation::DuplicateId(p.id.clone()));
        }
        if p.text.trim().is_empty() {
            out.push(Violation::EmptyText(p.id.clone()));
        }
        if !p.parent_ids.is_empty() && p.parent_ids.len() != 2 {
            out.push(Violation::ParentCount(p.id.clone(), p.parent_ids.len()));
        }
        for parent_id in &p.parent_ids {
            let parent = pop.members.iter().find(|o| &o.prompt.id == parent_id);
            if parent.is_some_and(|par| par.prompt.generation >= p.generation) {
                out.push(Violation::ParentGeneration { child: p.id.clone(), parent: parent_id.clone() });
            }
        }
        if let Some(rec) = &m.fitness {
            if rec.prompt_id != p.id {
                out.push(Violation::FitnessOwner(p.id.clone()));
            }
            if rec.check().is_err() {
                out.push(Violation::InconsistentScore(p.id.clone()));
            }
        }
        if let Some(fb) = &m.feedback {
            if fb.prompt_id != p.id {
                out.push(Violation::FeedbackOwner(p.id.clone()));
            }
            if fb.source_cluster_size > 0 && fb.guidance.trim().is_empty() {
                out.push(Violation::EmptyGuidance(p.id.clone()));
            }
        }
    }
    out
}
