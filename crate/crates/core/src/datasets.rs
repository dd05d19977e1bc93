//! Loading, validating and splitting QA corpora.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::extract_answer;
use crate::types::{Sample, TaskKind};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} contains no samples")]
    Empty { path: PathBuf },
    #[error("{path}:{line}: {reason}")]
    Line { path: PathBuf, line: usize, reason: String },
    #[error("dataset needs at least 2 samples to split, has {0}")]
    TooSmall(usize),
    #[error("holdout fraction {fraction} over {len} samples leaves an empty split")]
    EmptySplit { fraction: f64, len: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("dataset mixes task kinds {0} and {1}")]
    MixedKinds(TaskKind, TaskKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset from already-normalized samples, checking id uniqueness and kind homogeneity.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>, split: Split) -> Result<Self, DatasetError> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.id) {
                return Err(DatasetError::DuplicateId(s.id));
            }
            if s.task_kind != samples[0].task_kind {
                return Err(DatasetError::MixedKinds(samples[0].task_kind, s.task_kind));
            }
        }
        Ok(Self { name: name.into(), samples, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_kind(&self) -> Option<TaskKind> {
        self.samples.first().map(|s| s.task_kind)
    }

    /// Content hash identifying this exact set of samples; keys the score cache.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.to_le_bytes());
            for field in [s.question.as_str(), s.gold_answer.as_str(), s.task_kind.as_str()] {
                h.update((field.len() as u64).to_le_bytes());
                h.update(field.as_bytes());
            }
        }
        hex(&h.finalize()[..16])
    }

    /// Writes the samples in the same line-delimited format `load_dataset` reads.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for s in &self.samples {
            let line = serde_json::json!({ "question": s.question, "answer": s.gold_answer });
            writeln!(f, "{line}")?;
        }
        f.flush()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps a raw gold answer to the token the extractor for `kind` would produce.
///
/// GSM8K-style rationales are cut at the final `####` marker first. Binary labels
/// also accept `1`/`0` and `true`/`false`.
pub fn normalize_gold(answer: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::Numeric => {
            let tail = answer.rsplit_once("####").map_or(answer, |(_, t)| t);
            extract_answer(tail, kind)
        }
        TaskKind::BinaryLabel => match answer.trim().to_lowercase().as_str() {
            "1" => "yes".to_string(),
            "0" => "no".to_string(),
            other => extract_answer(other, kind),
        },
        TaskKind::MultipleChoice | TaskKind::FreeText => extract_answer(answer, kind),
    }
}

#[derive(Deserialize)]
struct Record {
    question: String,
    answer: serde_json::Value,
}

/// Reads a line-delimited JSON file of `{"question", "answer"}` records.
///
/// Sample ids follow record order starting at 0. Blank lines are skipped but
/// still count toward the line numbers reported in errors.
pub fn load_dataset(path: &Path, task_kind: TaskKind, split: Split) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let line_err = |line: usize, reason: String| DatasetError::Line { path: path.to_path_buf(), line, reason };

    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        let answer = match rec.answer {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            other => return Err(line_err(line, format!("answer must be a string, got {other}"))),
        };
        if answer.trim().is_empty() {
            return Err(line_err(line, "blank answer".into()));
        }
        if rec.question.trim().is_empty() {
            return Err(line_err(line, "blank question".into()));
        }
        let gold = normalize_gold(&answer, task_kind);
        if gold.is_empty() {
            return Err(line_err(line, format!("answer {answer:?} has no valid {task_kind} token")));
        }
        let id = samples.len() as u64;
        samples.push(Sample::new(id, rec.question, gold, task_kind).map_err(|e| line_err(line, e.to_string()))?);
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty { path: path.to_path_buf() });
    }
    let name = path.file_stem().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples, split)
}

/// Seeded random partition into train and test. Both halves keep the original
/// sample ids and order.
pub fn split_holdout(ds: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    let n = ds.len();
    if n < 2 {
        return Err(DatasetError::TooSmall(n));
    }
    let n_test = if holdout_fraction > 0.0 && holdout_fraction < 1.0 {
        (n as f64 * holdout_fraction).round() as usize
    } else {
        0
    };
    if n_test == 0 || n_test >= n {
        return Err(DatasetError::EmptySplit { fraction: holdout_fraction, len: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = ds.samples.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    let strip = |v: Vec<(Sample, bool)>| v.into_iter().map(|(s, _)| s).collect::<Vec<_>>();
    Ok((
        Dataset { name: ds.name.clone(), samples: strip(train), split: Split::Train },
        Dataset { name: ds.name.clone(), samples: strip(test), split: Split::Test },
    ))
}
