//! Scoring prompts: answer extraction, memoized accuracy evaluation and
//! wrong-sample collection.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock, Mutex};
use std::thread;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{http::backoff, Predictor};
use crate::datasets::{hex, Dataset};
use crate::types::{FitnessRecord, PredictionOutcome, Prompt, PromptId, Sample, TaskKind};

/// Fraction of failed predictor calls above which an evaluation is abandoned.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("prompt {prompt_id}: {failed} of {total} predictions failed (last error: {last_error})")]
    TooManyFailures { prompt_id: PromptId, failed: usize, total: usize, last_error: String },
    #[error("score cache {path}: {source}")]
    Cache { path: PathBuf, source: std::io::Error },
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").unwrap());
static OPTION_PAREN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Ea-e])\)").unwrap());
static OPTION_UPPER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-E])\b").unwrap());
static OPTION_ANY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Ea-e])\b").unwrap());
static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|true|false)\b").unwrap());

/// Normalizes raw predictor output into the answer token compared against the gold answer.
///
/// Returns the empty string when nothing can be extracted.
pub fn extract_answer(raw_output: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::Numeric => NUMBER.find_iter(raw_output).last().map(|m| normalize_number(m.as_str())).unwrap_or_default(),
        TaskKind::MultipleChoice => [&*OPTION_PAREN, &*OPTION_UPPER, &*OPTION_ANY]
            .iter()
            .find_map(|re| re.captures_iter(raw_output).last())
            .map(|c| c[1].to_lowercase())
            .unwrap_or_default(),
        TaskKind::BinaryLabel => YES_NO
            .find_iter(raw_output)
            .last()
            .map(|m| match m.as_str().to_lowercase().as_str() {
                "yes" | "true" => "yes".to_string(),
                _ => "no".to_string(),
            })
            .unwrap_or_default(),
        TaskKind::FreeText => raw_output.trim().to_lowercase(),
    }
}

fn normalize_number(token: &str) -> String {
    let mut s = token.replace(',', "");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Concurrent predictor calls within one evaluation.
    pub parallelism: usize,
    /// Retries per sample after the first failed call.
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { parallelism: 1, retry_budget: 2, backoff_base_ms: 200 }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    dataset: String,
    text_digest: String,
    record: FitnessRecord,
}

type Slot = Arc<Mutex<Option<FitnessRecord>>>;

/// Memoized fitness records keyed by prompt id and dataset fingerprint.
///
/// Concurrent requests for the same key wait on one computation. Records are
/// also indexed by prompt text, so a new id carrying already-scored text
/// reuses the record, including while that text is still being scored. An optional append-only JSONL log makes the cache
/// persistent across resumed runs.
#[derive(Default)]
pub struct ScoreCache {
    slots: Mutex<HashMap<(PromptId, String), Slot>>,
    by_text: Mutex<HashMap<(String, String), Slot>>,
    log: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays `path` if it exists, then appends every new record to it.
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let io_err = |source| EvalError::Cache { path: path.to_path_buf(), source };
        let mut cache = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(entry) => cache.remember(&entry.dataset, &entry.text_digest, entry.record),
                    // A torn final line from an interrupted write only costs a re-evaluation.
                    Err(e) => tracing::warn!(line = n + 1, error = %e, "skipping unreadable score cache entry"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        cache.log = Some((path.to_path_buf(), Mutex::new(BufWriter::new(file))));
        Ok(cache)
    }

    fn slot(&self, id: &PromptId, fingerprint: &str) -> Slot {
        self.slots.lock().unwrap().entry((id.clone(), fingerprint.to_string())).or_default().clone()
    }

    fn text_slot(&self, digest: &str, fingerprint: &str) -> Slot {
        self.by_text.lock().unwrap().entry((digest.to_string(), fingerprint.to_string())).or_default().clone()
    }

    fn remember(&self, fingerprint: &str, digest: &str, record: FitnessRecord) {
        let slot = self.slot(&record.prompt_id, fingerprint);
        self.text_slot(digest, fingerprint).lock().unwrap().get_or_insert_with(|| record.clone());
        *slot.lock().unwrap() = Some(record);
    }

    pub fn get(&self, id: &PromptId, fingerprint: &str) -> Option<FitnessRecord> {
        let slot = self.slots.lock().unwrap().get(&(id.clone(), fingerprint.to_string())).cloned()?;
        let rec = slot.lock().unwrap().clone();
        rec
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().filter(|s| s.lock().unwrap().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&self, fingerprint: &str, digest: &str, record: &FitnessRecord) -> Result<(), EvalError> {
        if let Some((path, log)) = &self.log {
            let line = CacheLine { dataset: fingerprint.into(), text_digest: digest.into(), record: record.clone() };
            let mut w = log.lock().unwrap();
            let io_err = |source| EvalError::Cache { path: path.clone(), source };
            serde_json::to_writer(&mut *w, &line).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        Ok(())
    }
}

fn text_digest(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes())[..16])
}

/// Accuracy of `prompt` on `ds`, memoized in `cache`.
///
/// Samples are predicted concurrently up to `opts.parallelism` and the
/// outcomes are put back into dataset order. A sample whose predictor call
/// still fails after retries counts as wrong; too many such failures abort.
pub fn score_prompt<P: Predictor + ?Sized>(
    prompt: &Prompt,
    ds: &Dataset,
    predictor: &P,
    cache: &ScoreCache,
    opts: &EvalOptions,
    iteration: u32,
) -> Result<FitnessRecord, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let fingerprint = ds.fingerprint();
    let slot = cache.slot(&prompt.id, &fingerprint);
    let mut guard = slot.lock().unwrap();
    if let Some(rec) = guard.as_ref() {
        return Ok(rec.clone());
    }

    let digest = text_digest(&prompt.text);
    let text_slot = cache.text_slot(&digest, &fingerprint);
    let mut text_guard = text_slot.lock().unwrap();
    let record = match text_guard.as_ref() {
        Some(rec) => FitnessRecord { prompt_id: prompt.id.clone(), evaluated_at: iteration, ..rec.clone() },
        None => {
            let rec = evaluate(prompt, ds, predictor, opts, iteration)?;
            *text_guard = Some(rec.clone());
            rec
        }
    };
    drop(text_guard);
    cache.append(&fingerprint, &digest, &record)?;
    *guard = Some(record.clone());
    Ok(record)
}

fn evaluate<P: Predictor + ?Sized>(
    prompt: &Prompt,
    ds: &Dataset,
    predictor: &P,
    opts: &EvalOptions,
    iteration: u32,
) -> Result<FitnessRecord, EvalError> {
    let n = ds.len();
    let next = AtomicUsize::new(0);
    let workers = opts.parallelism.clamp(1, n);
    let mut results: Vec<(usize, PredictionOutcome, Option<String>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break local;
                        }
                        let (outcome, err) = predict_sample(&prompt.text, &ds.samples[i], predictor, opts);
                        local.push((i, outcome, err));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    results.sort_by_key(|(i, ..)| *i);

    let failures: Vec<&String> = results.iter().filter_map(|(_, _, e)| e.as_ref()).collect();
    if failures.len() as f64 > MAX_FAILURE_FRACTION * n as f64 {
        return Err(EvalError::TooManyFailures {
            prompt_id: prompt.id.clone(),
            failed: failures.len(),
            total: n,
            last_error: failures.last().map(|s| s.to_string()).unwrap_or_default(),
        });
    }
    let outcomes = results.into_iter().map(|(_, o, _)| o).collect();
    Ok(FitnessRecord::from_outcomes(prompt.id.clone(), outcomes, iteration))
}

fn predict_sample<P: Predictor + ?Sized>(
    prompt_text: &str,
    sample: &Sample,
    predictor: &P,
    opts: &EvalOptions,
) -> (PredictionOutcome, Option<String>) {
    let mut attempt = 0;
    loop {
        match predictor.predict(prompt_text, &sample.question) {
            Ok(raw) => {
                let extracted = extract_answer(&raw, sample.task_kind);
                let correct = !extracted.is_empty() && extracted == sample.gold_answer;
                let outcome = PredictionOutcome {
                    sample_id: sample.id,
                    predicted_answer: raw,
                    extracted_answer: extracted,
                    correct,
                };
                return (outcome, None);
            }
            Err(e) if attempt >= opts.retry_budget => {
                let msg = e.to_string();
                let outcome = PredictionOutcome {
                    sample_id: sample.id,
                    predicted_answer: format!("<error: {msg}>"),
                    extracted_answer: String::new(),
                    correct: false,
                };
                return (outcome, Some(msg));
            }
            Err(e) => {
                tracing::debug!(sample = sample.id, attempt, error = %e, "predictor call failed, retrying");
                thread::sleep(backoff(opts.backoff_base_ms, attempt));
                attempt += 1;
            }
        }
    }
}

/// Wrong predictions of `record`, paired with their samples, in dataset order.
pub fn wrong_samples<'a>(record: &'a FitnessRecord, ds: &'a Dataset) -> Vec<(&'a Sample, &'a PredictionOutcome)> {
    let by_id: HashMap<u64, &PredictionOutcome> =
        record.outcomes.iter().filter(|o| !o.correct).map(|o| (o.sample_id, o)).collect();
    ds.samples.iter().filter_map(|s| by_id.get(&s.id).map(|o| (s, *o))).collect()
}
