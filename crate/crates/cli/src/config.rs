//! The TOML run configuration and command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use greentea_core::agents::http::EmbeddingConfig;
use greentea_core::agents::AgentConfig;
use greentea_core::evolve::{EvolveConfig, FeedbackMode};
use greentea_core::{MutationMode, TaskKind};
use serde::{Deserialize, Serialize};

/// Name of the config copy stored in every run directory.
pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub evolve: EvolveConfig,
    pub run: RunSection,
    pub agents: AgentsConfig,
    pub embedding: EmbeddingSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training JSONL. Optional only for the keyword-world backend.
    pub path: Option<PathBuf>,
    pub task_kind: TaskKind,
    /// Fraction of `path` held out as the test split when `test_path` is unset.
    pub holdout: f64,
    pub test_path: Option<PathBuf>,
    /// Seed for the holdout split and the synthetic dataset.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, task_kind: TaskKind::Numeric, holdout: 0.0, test_path: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub checkpoint_dir: PathBuf,
    /// Concurrent predictor calls per evaluation.
    pub parallelism: usize,
    /// Cap on simultaneous HTTP requests across all agents.
    pub max_in_flight: usize,
    /// Inline seed prompts; used when `seeds_file` is unset.
    pub seeds: Vec<String>,
    /// One seed prompt per non-empty line.
    pub seeds_file: Option<PathBuf>,
    /// Directory with `predictor.txt`, `analyzer.txt` and `generator.txt`.
    pub templates_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("runs/latest"),
            parallelism: 4,
            max_in_flight: 8,
            seeds: Vec::new(),
            seeds_file: None,
            templates_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Chat-completion endpoints.
    Http,
    /// The built-in synthetic task; needs no network or data file.
    KeywordWorld,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentsConfig {
    pub backend: Backend,
    pub predictor: AgentConfig,
    pub analyzer: AgentConfig,
    pub generator: AgentConfig,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Http,
            predictor: AgentConfig::predictor_default(),
            analyzer: AgentConfig::analyzer_default(),
            generator: AgentConfig::generator_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProviderKind {
    /// Local character n-gram hashing.
    Hash,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub provider: EmbeddingProviderKind,
    /// Dimension of hashed embeddings.
    pub dim: usize,
    pub http: EmbeddingConfig,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self { provider: EmbeddingProviderKind::Hash, dim: 64, http: EmbeddingConfig::default() }
    }
}

/// Invalid or unreadable configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Values given on the command line; each one beats the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub task_kind: Option<TaskKind>,
    pub holdout: Option<f64>,
    pub population_size: Option<usize>,
    pub max_iterations: Option<u32>,
    pub feedback_mode: Option<FeedbackMode>,
    pub mutation_mode: Option<MutationMode>,
    pub seed: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Reads `path` and resolves relative file and directory paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.path, &mut self.data.test_path, &mut self.run.seeds_file, &mut self.run.templates_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.run.checkpoint_dir);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.data {
            self.data.path = Some(v.clone());
        }
        if let Some(v) = o.task_kind {
            self.data.task_kind = v;
        }
        if let Some(v) = o.holdout {
            self.data.holdout = v;
        }
        if let Some(v) = o.population_size {
            self.evolve.population_size = v;
        }
        if let Some(v) = o.max_iterations {
            self.evolve.max_iterations = v;
        }
        if let Some(v) = o.feedback_mode {
            self.evolve.feedback_mode = v;
        }
        if let Some(v) = o.mutation_mode {
            self.evolve.mutation_mode = v;
        }
        if let Some(v) = o.seed {
            self.evolve.selection_seed = v;
            self.data.seed = v;
        }
        if let Some(v) = &o.checkpoint_dir {
            self.run.checkpoint_dir = v.clone();
        }
        if let Some(v) = o.parallelism {
            self.run.parallelism = v;
        }
    }

    /// Field-level checks that serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, msg: String| Err(ConfigError(format!("{field}: {msg}")));
        if !(0.0..1.0).contains(&self.data.holdout) {
            return bad("data.holdout", format!("must be in [0, 1), got {}", self.data.holdout));
        }
        if self.run.parallelism == 0 {
            return bad("run.parallelism", "must be at least 1".into());
        }
        if self.run.max_in_flight == 0 {
            return bad("run.max_in_flight", "must be at least 1".into());
        }
        if self.embedding.dim == 0 {
            return bad("embedding.dim", "must be at least 1".into());
        }
        if self.agents.backend == Backend::Http && self.data.path.is_none() {
            return bad("data.path", "required with the http backend".into());
        }
        for (field, p) in [("data.path", &self.data.path), ("data.test_path", &self.data.test_path)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(field, format!("file not found: {}", p.display()));
                }
            }
        }
        if let Some(p) = &self.run.seeds_file {
            if !p.is_file() {
                return bad("run.seeds_file", format!("file not found: {}", p.display()));
            }
        }
        self.evolve
            .clone()
            .validated()
            .map(|_| ())
            .map_err(|e| ConfigError(format!("evolve: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = RunConfig::parse("[evolve]\npopulation_sise = 3\n").unwrap_err();
        assert!(err.0.contains("population_sise"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut cfg = RunConfig::parse("[evolve]\nmax_iterations = 9\npopulation_size = 6\n").unwrap();
        cfg.apply(&Overrides { max_iterations: Some(1), ..Default::default() });
        assert_eq!(cfg.evolve.max_iterations, 1);
        assert_eq!(cfg.evolve.population_size, 6);
        assert_eq!(RunConfig::default().evolve.max_iterations, 20);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = RunConfig { data: DataConfig { holdout: 1.5, ..Default::default() }, ..Default::default() };
        assert!(cfg.validate().unwrap_err().0.starts_with("data.holdout"));
        let cfg = RunConfig { data: DataConfig { path: Some("/no/such/file.jsonl".into()), ..Default::default() }, ..Default::default() };
        assert!(cfg.validate().unwrap_err().0.contains("/no/such/file.jsonl"));
    }
}
