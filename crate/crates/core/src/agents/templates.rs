//! Meta-prompt templates for the three agents.
//!
//! Templates are plain text files with `{name}` markers. The defaults under
//! `templates/` are compiled in; [`Templates::load_dir`] reads replacements
//! from disk. Substitution is a single left-to-right pass, so marker-like text
//! inside substituted values is never expanded again.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ErrorCase, GenerationRequest, MutationMode};
use crate::types::{Feedback, TaskKind};

pub const PROMPT_OPEN: &str = "<prompt>";
pub const PROMPT_CLOSE: &str = "</prompt>";

const GUIDED_MARKER: &str = "=== guided ===";
const RANDOM_MARKER: &str = "=== random_mutation ===";
const NO_FEEDBACK: &str = "No errors were observed for this instruction.";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("template {name} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: &'static str, placeholder: &'static str },
    #[error("generator template needs both `{GUIDED_MARKER}` and `{RANDOM_MARKER}` sections")]
    MissingSection,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    predictor: String,
    analyzer: String,
    generator_guided: String,
    generator_random: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::from_sources(
            include_str!("../../templates/predictor.txt"),
            include_str!("../../templates/analyzer.txt"),
            include_str!("../../templates/generator.txt"),
        )
        .expect("bundled templates are valid")
    }
}

impl Templates {
    pub fn from_sources(predictor: &str, analyzer: &str, generator: &str) -> Result<Self, TemplateError> {
        let (guided, random) = split_generator(generator)?;
        let t = Self {
            predictor: predictor.to_string(),
            analyzer: analyzer.to_string(),
            generator_guided: guided,
            generator_random: random,
        };
        require("predictor", &t.predictor, &["prompt", "question", "answer_format"])?;
        require("analyzer", &t.analyzer, &["prompt", "error_cases"])?;
        require("generator (guided)", &t.generator_guided, &["parent_a", "parent_b", "feedback_a", "feedback_b"])?;
        require("generator (random_mutation)", &t.generator_random, &["parent_a", "parent_b"])?;
        Ok(t)
    }

    /// Reads `predictor.txt`, `analyzer.txt` and `generator.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| TemplateError::Io { path: path.display().to_string(), source })
        };
        Self::from_sources(&read("predictor.txt")?, &read("analyzer.txt")?, &read("generator.txt")?)
    }

    pub fn render_predictor(&self, prompt_text: &str, question: &str, kind: TaskKind) -> String {
        substitute(
            &self.predictor,
            &[("prompt", prompt_text), ("question", question), ("answer_format", answer_format(kind))],
        )
    }

    pub fn render_analyzer(&self, prompt_text: &str, cases: &[ErrorCase<'_>]) -> String {
        let mut listed = String::new();
        for (i, c) in cases.iter().enumerate() {
            if i > 0 {
                listed.push('\n');
            }
            listed.push_str(&format!(
                "Case {}:\nQuestion: {}\nCorrect answer: {}\nModel answer: {}\n",
                i + 1,
                c.question,
                c.gold,
                c.predicted
            ));
        }
        substitute(&self.analyzer, &[("prompt", prompt_text), ("error_cases", &listed)])
    }

    pub fn render_generator(&self, req: &GenerationRequest<'_>) -> String {
        let a = req.parent_a.text.as_str();
        let b = req.parent_b.text.as_str();
        match req.mode {
            MutationMode::Guided => {
                let fa = feedback_block(req.feedback_a);
                let fb = feedback_block(req.feedback_b);
                substitute(
                    &self.generator_guided,
                    &[("parent_a", a), ("parent_b", b), ("feedback_a", &fa), ("feedback_b", &fb)],
                )
            }
            MutationMode::RandomMutation => substitute(&self.generator_random, &[("parent_a", a), ("parent_b", b)]),
        }
    }
}

/// Answer-format line appended to every predictor message; matches the extractor for `kind`.
pub fn answer_format(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Numeric => "End your response with the final numeric answer.",
        TaskKind::MultipleChoice => "End your response with the letter of the correct option, for example (B).",
        TaskKind::BinaryLabel => "End your response with a single word: yes or no.",
        TaskKind::FreeText => "Respond with the answer only.",
    }
}

fn feedback_block(fb: Option<&Feedback>) -> String {
    match fb {
        Some(fb) => format!("Analysis: {}\nGuidance: {}", fb.analysis.trim(), fb.guidance.trim()),
        None => NO_FEEDBACK.to_string(),
    }
}

fn split_generator(src: &str) -> Result<(String, String), TemplateError> {
    let g = src.find(GUIDED_MARKER).ok_or(TemplateError::MissingSection)?;
    let r = src.find(RANDOM_MARKER).ok_or(TemplateError::MissingSection)?;
    let section = |start: usize, marker: &str, end: usize| src[start + marker.len()..end].trim_matches('\n').to_string();
    if g < r {
        Ok((section(g, GUIDED_MARKER, r), section(r, RANDOM_MARKER, src.len())))
    } else {
        Ok((section(g, GUIDED_MARKER, src.len()), section(r, RANDOM_MARKER, g)))
    }
}

fn require(name: &'static str, template: &str, placeholders: &[&'static str]) -> Result<(), TemplateError> {
    for &p in placeholders {
        if !template.contains(&format!("{{{p}}}")) {
            return Err(TemplateError::MissingPlaceholder { name, placeholder: p });
        }
    }
    Ok(())
}

/// Replaces `{key}` markers in one pass; unknown markers are kept verbatim.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            values.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Extracts the child prompt from generator output: the text inside the first
/// `<prompt>…</prompt>` pair, or the whole output when no pair is present.
pub fn parse_generated_prompt(raw: &str) -> Result<String, super::AgentError> {
    let inner = raw
        .find(PROMPT_OPEN)
        .and_then(|start| {
            let body = &raw[start + PROMPT_OPEN.len()..];
            body.find(PROMPT_CLOSE).map(|end| &body[..end])
        })
        .unwrap_or(raw)
        .trim();
    if inner.is_empty() {
        Err(super::AgentError::EmptyOutput)
    } else {
        Ok(inner.to_string())
    }
}

/// Splits analyzer output into `<analysis>` and `<guidance>` parts. Output
/// without tags is used whole for both.
pub fn parse_analysis(raw: &str) -> Result<super::Analysis, super::AgentError> {
    fn tagged<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let start = raw.find(&open)? + open.len();
        let end = raw[start..].find(&close)? + start;
        Some(raw[start..end].trim())
    }
    let whole = raw.trim();
    let guidance = tagged(raw, "guidance").unwrap_or(whole);
    let analysis = tagged(raw, "analysis").unwrap_or(whole);
    if guidance.is_empty() {
        return Err(super::AgentError::EmptyOutput);
    }
    Ok(super::Analysis { analysis: analysis.to_string(), guidance: guidance.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Prompt, PromptId};
    use proptest::prelude::*;

    fn prompt(n: u64, text: &str) -> Prompt {
        Prompt::seed(PromptId::from_counter(n), text).unwrap()
    }

    fn feedback(n: u64, guidance: &str) -> Feedback {
        Feedback {
            prompt_id: PromptId::from_counter(n),
            analysis: format!("analysis {n}"),
            guidance: guidance.into(),
            source_cluster_size: 2,
            source_sample_ids: vec![0, 1],
        }
    }

    #[test]
    fn predictor_render_contains_inputs_and_no_markers() {
        let t = Templates::default();
        let msg = t.render_predictor("Solve step by step.", "2+2?", TaskKind::Numeric);
        assert!(msg.contains("Solve step by step."));
        assert!(msg.contains("2+2?"));
        assert!(msg.contains(answer_format(TaskKind::Numeric)));
        assert!(!msg.contains("{question}") && !msg.contains("{prompt}"));
        assert_eq!(msg, t.render_predictor("Solve step by step.", "2+2?", TaskKind::Numeric));
    }

    #[test]
    fn substituted_values_are_not_expanded_again() {
        let t = Templates::default();
        let msg = t.render_predictor("use {question} literally", "Q", TaskKind::FreeText);
        assert!(msg.contains("use {question} literally"));
    }

    #[test]
    fn analyzer_render_lists_every_case() {
        let t = Templates::default();
        let cases = [
            ErrorCase { question: "q-one", gold: "g-one", predicted: "p-one" },
            ErrorCase { question: "q-two", gold: "g-two", predicted: "p-two" },
        ];
        let msg = t.render_analyzer("Be brief.", &cases);
        for s in ["Be brief.", "q-one", "g-one", "p-one", "q-two", "g-two", "p-two", "general"] {
            assert!(msg.contains(s), "missing {s}");
        }
        assert!(!msg.contains("{error_cases}"));
        assert_eq!(msg, t.render_analyzer("Be brief.", &cases));
    }

    #[test]
    fn generator_render_switches_on_mode() {
        let t = Templates::default();
        let (a, b) = (prompt(0, "parent alpha"), prompt(1, "parent beta"));
        let (fa, fb) = (feedback(0, "guide-a"), feedback(1, "guide-b"));
        let mut req = GenerationRequest {
            parent_a: &a,
            parent_b: &b,
            feedback_a: Some(&fa),
            feedback_b: Some(&fb),
            mode: MutationMode::Guided,
            variation: 0,
        };
        let guided = t.render_generator(&req);
        for s in ["parent alpha", "parent beta", "guide-a", "guide-b", PROMPT_OPEN, PROMPT_CLOSE] {
            assert!(guided.contains(s), "missing {s}");
        }
        req.mode = MutationMode::RandomMutation;
        let random = t.render_generator(&req);
        assert!(random.contains("parent alpha") && random.contains("parent beta"));
        assert!(random.contains(PROMPT_OPEN) && random.contains("rephrase"));
        assert!(!random.contains("guide-a") && !random.contains("guide-b"));
    }

    #[test]
    fn guided_render_without_feedback_uses_placeholder_text() {
        let t = Templates::default();
        let (a, b) = (prompt(0, "A"), prompt(1, "B"));
        let req = GenerationRequest {
            parent_a: &a,
            parent_b: &b,
            feedback_a: None,
            feedback_b: None,
            mode: MutationMode::Guided,
            variation: 0,
        };
        assert!(t.render_generator(&req).contains(NO_FEEDBACK));
    }

    #[test]
    fn parse_generated_prompt_rules() {
        assert_eq!(parse_generated_prompt("<prompt>Be precise.</prompt>").unwrap(), "Be precise.");
        assert_eq!(parse_generated_prompt("noise <prompt>A</prompt> tail <prompt>B</prompt>").unwrap(), "A");
        assert_eq!(parse_generated_prompt("  plain output \n").unwrap(), "plain output");
        assert!(parse_generated_prompt("   ").is_err());
        assert!(parse_generated_prompt("<prompt>  </prompt>").is_err());
    }

    #[test]
    fn parse_analysis_reads_tags_or_falls_back() {
        let a = parse_analysis("<analysis>x</analysis>\n<guidance>y</guidance>").unwrap();
        assert_eq!((a.analysis.as_str(), a.guidance.as_str()), ("x", "y"));
        let b = parse_analysis("just text").unwrap();
        assert_eq!(b.guidance, "just text");
        assert!(parse_analysis("<guidance> </guidance>").is_err());
    }

    #[test]
    fn templates_missing_placeholders_are_rejected() {
        let gen = include_str!("../../templates/generator.txt");
        let an = include_str!("../../templates/analyzer.txt");
        assert!(matches!(
            Templates::from_sources("{prompt} only", an, gen),
            Err(TemplateError::MissingPlaceholder { placeholder: "question", .. })
        ));
        assert!(matches!(
            Templates::from_sources("{prompt}{question}{answer_format}", an, "no sections"),
            Err(TemplateError::MissingSection)
        ));
    }

    #[test]
    fn load_dir_reads_custom_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("predictor.txt"), "P={prompt} Q={question} F={answer_format}").unwrap();
        std::fs::write(dir.path().join("analyzer.txt"), include_str!("../../templates/analyzer.txt")).unwrap();
        std::fs::write(dir.path().join("generator.txt"), include_str!("../../templates/generator.txt")).unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        assert_eq!(
            t.render_predictor("x", "y", TaskKind::FreeText),
            format!("P=x Q=y F={}", answer_format(TaskKind::FreeText))
        );
    }

    proptest! {
        #[test]
        fn predictor_render_is_injective_in_prompt(a in ".{1,40}", b in ".{1,40}", q in ".{1,20}") {
            prop_assume!(a != b);
            let t = Templates::default();
            prop_assert_ne!(
                t.render_predictor(&a, &q, TaskKind::Numeric),
                t.render_predictor(&b, &q, TaskKind::Numeric)
            );
        }
    }
}
