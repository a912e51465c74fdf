//! Prompt templates.
//!
//! Default templates are embedded at build time and can be overridden by
//! dropping a file with the same id into a template directory. Placeholders
//! use `{name}` syntax and are filled literally; fill order guarantees a
//! placeholder appearing inside a substituted value is never re-expanded.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Anchors shared between the default templates and the mock providers that
/// parse filled prompts. Mock routing assumes the default templates; custom
/// templates work with real backends but are invisible to the mocks.
pub mod anchors {
    pub const JUDGE_TASK: &str = "rate how well the provided passage supports it";
    pub const JUDGE_CONTEXT: &str = "**Original text**:\n";
    pub const JUDGE_CLAIMS: &str = "\n\n**Claims**:\n";
    pub const JUDGE_OUTPUT: &str = "\n\n**Output**:";
    pub const PARAPHRASE_HEAD: &str = "generate a paraphrased version";
    pub const PARAPHRASE_TEXT: &str = "text: ";
    pub const PARAPHRASE_TAIL: &str = "\n\nIn a new line return the anonymized text.";
    pub const SANITIZE_HEAD: &str = "You are an expert anonymizer";
    pub const SANITIZE_RECORD: &str = "Record:\n\n";
    pub const SANITIZE_TAIL: &str = "\n\nIn a first step briefly explain";
    pub const ATOMIZE_HEAD: &str = "Please breakdown the following input";
    pub const SUMMARIZE_HEAD: &str = "Summarize the following conversation";
    pub const SUMMARIZE_BODY: &str = "Conversation:\n";
    pub const SUMMARIZE_TAIL: &str = "\n\nSummary:";
    pub const COHERENCE_MEDQA: &str = "Medical Profile: ";
    pub const COHERENCE_WILDCHAT: &str = "quality of synthetic conversations";
    pub const MCQ_HEAD: &str = "Solve the following medical multiple choice question";
    pub const MCQ_QUESTION: &str = "Question:\n";
    pub const MCQ_OPTIONS: &str = "\nOptions:\n";
    pub const MCQ_TAIL: &str = "\n\nAnswer:";
    pub const CATEGORIZE_HEAD: &str = "identify segments containing sensitive information";
    pub const CATEGORIZE_INPUT: &str = "**Input**:\n";
    pub const WILDCHAT_TASKS_HEAD: &str = "Which tasks from the following list";
}

const DEFAULTS: &[(&str, &str)] = &[
    ("atomize", include_str!("../templates/atomize.txt")),
    ("atomize_icl", include_str!("../templates/atomize_icl.txt")),
    ("summarize", include_str!("../templates/summarize.txt")),
    ("paraphrase", include_str!("../templates/paraphrase.txt")),
    ("sanitize", include_str!("../templates/sanitize.txt")),
    ("judge", include_str!("../templates/judge.txt")),
    ("judge_icl", include_str!("../templates/judge_icl.txt")),
    ("coherence_medqa", include_str!("../templates/coherence_medqa.txt")),
    ("coherence_wildchat", include_str!("../templates/coherence_wildchat.txt")),
    ("utility_medqa", include_str!("../templates/utility_medqa.txt")),
    ("utility_wildchat", include_str!("../templates/utility_wildchat.txt")),
    ("categorize_medqa", include_str!("../templates/categorize_medqa.txt")),
    ("categorize_wildchat", include_str!("../templates/categorize_wildchat.txt")),
    (
        "adversarial_inference_medqa",
        include_str!("../templates/adversarial_inference_medqa.txt"),
    ),
    (
        "adversarial_inference_wildchat",
        include_str!("../templates/adversarial_inference_wildchat.txt"),
    ),
    (
        "sanitize_with_inference_medqa",
        include_str!("../templates/sanitize_with_inference_medqa.txt"),
    ),
    (
        "sanitize_with_inference_wildchat",
        include_str!("../templates/sanitize_with_inference_wildchat.txt"),
    ),
];

/// Registry of prompt templates by id.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        TemplateRegistry {
            templates: DEFAULTS
                .iter()
                .map(|(id, text)| (id.to_string(), text.to_string()))
                .collect(),
        }
    }
}

impl TemplateRegistry {
    /// Defaults plus overrides read from `dir` (`<id>.txt` files).
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self> {
        let mut registry = TemplateRegistry::default();
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            registry.templates.insert(id, text);
        }
        Ok(registry)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&str> {
        self.templates
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))
    }

    /// Fills `{name}` placeholders. Unknown placeholders are left verbatim so
    /// template bugs surface in prompts instead of panicking mid-run.
    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> Result<String> {
        let template = self.get(id)?;
        Ok(fill(template, vars))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }
}

/// Single-pass placeholder substitution.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        let (head, tail) = rest.split_at(open);
        out.push_str(head);
        if let Some(close) = tail.find('}') {
            let name = &tail[1..close];
            for (key, value) in vars {
                if *key == name {
                    out.push_str(value);
                    rest = &tail[close + 1..];
                    continue 'outer;
                }
            }
        }
        // No matching variable: emit the brace and move on.
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}
