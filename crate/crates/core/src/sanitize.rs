//! Sanitizers: native baselines, prompt-driven rewriting, and import of
//! externally sanitized datasets.
//!
//! The regex masker stands in for commercial PII scrubbers: every detected
//! span is replaced by `*` repeated to the span's character length, so
//! masked text keeps its length and unmasked bytes are untouched. Detected
//! spans are recorded for the PII-existence metric.

use std::path::PathBuf;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, Dataset, DatasetRole, Record};
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest};

/// One detected PII span, byte-addressed into the original record text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiSpan {
    pub record_id: String,
    pub start: usize,
    pub end: usize,
    pub kind: String,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectedSpan {
    pub start: usize,
    pub end: usize,
    pub kind: &'static str,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskResult {
    pub masked: String,
    pub spans: Vec<DetectedSpan>,
}

struct PiiPattern {
    kind: &'static str,
    regex: Regex,
}

fn patterns() -> &'static [PiiPattern] {
    static PATTERNS: OnceLock<Vec<PiiPattern>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let compile = |kind: &'static str, pattern: &str| PiiPattern {
            kind,
            regex: Regex::new(pattern).expect("pattern set is static"),
        };
        vec![
            compile("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
            compile("url", r"https?://[^\s]+"),
            compile(
                "phone",
                r"\(\d{3}\)\s?\d{3}[-. ]\d{4}|\b\d{3}[-.]\d{3}[-.]\d{4}\b",
            ),
            compile(
                "date",
                r"\b\d{1,4}[/-]\d{1,2}[/-]\d{1,4}\b|\b(?:January|February|March|April|May|June|July|August|September|October|November|December)\s+\d{1,2},?\s+\d{4}\b",
            ),
            compile("age", r"\b\d{1,3}[- ]year[- ]old\b"),
            compile(
                "name",
                r"\b(?:Dr|Mr|Mrs|Ms|Prof)\.?\s+[A-Z][a-z]+(?:\s+[A-Z][a-z]+)?",
            ),
            compile("id", r"\b\d{5,}\b"),
        ]
    })
}

/// Runs the shipped pattern set. Overlapping matches are merged; the merged
/// span keeps the kind of the earliest match.
pub fn detect_pii(text: &str) -> Vec<DetectedSpan> {
    let mut raw: Vec<DetectedSpan> = Vec::new();
    for pattern in patterns() {
        for m in pattern.regex.find_iter(text) {
            raw.push(DetectedSpan {
                start: m.start(),
                end: m.end(),
                kind: pattern.kind,
                surface: m.as_str().to_string(),
            });
        }
    }
    raw.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<DetectedSpan> = Vec::new();
    for span in raw {
        match merged.last_mut() {
            Some(last) if span.start < last.end => {
                if span.end > last.end {
                    last.end = span.end;
                    last.surface = text[last.start..last.end].to_string();
                }
            }
            _ => merged.push(span),
        }
    }
    merged
}

/// Masks every detected span with `*` per character.
pub fn mask_pii(text: &str) -> MaskResult {
    let spans = detect_pii(text);
    let mut masked = String::with_capacity(text.len());
    let mut cursor = 0usize;
    for span in &spans {
        masked.push_str(&text[cursor..span.start]);
        for _ in text[span.start..span.end].chars() {
            masked.push('*');
        }
        cursor = span.end;
    }
    masked.push_str(&text[cursor..]);
    MaskResult { masked, spans }
}

/// Native and imported sanitization methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanitizeMethod {
    Passthrough,
    NoPrivateData,
    RegexPiiMask,
    LlmSanitize,
    LlmSanitizeParaphrase,
    ExternalImport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanitizerConfig {
    /// Report row name, e.g. "no_sanitization".
    pub name: String,
    pub method: SanitizeMethod,
    /// Required for external_import.
    #[serde(default)]
    pub import_path: Option<PathBuf>,
    #[serde(default = "default_sanitize_template")]
    pub sanitize_template: String,
    #[serde(default = "default_paraphrase_template")]
    pub paraphrase_template: String,
}

fn default_sanitize_template() -> String {
    "sanitize".into()
}

fn default_paraphrase_template() -> String {
    "paraphrase".into()
}

impl SanitizerConfig {
    pub fn native(name: impl Into<String>, method: SanitizeMethod) -> Self {
        SanitizerConfig {
            name: name.into(),
            method,
            import_path: None,
            sanitize_template: default_sanitize_template(),
            paraphrase_template: default_paraphrase_template(),
        }
    }

    pub fn import(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        SanitizerConfig {
            name: name.into(),
            method: SanitizeMethod::ExternalImport,
            import_path: Some(path.into()),
            sanitize_template: default_sanitize_template(),
            paraphrase_template: default_paraphrase_template(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == SanitizeMethod::ExternalImport && self.import_path.is_none() {
            return Err(Error::Config(format!(
                "sanitizer {:?} is external_import but has no import path",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SanitizeOutcome {
    pub dataset: Dataset,
    /// Detected spans per record; populated by the regex masker.
    pub pii_spans: Vec<PiiSpan>,
    /// Records that needed a fallback.
    pub flagged: Vec<String>,
}

const SANITIZE_ATTEMPTS: u32 = 3; // initial ask + 2 re-asks

/// Produces the sanitized dataset for one method.
pub fn sanitize(
    dataset: &Dataset,
    config: &SanitizerConfig,
    chat: Option<&ChatProvider>,
    registry: &TemplateRegistry,
) -> Result<SanitizeOutcome> {
    config.validate()?;
    if dataset.role != DatasetRole::Original {
        return Err(Error::InvalidInput(
            "sanitize expects the original dataset".into(),
        ));
    }
    if config.method == SanitizeMethod::ExternalImport {
        let path = config.import_path.as_ref().expect("validated");
        let mut imported = load_dataset(path, DatasetRole::Sanitized)?;
        imported.name = config.name.clone();
        return Ok(SanitizeOutcome {
            dataset: imported,
            pii_spans: Vec::new(),
            flagged: Vec::new(),
        });
    }

    let per_record: Vec<(usize, Result<SanitizedRecord>)> = dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(pos, record)| (pos, sanitize_record(record, config, chat, registry)))
        .collect();

    let mut records = Vec::with_capacity(dataset.len());
    let mut pii_spans = Vec::new();
    let mut flagged = Vec::new();
    let mut ordered: Vec<_> = per_record.into_iter().collect();
    ordered.sort_by_key(|(pos, _)| *pos);
    for (_, item) in ordered {
        let item = item?;
        if item.flagged {
            flagged.push(item.record.id.clone());
        }
        pii_spans.extend(item.spans);
        records.push(item.record);
    }
    Ok(SanitizeOutcome {
        dataset: Dataset::new(config.name.clone(), DatasetRole::Sanitized, records)?,
        pii_spans,
        flagged,
    })
}

struct SanitizedRecord {
    record: Record,
    spans: Vec<PiiSpan>,
    flagged: bool,
}

fn sanitize_record(
    record: &Record,
    config: &SanitizerConfig,
    chat: Option<&ChatProvider>,
    registry: &TemplateRegistry,
) -> Result<SanitizedRecord> {
    let mut out = record.clone();
    let mut spans = Vec::new();
    let mut flagged = false;
    match config.method {
        SanitizeMethod::Passthrough => {}
        SanitizeMethod::NoPrivateData => {
            out.text = String::new();
            out.no_private_data = true;
        }
        SanitizeMethod::RegexPiiMask => {
            let result = mask_pii(&record.text);
            out.text = result.masked;
            spans = result
                .spans
                .into_iter()
                .map(|s| PiiSpan {
                    record_id: record.id.clone(),
                    start: s.start,
                    end: s.end,
                    kind: s.kind.to_string(),
                    surface: s.surface,
                })
                .collect();
        }
        SanitizeMethod::LlmSanitize | SanitizeMethod::LlmSanitizeParaphrase => {
            let chat = chat.ok_or_else(|| {
                Error::Config("llm sanitizer needs a chat backend".into())
            })?;
            match llm_sanitize_text(&record.text, config, chat, registry)? {
                LlmSanitized::Clean { text, audit } => {
                    out.extra
                        .insert("sanitizer_audit".into(), serde_json::Value::String(audit));
                    let mut text = text;
                    if config.method == SanitizeMethod::LlmSanitizeParaphrase {
                        match paraphrase_document(&text, config, chat, registry) {
                            Ok(p) => text = p,
                            Err(_) => flagged = true,
                        }
                    }
                    out.text = text;
                }
                LlmSanitized::FellBack => {
                    flagged = true;
                    let result = mask_pii(&record.text);
                    out.text = result.masked;
                    spans = result
                        .spans
                        .into_iter()
                        .map(|s| PiiSpan {
                            record_id: record.id.clone(),
                            start: s.start,
                            end: s.end,
                            kind: s.kind.to_string(),
                            surface: s.surface,
                        })
                        .collect();
                }
            }
        }
        SanitizeMethod::ExternalImport => unreachable!("handled by sanitize()"),
    }
    if out.text.is_empty() && !out.no_private_data {
        // An LLM may legitimately empty a record; keep it representable.
        out.no_private_data = true;
        flagged = true;
    }
    Ok(SanitizedRecord {
        record: out,
        spans,
        flagged,
    })
}

enum LlmSanitized {
    Clean { text: String, audit: String },
    FellBack,
}

fn llm_sanitize_text(
    text: &str,
    config: &SanitizerConfig,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
) -> Result<LlmSanitized> {
    let prompt = registry.render(&config.sanitize_template, &[("document", text)])?;
    for attempt in 0..SANITIZE_ATTEMPTS {
        let req = ChatRequest::new("", prompt.clone()).with_sample_index(attempt);
        let Ok(completion) = chat.chat(&req) else {
            continue;
        };
        if let Some(clean) = text_after_separator(&completion) {
            return Ok(LlmSanitized::Clean {
                text: clean,
                audit: completion,
            });
        }
    }
    Ok(LlmSanitized::FellBack)
}

/// The anonymizer contract: explanation, a line holding a single `#`, then
/// the sanitized text.
fn text_after_separator(completion: &str) -> Option<String> {
    let mut lines = completion.lines();
    for line in lines.by_ref() {
        if line.trim() == "#" {
            let rest: Vec<&str> = lines.collect();
            let text = rest.join("\n").trim().to_string();
            return (!text.is_empty()).then_some(text);
        }
    }
    None
}

fn paraphrase_document(
    text: &str,
    config: &SanitizerConfig,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
) -> Result<String> {
    let prompt = registry.render(&config.paraphrase_template, &[("document", text)])?;
    let reply = chat.chat(&ChatRequest::new("", prompt))?;
    let reply = reply.trim().to_string();
    if reply.is_empty() {
        return Err(Error::BadReply("empty paraphrase".into()));
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mocks::{MockSuite, ScriptedChat};
    use std::sync::Arc;

    fn dataset(texts: &[&str]) -> Dataset {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Record::new(format!("r{i}"), *t))
            .collect();
        Dataset::new("orig", DatasetRole::Original, records).unwrap()
    }

    #[test]
    fn passthrough_is_identity_on_texts() {
        let ds = dataset(&["first text", "second text"]);
        let out = sanitize(
            &ds,
            &SanitizerConfig::native("none", SanitizeMethod::Passthrough),
            None,
            &TemplateRegistry::default(),
        )
        .unwrap();
        assert_eq!(out.dataset.records[0].text, "first text");
        assert_eq!(out.dataset.records[1].text, "second text");
        assert_eq!(out.dataset.role, DatasetRole::Sanitized);
    }

    #[test]
    fn regex_mask_hits_name_date_email() {
        let result = mask_pii("Dr. Alice Smith, 03/04/1989, alice@x.org");
        let kinds: Vec<&str> = result.spans.iter().map(|s| s.kind).collect();
        assert!(kinds.contains(&"name"), "{kinds:?}");
        assert!(kinds.contains(&"date"), "{kinds:?}");
        assert!(kinds.contains(&"email"), "{kinds:?}");
        assert!(!result.masked.contains("Alice"));
        assert!(!result.masked.contains("1989"));
        assert!(!result.masked.contains("alice@x.org"));
    }

    #[test]
    fn mask_preserves_length_and_unmasked_bytes() {
        let text = "A 23-year-old farmer called (206) 555-0134 about MRN 4821937.";
        let result = mask_pii(text);
        assert_eq!(result.masked.chars().count(), text.chars().count());
        let orig: Vec<char> = text.chars().collect();
        let masked: Vec<char> = result.masked.chars().collect();
        for (o, m) in orig.iter().zip(&masked) {
            assert!(*m == '*' || m == o);
        }
        assert!(result.spans.iter().any(|s| s.kind == "age"));
        assert!(result.spans.iter().any(|s| s.kind == "phone"));
        assert!(result.spans.iter().any(|s| s.kind == "id"));
    }

    #[test]
    fn vitals_ratios_are_not_masked() {
        let text = "Blood pressure is 103/73 mm Hg and pulse is 116/min.";
        let result = mask_pii(text);
        assert!(result.spans.is_empty(), "{:?}", result.spans);
        assert_eq!(result.masked, text);
    }

    #[test]
    fn urls_are_masked() {
        let result = mask_pii("Records were uploaded to https://portal.example.org/chart yesterday.");
        assert!(result.spans.iter().any(|s| s.kind == "url"));
        assert!(!result.masked.contains("portal.example.org"));
    }

    #[test]
    fn llm_sanitize_separator_contract() {
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec![
            "changes: generalized the name\n#\nCLEAN".into(),
        ])));
        let ds = dataset(&["some text"]);
        let out = sanitize(
            &ds,
            &SanitizerConfig::native("llm", SanitizeMethod::LlmSanitize),
            Some(&chat),
            &TemplateRegistry::default(),
        )
        .unwrap();
        assert_eq!(out.dataset.records[0].text, "CLEAN");
        assert!(out.dataset.records[0].extra.contains_key("sanitizer_audit"));
        assert!(out.flagged.is_empty());
    }

    #[test]
    fn missing_separator_falls_back_to_mask() {
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec![
            "no separator at all".into(),
        ])));
        let ds = dataset(&["Dr. Alice Smith visited on 03/04/1989."]);
        let out = sanitize(
            &ds,
            &SanitizerConfig::native("llm", SanitizeMethod::LlmSanitize),
            Some(&chat),
            &TemplateRegistry::default(),
        )
        .unwrap();
        assert_eq!(out.flagged, vec!["r0".to_string()]);
        assert!(!out.dataset.records[0].text.contains("Alice"));
        assert!(!out.pii_spans.is_empty());
    }

    #[test]
    fn no_private_data_keeps_task_metadata() {
        let mut record = Record::new("r0", "private profile");
        record.question = Some("What is the diagnosis?".into());
        let ds = Dataset::new("orig", DatasetRole::Original, vec![record]).unwrap();
        let out = sanitize(
            &ds,
            &SanitizerConfig::native("empty", SanitizeMethod::NoPrivateData),
            None,
            &TemplateRegistry::default(),
        )
        .unwrap();
        assert!(out.dataset.records[0].text.is_empty());
        assert!(out.dataset.records[0].no_private_data);
        assert!(out.dataset.records[0].question.is_some());
    }

    #[test]
    fn mock_suite_sanitize_masks_behind_separator() {
        let chat = ChatProvider::new(Arc::new(MockSuite::default()));
        let ds = dataset(&["Dr. Alice Smith saw a 23-year-old farmer."]);
        let out = sanitize(
            &ds,
            &SanitizerConfig::native("llm", SanitizeMethod::LlmSanitize),
            Some(&chat),
            &TemplateRegistry::default(),
        )
        .unwrap();
        assert!(!out.dataset.records[0].text.contains("Alice"));
        assert!(!out.dataset.records[0].text.contains("23-year-old"));
        assert!(out.flagged.is_empty());
    }

    #[test]
    fn permuting_records_permutes_outputs() {
        let ds1 = dataset(&["alpha text", "beta text"]);
        let mut records = ds1.records.clone();
        records.reverse();
        let ds2 = Dataset::new("orig", DatasetRole::Original, records).unwrap();
        let config = SanitizerConfig::native("mask", SanitizeMethod::RegexPiiMask);
        let registry = TemplateRegistry::default();
        let out1 = sanitize(&ds1, &config, None, &registry).unwrap();
        let out2 = sanitize(&ds2, &config, None, &registry).unwrap();
        assert_eq!(out1.dataset.records[0], out2.dataset.records[1]);
        assert_eq!(out1.dataset.records[1], out2.dataset.records[0]);
    }
}
