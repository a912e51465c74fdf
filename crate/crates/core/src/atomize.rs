//! Decomposes records into atomic claims (decompose-then-verify).
//!
//! The primary path prompts a chat backend with the atomizer template; the
//! deterministic sentence splitter doubles as the offline substitute and as
//! the per-record fallback when a completion comes back empty.
//! Conversation-shaped records (those carrying a category) are summarized
//! before atomization so verbose assistant turns do not dominate the claim
//! set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest};

/// Address of one claim: (record id, dense index within the record).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClaimRef {
    pub record_id: String,
    pub index: u32,
}

/// One atomic statement extracted from a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub record_id: String,
    pub index: u32,
    pub text: String,
}

impl Claim {
    pub fn claim_ref(&self) -> ClaimRef {
        ClaimRef {
            record_id: self.record_id.clone(),
            index: self.index,
        }
    }
}

/// All claims of a dataset, grouped by record in record order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomizedDataset {
    pub dataset_name: String,
    pub claims: Vec<Claim>,
}

impl AtomizedDataset {
    /// Claims of one record, in index order.
    pub fn record_claims(&self, record_id: &str) -> Vec<&Claim> {
        self.claims
            .iter()
            .filter(|c| c.record_id == record_id)
            .collect()
    }

    pub fn record_claim_texts(&self, record_id: &str) -> Vec<String> {
        self.record_claims(record_id)
            .into_iter()
            .map(|c| c.text.clone())
            .collect()
    }
}

/// How claims are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomizerKind {
    /// Deterministic sentence splitting; no backend needed.
    SentenceFallback,
    /// Atomizer prompt against a chat backend, falling back to sentence
    /// splitting per record on empty completions.
    Llm,
}

#[derive(Debug, Clone)]
pub struct AtomizeOptions {
    pub kind: AtomizerKind,
    pub template: String,
    pub icl_template: String,
    pub summarize_template: String,
}

impl Default for AtomizeOptions {
    fn default() -> Self {
        AtomizeOptions {
            kind: AtomizerKind::SentenceFallback,
            template: "atomize".into(),
            icl_template: "atomize_icl".into(),
            summarize_template: "summarize".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AtomizeOutcome {
    pub atomized: AtomizedDataset,
    /// Summaries produced for conversation records, keyed by record id.
    pub summaries: BTreeMap<String, String>,
    /// Records that needed a fallback (empty completion or summary failure).
    pub flagged: Vec<String>,
}

/// Splits text into sentences on `.`, `!`, `?` followed by whitespace (or
/// end of input). A period after a mid-sentence single letter (an initial,
/// "John F. Kennedy") does not split; decimals never split because the
/// period is not followed by whitespace.
pub fn sentence_fallback(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let ch = chars[i];
        if ch == '.' || ch == '!' || ch == '?' {
            let at_end = i + 1 == chars.len();
            let followed_by_space = !at_end && chars[i + 1].is_whitespace();
            if (at_end || followed_by_space) && !(ch == '.' && protected_initial(&chars, start, i))
            {
                let sentence: String = chars[start..=i].iter().collect();
                let sentence = sentence.trim();
                if !sentence.is_empty() {
                    sentences.push(sentence.to_string());
                }
                start = i + 1;
            }
        }
        i += 1;
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let tail = tail.trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

/// True when the period at `dot` directly follows a single alphabetic
/// character that is not the first token of the current sentence.
fn protected_initial(chars: &[char], sentence_start: usize, dot: usize) -> bool {
    let mut run_start = dot;
    while run_start > sentence_start && chars[run_start - 1].is_alphanumeric() {
        run_start -= 1;
    }
    let run_len = dot - run_start;
    if run_len != 1 || !chars[run_start].is_alphabetic() {
        return false;
    }
    chars[sentence_start..run_start]
        .iter()
        .any(|c| c.is_alphanumeric())
}

/// Prompts the atomizer template and returns one claim per completion line;
/// blank lines are dropped. An all-blank completion is an error so the
/// caller can fall back per record.
pub fn atomize_document(
    text: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    options: &AtomizeOptions,
) -> Result<Vec<String>> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot atomize empty text".into()));
    }
    let icl = registry.get(&options.icl_template)?;
    let prompt = registry.render(
        &options.template,
        &[("icl_samples", icl), ("document", text)],
    )?;
    let completion = chat.chat(&ChatRequest::new("", prompt))?;
    let claims = completion_to_claims(&completion);
    if claims.is_empty() {
        return Err(Error::BadReply(
            "atomizer completion had no nonempty lines".into(),
        ));
    }
    Ok(claims)
}

fn completion_to_claims(completion: &str) -> Vec<String> {
    completion
        .lines()
        .map(normalize_claim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Claims are single statements with no newlines; whitespace runs collapse
/// to single spaces.
fn normalize_claim(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Summarizes a conversation before atomization. Turns are lines prefixed
/// `USER:` / `ASSISTANT:`; empty assistant turns are stripped before
/// prompting. On backend failure the original text is used and the record
/// flagged by the caller.
pub fn summarize_conversation(
    text: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    template: &str,
) -> Result<String> {
    let cleaned = strip_empty_turns(text);
    let prompt = registry.render(template, &[("document", &cleaned)])?;
    let summary = chat.chat(&ChatRequest::new("", prompt))?;
    let summary = summary.trim().to_string();
    if summary.is_empty() {
        return Err(Error::BadReply("empty summary".into()));
    }
    Ok(summary)
}

/// Drops `USER:`/`ASSISTANT:` turns with no content.
pub fn strip_empty_turns(text: &str) -> String {
    text.lines()
        .filter(|line| {
            let trimmed = line.trim();
            for prefix in ["USER:", "ASSISTANT:"] {
                if let Some(body) = trimmed.strip_prefix(prefix) {
                    return !body.trim().is_empty();
                }
            }
            !trimmed.is_empty()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Atomizes a whole dataset. Parallel per record; output preserves record
/// order and claim indices are dense per record.
pub fn atomize_dataset(
    dataset: &Dataset,
    chat: Option<&ChatProvider>,
    registry: &TemplateRegistry,
    options: &AtomizeOptions,
) -> Result<AtomizeOutcome> {
    let per_record: Vec<(usize, Result<RecordAtoms>)> = dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(pos, record)| (pos, atomize_record(record, chat, registry, options)))
        .collect();

    let mut claims = Vec::new();
    let mut summaries = BTreeMap::new();
    let mut flagged = Vec::new();
    let mut ordered: Vec<_> = per_record.into_iter().collect();
    ordered.sort_by_key(|(pos, _)| *pos);
    for (_, outcome) in ordered {
        let atoms = outcome?;
        if atoms.fallback_used {
            flagged.push(atoms.record_id.clone());
        }
        if let Some(summary) = atoms.summary {
            summaries.insert(atoms.record_id.clone(), summary);
        }
        for (index, text) in atoms.claims.into_iter().enumerate() {
            claims.push(Claim {
                record_id: atoms.record_id.clone(),
                index: index as u32,
                text,
            });
        }
    }
    Ok(AtomizeOutcome {
        atomized: AtomizedDataset {
            dataset_name: dataset.name.clone(),
            claims,
        },
        summaries,
        flagged,
    })
}

struct RecordAtoms {
    record_id: String,
    claims: Vec<String>,
    summary: Option<String>,
    fallback_used: bool,
}

fn atomize_record(
    record: &crate::corpus::Record,
    chat: Option<&ChatProvider>,
    registry: &TemplateRegistry,
    options: &AtomizeOptions,
) -> Result<RecordAtoms> {
    let mut fallback_used = false;
    let mut summary = None;

    if record.text.is_empty() {
        // Legal only for no-private-data records; they contribute no claims.
        return Ok(RecordAtoms {
            record_id: record.id.clone(),
            claims: Vec::new(),
            summary: None,
            fallback_used: false,
        });
    }

    let mut source_text = record.text.clone();
    if record.is_conversation() {
        match chat {
            Some(chat) => {
                match summarize_conversation(&record.text, chat, registry, &options.summarize_template)
                {
                    Ok(s) => {
                        source_text = s.clone();
                        summary = Some(s);
                    }
                    Err(_) => fallback_used = true,
                }
            }
            None => fallback_used = true,
        }
    }

    let claims = match (options.kind, chat) {
        (AtomizerKind::Llm, Some(chat)) => {
            match atomize_document(&source_text, chat, registry, options) {
                Ok(claims) => claims,
                Err(_) => {
                    fallback_used = true;
                    fallback_claims(&source_text)
                }
            }
        }
        (AtomizerKind::Llm, None) => {
            fallback_used = true;
            fallback_claims(&source_text)
        }
        (AtomizerKind::SentenceFallback, _) => fallback_claims(&source_text),
    };

    if claims.is_empty() {
        return Err(Error::InvalidRecord {
            id: record.id.clone(),
            message: "record with nonempty text produced no claims".into(),
        });
    }

    Ok(RecordAtoms {
        record_id: record.id.clone(),
        claims,
        summary,
        fallback_used,
    })
}

fn fallback_claims(text: &str) -> Vec<String> {
    let sentences = sentence_fallback(text);
    if sentences.is_empty() && !text.trim().is_empty() {
        return vec![normalize_claim(text)];
    }
    sentences.into_iter().map(|s| normalize_claim(&s)).collect()
}
