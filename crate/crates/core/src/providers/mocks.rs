//! Deterministic offline backends.
//!
//! Every mock is a pure function of its request, so pipeline runs against
//! them are reproducible byte for byte. [`MockSuite`] recognizes the default
//! prompt templates by their anchors and plays the matching role (judge,
//! paraphraser, sanitizer, ...); anything unrecognized is echoed.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::prompts::anchors;
use crate::rng::fnv1a64;
use crate::text::{content_tokens, tokenize};

use super::{ChatBackend, ChatRequest, EmbedBackend, EmbedRequest};

/// Echoes the prompt back.
#[derive(Debug, Default)]
pub struct EchoChat;

impl ChatBackend for EchoChat {
    fn name(&self) -> &str {
        "echo"
    }
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        Ok(req.prompt.clone())
    }
}

/// Replays canned completions in order; repeats the final one when the
/// script runs out. Useful for exercising re-ask paths.
pub struct ScriptedChat {
    replies: Mutex<Vec<String>>,
    cursor: AtomicU64,
}

impl ScriptedChat {
    pub fn new(replies: Vec<String>) -> Self {
        ScriptedChat {
            replies: Mutex::new(replies),
            cursor: AtomicU64::new(0),
        }
    }
}

impl ChatBackend for ScriptedChat {
    fn name(&self) -> &str {
        "scripted"
    }
    fn complete(&self, _req: &ChatRequest) -> Result<String> {
        let replies = self.replies.lock().unwrap();
        if replies.is_empty() {
            return Err(Error::BadReply("scripted backend has no replies".into()));
        }
        let idx = self.cursor.fetch_add(1, Ordering::SeqCst) as usize;
        Ok(replies[idx.min(replies.len() - 1)].clone())
    }
}

/// Counts delegated calls; lets tests assert zero network activity on a
/// warmed cache.
pub struct CountingChat<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B> CountingChat<B> {
    pub fn new(inner: B) -> Self {
        CountingChat {
            inner,
            calls: AtomicU64::new(0),
        }
    }
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CountingChat<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Fails the first `n` calls, then delegates. For retry-path tests.
pub struct FlakyChat<B> {
    inner: B,
    remaining_failures: AtomicU64,
}

impl<B> FlakyChat<B> {
    pub fn new(inner: B, failures: u64) -> Self {
        FlakyChat {
            inner,
            remaining_failures: AtomicU64::new(failures),
        }
    }
}

impl<B: ChatBackend> ChatBackend for FlakyChat<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let remaining = self.remaining_failures.load(Ordering::SeqCst);
        if remaining > 0 {
            self.remaining_failures.store(remaining - 1, Ordering::SeqCst);
            return Err(Error::BadReply("simulated transient failure".into()));
        }
        self.inner.complete(req)
    }
}

/// The oracle rating rule: 1 when the claim occurs verbatim (case-folded)
/// in the passage, 2 when at least 60% of its content tokens occur, else 3.
pub fn oracle_rating(claim: &str, passage: &str) -> u8 {
    let needle = claim.trim().to_lowercase();
    if !needle.is_empty() && passage.to_lowercase().contains(&needle) {
        return 1;
    }
    let content = content_tokens(claim);
    if content.is_empty() {
        return 3;
    }
    let passage_tokens: BTreeSet<String> = tokenize(passage).into_iter().collect();
    let hits = content
        .iter()
        .filter(|t| passage_tokens.contains(t.as_str()))
        .count();
    if hits as f64 / content.len() as f64 >= 0.6 {
        2
    } else {
        3
    }
}

/// Substring-oracle judge: parses the default judge prompt and rates each
/// claim with [`oracle_rating`].
#[derive(Debug, Default)]
pub struct OracleJudgeChat;

impl ChatBackend for OracleJudgeChat {
    fn name(&self) -> &str {
        "oracle-judge"
    }
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        judge_reply(&req.prompt)
            .ok_or_else(|| Error::BadReply("prompt does not match the judge template".into()))
    }
}

fn judge_reply(prompt: &str) -> Option<String> {
    // rfind: the few-shot block contains the same markers.
    let ctx_start = prompt.rfind(anchors::JUDGE_CONTEXT)? + anchors::JUDGE_CONTEXT.len();
    let rest = &prompt[ctx_start..];
    let ctx_end = rest.find(anchors::JUDGE_CLAIMS)?;
    let passage = &rest[..ctx_end];
    let claims_block = &rest[ctx_end + anchors::JUDGE_CLAIMS.len()..];
    let claims_block = claims_block
        .split(anchors::JUDGE_OUTPUT)
        .next()
        .unwrap_or(claims_block);
    let mut out = String::new();
    for line in claims_block.lines() {
        if let Some((n, text)) = parse_claim_line(line) {
            let rating = oracle_rating(text, passage);
            out.push_str(&format!("- Claim {n}: Rating: {rating}\n"));
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Parses "- Claim N: text" lines.
pub(crate) fn parse_claim_line(line: &str) -> Option<(usize, &str)> {
    let rest = line.trim_start().strip_prefix("- Claim ")?;
    let colon = rest.find(':')?;
    let n: usize = rest[..colon].trim().parse().ok()?;
    Some((n, rest[colon + 1..].trim()))
}

/// Deterministic rewording paraphraser: substitutes words through a fixed
/// table, which is enough to perturb n-gram overlap without touching the
/// substance the judge looks for.
#[derive(Debug, Default)]
pub struct RewordChat;

const REWORDS: &[(&str, &str)] = &[
    ("is", "remains"),
    ("are", "appear"),
    ("has", "carries"),
    ("have", "carry"),
    ("shows", "demonstrates"),
    ("show", "demonstrate"),
    ("reveals", "uncovers"),
    ("reveal", "uncover"),
    ("reports", "describes"),
    ("report", "describe"),
    ("presents", "arrives"),
    ("comes", "arrives"),
    ("significant", "notable"),
    ("abnormalities", "irregularities"),
    ("examination", "assessment"),
    ("patient", "individual"),
    ("denies", "disputes"),
    ("severe", "intense"),
    ("began", "started"),
    ("normal", "unremarkable"),
];

/// Applies the rewording table to one text.
pub fn reword(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if word.is_empty() {
            return;
        }
        let lower = word.to_lowercase();
        if let Some((_, replacement)) = REWORDS.iter().find(|(k, _)| *k == lower) {
            if word.chars().next().is_some_and(|c| c.is_uppercase()) {
                let mut chars = replacement.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push_str(replacement);
            }
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for ch in text.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

impl ChatBackend for RewordChat {
    fn name(&self) -> &str {
        "reword"
    }
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let doc = extract_paraphrase_document(&req.prompt).unwrap_or(&req.prompt);
        Ok(reword(doc))
    }
}

/// The full paraphrase perturbation: synonym substitution plus a
/// deterministic word interleave. Token content survives (so bag-of-words
/// retrieval and the coverage-based judge still see the same information)
/// while word order and n-grams do not, mirroring how heavily a real
/// paraphrase rewrites surface form.
pub fn shuffle_paraphrase(text: &str) -> String {
    let reworded = reword(text);
    let words: Vec<&str> = reworded.split_whitespace().collect();
    if words.len() < 4 {
        return reworded;
    }
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    for offset in [1, 2, 0] {
        out.extend(words.iter().skip(offset).step_by(3));
    }
    out.join(" ")
}

fn extract_paraphrase_document(prompt: &str) -> Option<&str> {
    let start = prompt.find(anchors::PARAPHRASE_TEXT)? + anchors::PARAPHRASE_TEXT.len();
    let end = prompt.rfind(anchors::PARAPHRASE_TAIL)?;
    (start <= end).then(|| &prompt[start..end])
}

fn extract_between<'a>(prompt: &'a str, head: &str, tail: &str) -> Option<&'a str> {
    let start = prompt.rfind(head)? + head.len();
    let rest = &prompt[start..];
    let end = rest.find(tail)?;
    Some(&rest[..end])
}

/// Routes filled default templates to role-appropriate deterministic
/// behavior; unrecognized prompts are echoed. Paraphrase prompts go through
/// the rewording table, modeling the lexical perturbation auxiliary
/// information picks up in transit; [`MockSuite::with_identity_paraphrase`]
/// turns that off.
#[derive(Debug, Default)]
pub struct MockSuite {
    identity_paraphrase: bool,
}

impl MockSuite {
    pub fn with_identity_paraphrase() -> Self {
        MockSuite {
            identity_paraphrase: true,
        }
    }
}

impl ChatBackend for MockSuite {
    fn name(&self) -> &str {
        if self.identity_paraphrase {
            "mock-suite-identity"
        } else {
            "mock-suite"
        }
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.prompt.as_str();
        if prompt.contains(anchors::JUDGE_TASK) {
            return judge_reply(prompt)
                .ok_or_else(|| Error::BadReply("judge prompt missing claims".into()));
        }
        if prompt.contains(anchors::PARAPHRASE_HEAD) {
            let doc = extract_paraphrase_document(prompt)
                .ok_or_else(|| Error::BadReply("paraphrase prompt missing text".into()))?;
            let doc = doc.trim();
            return Ok(if self.identity_paraphrase {
                doc.to_string()
            } else {
                shuffle_paraphrase(doc)
            });
        }
        if prompt.contains(anchors::SANITIZE_HEAD) {
            let doc = extract_between(prompt, anchors::SANITIZE_RECORD, anchors::SANITIZE_TAIL)
                .ok_or_else(|| Error::BadReply("sanitize prompt missing record".into()))?;
            let masked = crate::sanitize::mask_pii(doc).masked;
            return Ok(format!("masked detected identifiers\n#\n{masked}"));
        }
        if prompt.contains(anchors::ATOMIZE_HEAD) {
            let doc = prompt.rsplit("\n\n").next().unwrap_or("").trim();
            let sentences = crate::atomize::sentence_fallback(doc);
            return Ok(sentences.join("\n"));
        }
        if prompt.contains(anchors::SUMMARIZE_HEAD) {
            let body = extract_between(prompt, anchors::SUMMARIZE_BODY, anchors::SUMMARIZE_TAIL)
                .ok_or_else(|| Error::BadReply("summarize prompt missing body".into()))?;
            return Ok(body.trim().to_string());
        }
        if prompt.contains(anchors::MCQ_HEAD) {
            return Ok(mcq_reply(prompt));
        }
        if prompt.contains(anchors::COHERENCE_MEDQA) || prompt.contains(anchors::COHERENCE_WILDCHAT)
        {
            let doc = prompt
                .rsplit_once(anchors::COHERENCE_MEDQA)
                .or_else(|| prompt.rsplit_once("Conversation: "))
                .map(|(_, d)| d)
                .unwrap_or("");
            // Redaction residue and thin content read as damaged text.
            let rating = if content_tokens(doc).len() < 10 {
                2
            } else if doc.contains('*') || content_tokens(doc).len() < 25 {
                3
            } else {
                4
            };
            return Ok(format!(
                "Explanation: the text presents its content clearly.\nRating: {rating}"
            ));
        }
        if prompt.contains(anchors::CATEGORIZE_HEAD) {
            return Ok(categorize_reply(prompt));
        }
        if prompt.contains(anchors::WILDCHAT_TASKS_HEAD) {
            return Ok(wildchat_task_reply(prompt));
        }
        Ok(prompt.to_string())
    }
}

fn mcq_reply(prompt: &str) -> String {
    let question = extract_between(prompt, anchors::MCQ_QUESTION, anchors::MCQ_OPTIONS)
        .unwrap_or("");
    let options_block = extract_between(prompt, anchors::MCQ_OPTIONS, anchors::MCQ_TAIL)
        .unwrap_or("");
    let question_tokens: BTreeSet<String> = tokenize(question).into_iter().collect();
    let mut best: Option<(usize, char)> = None;
    for line in options_block.lines() {
        let mut chars = line.trim().chars();
        let (Some(letter), Some('.')) = (chars.next(), chars.next()) else {
            continue;
        };
        if !letter.is_ascii_uppercase() {
            continue;
        }
        let overlap = content_tokens(chars.as_str())
            .iter()
            .filter(|t| question_tokens.contains(t.as_str()))
            .count();
        let better = match best {
            None => true,
            Some((prev, _)) => overlap > prev,
        };
        if better {
            best = Some((overlap, letter));
        }
    }
    match best {
        Some((_, letter)) => format!("The answer is {letter}."),
        None => "The answer is unclear.".into(),
    }
}

fn categorize_reply(prompt: &str) -> String {
    let wildchat = prompt.contains("16 specific categories");
    let input = prompt
        .rfind(anchors::CATEGORIZE_INPUT)
        .map(|i| &prompt[i + anchors::CATEGORIZE_INPUT.len()..])
        .unwrap_or("");
    let mut out = String::new();
    for line in input.lines() {
        if let Some((n, text)) = parse_claim_line(line) {
            let cats = keyword_categories(text, wildchat);
            let rendered = if cats.is_empty() {
                "None".to_string()
            } else {
                cats.join(", ")
            };
            out.push_str(&format!("- Claim {n}: {rendered}\n"));
        }
    }
    out
}

fn keyword_categories(claim: &str, wildchat: bool) -> Vec<String> {
    let lower = claim.to_lowercase();
    let mut cats = Vec::new();
    let mut push = |c: &str| {
        if !cats.iter().any(|x| x == c) {
            cats.push(c.to_string());
        }
    };
    let any = |keys: &[&str]| keys.iter().any(|k| lower.contains(k));
    if any(&["-year-old", "year old", "aged "]) {
        push("Age");
    }
    if any(&["woman", "man ", " man", "male", "female", "boy", "girl"]) {
        push("Gender");
    }
    if any(&["wife", "husband", "spouse"]) {
        push("Spouse");
    }
    if any(&["girlfriend", "boyfriend", "partner"]) {
        push("Partner");
    }
    if any(&["married", "divorced", "widowed", "single "]) {
        push("Relationship_Status");
    }
    if any(&["mother", "father", "sister", "brother", "daughter", "son ", "family"]) {
        push("Family");
    }
    if any(&["works as", "job", "teacher", "engineer", "nurse", "farmer", "retired"]) {
        push("Occupation");
    }
    if any(&["dog", "cat ", "pet"]) {
        push("Pet");
    }
    if any(&["school", "college", "university", "student"]) {
        push("Education");
    }
    if any(&["salary", "income", "debt", "rent"]) {
        push("Finance");
    }
    if wildchat {
        if any(&["anxious", "anxiety", "depress", "stressed", "lonely"]) {
            push("Mental_Health");
        }
        if any(&["diagnos", "medication", "symptom", "illness", "clinic"]) {
            push("Health");
        }
    } else {
        if any(&["presents", "brought to", "complains", "chief complaint"]) {
            push("Chief_Concern");
        }
        if any(&["past medical history", "previously diagnosed"]) {
            push("Past_Medical_History");
        }
        if any(&["medication", " mg", "tablet", "dose"]) {
            push("Medications");
        }
        if any(&["allerg"]) {
            push("Allergies_Reactions");
        }
        if any(&["smok", "alcohol", "drinks", "drug use"]) {
            push("Social_History");
        }
        if any(&["temperature", "pulse", "blood pressure", "auscultation", "examination"]) {
            push("Physical_Exam");
        }
        if any(&["serum", "wbc", "urinalysis", "x-ray", "laboratory", "leukocyte"]) {
            push("Diagnostic_Results");
        }
    }
    cats
}

fn wildchat_task_reply(prompt: &str) -> String {
    let convo = extract_between(prompt, "Conversation:\n", "\n\nAnswer:").unwrap_or("");
    let lower = convo.to_lowercase();
    for (keys, task) in [
        (&["summarize", "summary"][..], "summarization"),
        (&["code", "function", "script"][..], "code generation"),
        (&["translate", "translation"][..], "translation"),
        (&["poem", "song"][..], "song and poem generation"),
        (&["story"][..], "story and script generation"),
        (&["email", "message"][..], "generating communications (email, text messages, etc.)"),
        (&["advice", "relationship", "feel"][..], "personal advice about mental health, relationships, etc."),
        (&["explain", "how do", "how to"][..], "explanation, how-to, practical advice"),
    ] {
        if keys.iter().any(|k| lower.contains(k)) {
            return task.to_string();
        }
    }
    "general chitchat".to_string()
}

/// Feature-hashed bag-of-words embedder: token counts bucketed by FNV-1a
/// into a fixed-width vector. Identical texts always embed identically.
#[derive(Debug)]
pub struct HashEmbed {
    name: String,
    dim: usize,
}

impl HashEmbed {
    pub fn new(dim: usize) -> Self {
        HashEmbed {
            name: format!("hash-embed-{dim}"),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw (unnormalized) bag-of-words vector for one text.
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let bucket = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        v
    }
}

impl Default for HashEmbed {
    fn default() -> Self {
        HashEmbed::new(256)
    }
}

impl EmbedBackend for HashEmbed {
    fn name(&self) -> &str {
        &self.name
    }
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f64>>> {
        Ok(req.texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_rates_verbatim_as_one() {
        let passage = "A 23-year-old woman is brought to the emergency department. She hears voices.";
        assert_eq!(oracle_rating("She hears voices.", passage), 1);
        assert_eq!(oracle_rating("she HEARS voices.", passage), 1);
    }

    #[test]
    fn oracle_rates_partial_coverage_as_two() {
        let passage = "The woman reports hearing faint voices at night.";
        // 3 of 4 content tokens (woman, hearing->no, voices, night) present.
        assert_eq!(oracle_rating("The woman heard voices at night", passage), 2);
    }

    #[test]
    fn oracle_rates_disjoint_as_three() {
        assert_eq!(oracle_rating("Quartz basalt strata", "The patient sleeps well."), 3);
    }

    #[test]
    fn reword_changes_surface_not_case_structure() {
        let original = "Auscultation of the lungs does not reveal any significant abnormalities.";
        let reworded = reword(original);
        assert_ne!(reworded, original);
        assert!(reworded.contains("notable"));
        assert!(reworded.ends_with('.'));
    }

    #[test]
    fn flaky_backend_recovers() {
        let flaky = FlakyChat::new(EchoChat, 2);
        assert!(flaky.complete(&ChatRequest::new("m", "x")).is_err());
        assert!(flaky.complete(&ChatRequest::new("m", "x")).is_err());
        assert_eq!(flaky.complete(&ChatRequest::new("m", "x")).unwrap(), "x");
    }

    #[test]
    fn hash_embed_is_deterministic_and_token_sensitive() {
        let embed = HashEmbed::default();
        assert_eq!(embed.vector("alpha beta"), embed.vector("alpha beta"));
        assert_ne!(embed.vector("alpha beta"), embed.vector("alpha gamma"));
    }
}
