//! Utility metrics: what the sanitized dataset is still good for.
//!
//! MCQ accuracy asks an evaluator to answer each record's question from the
//! sanitized profile; category preservation compares conversation-category
//! distributions via a normalized chi-squared distance; coherence is a
//! Likert judgment per document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest};

/// Category counts for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl CategoryDistribution {
    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let total = counts.values().sum();
        CategoryDistribution { counts, total }
    }

    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut counts = BTreeMap::new();
        for label in labels {
            *counts.entry(label).or_insert(0) += 1;
        }
        CategoryDistribution::from_counts(counts)
    }

    fn frequency(&self, category: &str) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(category).copied().unwrap_or(0) as f64 / self.total as f64
    }

    /// Uniform distribution over this distribution's observed categories.
    pub fn uniform_reference(&self) -> CategoryDistribution {
        CategoryDistribution::from_counts(self.counts.keys().map(|k| (k.clone(), 1)).collect())
    }
}

/// Symmetric chi-squared distance over normalized frequencies on the union
/// of categories: `sum (p_i - q_i)^2 / (p_i + q_i)` where the denominator is
/// positive.
pub fn chi2_distance(p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
    let mut categories: Vec<&String> = p.counts.keys().chain(q.counts.keys()).collect();
    categories.sort();
    categories.dedup();
    let mut distance = 0.0;
    for category in categories {
        let pf = p.frequency(category);
        let qf = q.frequency(category);
        if pf + qf > 0.0 {
            distance += (pf - qf).powi(2) / (pf + qf);
        }
    }
    distance
}

/// Scales the chi-squared distance so 1 is perfect preservation and 0 is
/// the distance from the original to a uniform distribution over the
/// original's categories; values below 0 mean worse than uniform.
pub fn normalized_chi2_utility(
    original: &CategoryDistribution,
    sanitized: &CategoryDistribution,
) -> Result<f64> {
    if original.total == 0 {
        return Err(Error::InvalidInput("original distribution is empty".into()));
    }
    if sanitized.total == 0 {
        return Err(Error::InvalidInput("sanitized distribution is empty".into()));
    }
    let d_sanitized = chi2_distance(sanitized, original);
    let d_uniform = chi2_distance(&original.uniform_reference(), original);
    if d_uniform == 0.0 {
        // The original is already uniform; the scale degenerates.
        return if d_sanitized == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::UnavailableMetric(
                "original distribution is uniform; normalized chi-squared is undefined".into(),
            ))
        };
    }
    Ok(1.0 - d_sanitized / d_uniform)
}

/// MCQ evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqOutcome {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    /// Records whose prediction was unparseable (counted incorrect).
    pub flagged: Vec<String>,
}

/// First standalone uppercase letter in the completion that names an
/// option.
pub fn parse_option_letter(completion: &str, options: &BTreeMap<String, String>) -> Option<String> {
    let chars: Vec<char> = completion.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_uppercase() {
            continue;
        }
        let prev_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let next_ok = i + 1 >= chars.len() || !chars[i + 1].is_alphanumeric();
        if prev_ok && next_ok && options.contains_key(&c.to_string()) {
            return Some(c.to_string());
        }
    }
    None
}

/// Asks the evaluator each record's question using the sanitized profile.
/// Sanitized profiles come keyed by record id; an id without a profile is an
/// error. Empty profiles are legal (the no-private-data baseline) and the
/// question is asked bare.
pub fn mcq_accuracy(
    originals: &Dataset,
    sanitized_profiles: &BTreeMap<String, String>,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    template: &str,
) -> Result<McqOutcome> {
    if originals.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut flagged = Vec::new();
    for record in &originals.records {
        let options = record.options.as_ref().ok_or_else(|| Error::InvalidRecord {
            id: record.id.clone(),
            message: "mcq evaluation needs options".into(),
        })?;
        let answer = record.answer.as_ref().ok_or_else(|| Error::InvalidRecord {
            id: record.id.clone(),
            message: "mcq evaluation needs a gold answer".into(),
        })?;
        let question_text = record.question.clone().unwrap_or_default();
        let profile = sanitized_profiles
            .get(&record.id)
            .ok_or_else(|| Error::InvalidRecord {
                id: record.id.clone(),
                message: "no sanitized profile for record".into(),
            })?;
        let question = if profile.is_empty() {
            question_text
        } else {
            format!("{profile}\n\n{question_text}")
        };
        let options_block = options
            .iter()
            .map(|(letter, text)| format!("{letter}. {text}"))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = registry.render(
            template,
            &[("question", question.as_str()), ("options", options_block.as_str())],
        )?;
        match chat.chat(&ChatRequest::new("", prompt)) {
            Ok(completion) => match parse_option_letter(&completion, options) {
                Some(letter) if &letter == answer => correct += 1,
                Some(_) => {}
                None => flagged.push(record.id.clone()),
            },
            Err(_) => flagged.push(record.id.clone()),
        }
    }
    Ok(McqOutcome {
        accuracy: correct as f64 / originals.len() as f64,
        total: originals.len(),
        correct,
        flagged,
    })
}

const COHERENCE_ATTEMPTS: u32 = 3; // initial ask + 2 re-asks

/// Extracts the integer after a "Rating" keyword.
fn parse_likert(completion: &str) -> Option<u8> {
    for line in completion.lines() {
        let lower = line.to_lowercase();
        if let Some(pos) = lower.find("rating") {
            let tail = &lower[pos + "rating".len()..];
            let digits: String = tail
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            if let Ok(value) = digits.parse::<u8>() {
                return Some(value);
            }
        }
    }
    None
}

/// One Likert coherence judgment. `Ok(None)` means the rating stayed
/// out-of-range or unparseable through the re-asks; the caller excludes the
/// document from the mean.
pub fn coherence_score(
    document: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    rubric_template: &str,
) -> Result<Option<u8>> {
    if document.is_empty() {
        return Err(Error::InvalidInput(
            "coherence needs a nonempty document".into(),
        ));
    }
    let prompt = registry.render(rubric_template, &[("document", document)])?;
    for attempt in 0..COHERENCE_ATTEMPTS {
        let req = ChatRequest::new("", prompt.clone()).with_sample_index(attempt);
        let Ok(completion) = chat.chat(&req) else {
            continue;
        };
        if let Some(rating) = parse_likert(&completion) {
            if (1..=5).contains(&rating) {
                return Ok(Some(rating));
            }
        }
    }
    Ok(None)
}

/// Coherence over a whole dataset; empty-text records are skipped and
/// flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceOutcome {
    pub mean: f64,
    pub ratings: BTreeMap<String, u8>,
    pub flagged: Vec<String>,
}

pub fn coherence_over_dataset(
    dataset: &Dataset,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    rubric_template: &str,
) -> Result<CoherenceOutcome> {
    let mut ratings = BTreeMap::new();
    let mut flagged = Vec::new();
    for record in &dataset.records {
        if record.text.is_empty() {
            flagged.push(record.id.clone());
            continue;
        }
        match coherence_score(&record.text, chat, registry, rubric_template)? {
            Some(rating) => {
                ratings.insert(record.id.clone(), rating);
            }
            None => flagged.push(record.id.clone()),
        }
    }
    if ratings.is_empty() {
        return Err(Error::UnavailableMetric(
            "every document was flagged; coherence mean is undefined".into(),
        ));
    }
    let mean = ratings.values().map(|&r| f64::from(r)).sum::<f64>() / ratings.len() as f64;
    Ok(CoherenceOutcome {
        mean,
        ratings,
        flagged,
    })
}

/// The task list of the conversation-category prompt.
pub const WILDCHAT_TASKS: &[&str] = &[
    "summarization",
    "model jailbreaking (e.g. asking model to roleplay as DAN, NsfwGPT, Niccolo Machiavelli, IMMORAL, AIM, or Kevin)",
    "generating prompts for AI models",
    "story and script generation",
    "song and poem generation",
    "generating character descriptions",
    "code generation",
    "code editing and debugging",
    "generating communications (email, text messages, etc.)",
    "generating non-fictional documents (resumes, essays, etc.)",
    "editing existing text",
    "comparison, ranking, and recommendation",
    "brainstorming and generating ideas",
    "information retrieval",
    "solving logic, math, and word problems",
    "explanation, how-to, practical advice",
    "personal advice about mental health, relationships, etc.",
    "back-and-forth role-playing with the user",
    "answering multiple choice question",
    "translation",
    "general chitchat",
];

/// Classifies one conversation into a task category via the judge; replies
/// are canonicalized against [`WILDCHAT_TASKS`] when possible.
pub fn classify_conversation(
    document: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    template: &str,
) -> Result<String> {
    let prompt = registry.render(template, &[("context", document)])?;
    let completion = chat.chat(&ChatRequest::new("", prompt))?;
    let raw = completion
        .lines()
        .map(|l| l.trim().trim_start_matches('-').trim())
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_lowercase();
    for task in WILDCHAT_TASKS {
        if raw == task.to_lowercase() || raw.contains(&task.to_lowercase()) {
            return Ok(task.to_string());
        }
    }
    Ok(raw)
}

/// Per-method utility summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub method_name: String,
    pub task_utility: Option<f64>,
    pub coherence_mean: Option<f64>,
    pub per_record_flags: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DatasetRole, Record};
    use crate::providers::mocks::ScriptedChat;
    use std::sync::Arc;

    fn dist(pairs: &[(&str, u64)]) -> CategoryDistribution {
        CategoryDistribution::from_counts(
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
    }

    #[test]
    fn chi2_identity_is_zero() {
        let p = dist(&[("A", 3), ("B", 1)]);
        assert_eq!(chi2_distance(&p, &p), 0.0);
    }

    #[test]
    fn chi2_disjoint_support_is_two() {
        let p = dist(&[("A", 1)]);
        let q = dist(&[("B", 1)]);
        assert!((chi2_distance(&p, &q) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_hand_computed_example() {
        let p = dist(&[("A", 2), ("B", 2)]);
        let q = dist(&[("A", 3), ("B", 1)]);
        // (0.25^2/1.25) + (0.25^2/0.75) = 0.05 + 0.0833...
        let expected = 0.0625 / 1.25 + 0.0625 / 0.75;
        assert!((chi2_distance(&p, &q) - expected).abs() < 1e-12);
        assert!((expected - 0.13333333333333333).abs() < 1e-12);
    }

    #[test]
    fn chi2_is_symmetric() {
        let p = dist(&[("A", 5), ("B", 2), ("C", 1)]);
        let q = dist(&[("B", 4), ("C", 4)]);
        assert_eq!(chi2_distance(&p, &q), chi2_distance(&q, &p));
    }

    #[test]
    fn normalized_utility_endpoints() {
        let orig = dist(&[("A", 6), ("B", 2), ("C", 2)]);
        assert!((normalized_chi2_utility(&orig, &orig).unwrap() - 1.0).abs() < 1e-9);
        let uniform = orig.uniform_reference();
        assert!(normalized_chi2_utility(&orig, &uniform).unwrap().abs() < 1e-9);
    }

    #[test]
    fn normalized_utility_can_go_negative() {
        let orig = dist(&[("A", 3), ("B", 1)]);
        let inverted = dist(&[("A", 1), ("B", 3)]);
        let u = normalized_chi2_utility(&orig, &inverted).unwrap();
        assert!(u < 0.0, "{u}");
    }

    #[test]
    fn normalized_utility_uniform_original_degenerate() {
        let orig = dist(&[("A", 2), ("B", 2)]);
        assert_eq!(normalized_chi2_utility(&orig, &orig).unwrap(), 1.0);
        let skewed = dist(&[("A", 3), ("B", 1)]);
        assert!(matches!(
            normalized_chi2_utility(&orig, &skewed),
            Err(Error::UnavailableMetric(_))
        ));
    }

    fn mcq_dataset(golds: &[&str]) -> Dataset {
        let records = golds
            .iter()
            .enumerate()
            .map(|(i, gold)| {
                let mut r = Record::new(format!("r{i}"), "profile text");
                r.question = Some("Which option?".into());
                r.options = Some(
                    [("A", "one"), ("B", "two"), ("C", "three"), ("D", "four")]
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .collect(),
                );
                r.answer = Some(gold.to_string());
                r
            })
            .collect();
        Dataset::new("mcq", DatasetRole::Original, records).unwrap()
    }

    fn profiles(dataset: &Dataset) -> BTreeMap<String, String> {
        dataset
            .records
            .iter()
            .map(|r| (r.id.clone(), r.text.clone()))
            .collect()
    }

    #[test]
    fn fixed_answer_mock_accuracy_endpoints() {
        let registry = TemplateRegistry::default();
        let always_a = || ChatProvider::new(Arc::new(ScriptedChat::new(vec!["A".into()])));
        let all_a = mcq_dataset(&["A"; 10]);
        let outcome =
            mcq_accuracy(&all_a, &profiles(&all_a), &always_a(), &registry, "utility_medqa")
                .unwrap();
        assert_eq!(outcome.accuracy, 1.0);

        let all_b = mcq_dataset(&["B"; 10]);
        let outcome =
            mcq_accuracy(&all_b, &profiles(&all_b), &always_a(), &registry, "utility_medqa")
                .unwrap();
        assert_eq!(outcome.accuracy, 0.0);
    }

    #[test]
    fn parses_first_standalone_letter() {
        let options: BTreeMap<String, String> = [("A", "x"), ("B", "y"), ("C", "z"), ("D", "w")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(
            parse_option_letter("The answer is C.", &options),
            Some("C".into())
        );
        assert_eq!(parse_option_letter("no letters here", &options), None);
        assert_eq!(
            parse_option_letter("CAB is a word, answer: B", &options),
            Some("B".into())
        );
    }

    #[test]
    fn unparseable_prediction_counts_incorrect_and_flags() {
        let registry = TemplateRegistry::default();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec!["cannot say".into()])));
        let ds = mcq_dataset(&["A", "A"]);
        let outcome =
            mcq_accuracy(&ds, &profiles(&ds), &chat, &registry, "utility_medqa").unwrap();
        assert_eq!(outcome.accuracy, 0.0);
        assert_eq!(outcome.flagged.len(), 2);
    }

    #[test]
    fn missing_profile_is_an_error() {
        let registry = TemplateRegistry::default();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec!["A".into()])));
        let ds = mcq_dataset(&["A"]);
        let err = mcq_accuracy(&ds, &BTreeMap::new(), &chat, &registry, "utility_medqa")
            .unwrap_err();
        assert!(err.to_string().contains("r0"));
    }

    #[test]
    fn mcq_accuracy_invariant_to_record_order() {
        let registry = TemplateRegistry::default();
        let ds = mcq_dataset(&["A", "B", "C"]);
        let mut reversed_records = ds.records.clone();
        reversed_records.reverse();
        let reversed = Dataset::new("mcq", DatasetRole::Original, reversed_records).unwrap();
        let chat = || ChatProvider::new(Arc::new(ScriptedChat::new(vec!["B".into()])));
        let a = mcq_accuracy(&ds, &profiles(&ds), &chat(), &registry, "utility_medqa").unwrap();
        let b = mcq_accuracy(&reversed, &profiles(&reversed), &chat(), &registry, "utility_medqa")
            .unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn coherence_mock_judge_contract() {
        let registry = TemplateRegistry::default();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec![
            "Explanation: fine.\nRating: 4".into(),
        ])));
        let rating = coherence_score("some document", &chat, &registry, "coherence_medqa")
            .unwrap();
        assert_eq!(rating, Some(4));
    }

    #[test]
    fn out_of_range_rating_flagged_after_reasks() {
        let registry = TemplateRegistry::default();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec!["Rating: 7".into()])));
        let rating = coherence_score("doc", &chat, &registry, "coherence_medqa").unwrap();
        assert_eq!(rating, None);
    }

    #[test]
    fn coherence_mean_over_ratings() {
        let registry = TemplateRegistry::default();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec![
            "Rating: 3".into(),
            "Rating: 4".into(),
            "Rating: 5".into(),
        ])));
        let records = vec![
            Record::new("a", "first"),
            Record::new("b", "second"),
            Record::new("c", "third"),
        ];
        let ds = Dataset::new("d", DatasetRole::Sanitized, records).unwrap();
        let outcome = coherence_over_dataset(&ds, &chat, &registry, "coherence_medqa").unwrap();
        assert_eq!(outcome.mean, 4.0);
    }
}
