//! Stage 2 of the attack: quantify what the linked record still reveals.
//!
//! The primary metric judges each original claim against the linked passage
//! on a three-point support scale (1 same, 2 similar, 3 unsupported),
//! repeats the judgment `n_samples` times, and takes the mode. Scores
//! normalize to [0,1] where higher means more privacy. ROUGE-L,
//! embedding-distance, and PII-existence baselines live here too, along
//! with the across-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::access::AuxiliaryInfo;
use crate::atomize::{Claim, ClaimRef};
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest, EmbedProvider, EmbedRequest};
use crate::sanitize::PiiSpan;
use crate::text::tokenize;

/// Which original claims get judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredClaimPolicy {
    /// Drop the claims the adversary already holds (the default): leakage is
    /// what the attack reveals beyond the auxiliary information.
    ExcludeAux,
    /// Judge every claim, matching the unqualified metric definition.
    AllClaims,
}

/// One claim's judged support against a linked passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimSupportScore {
    pub claim_ref: ClaimRef,
    pub passage_id: String,
    /// Raw ratings, one per sample, each in {1,2,3}.
    pub samples: Vec<u8>,
    pub mode: u8,
    /// (mode - 1) / 2, exactly one of {0.0, 0.5, 1.0}.
    pub normalized: f64,
    pub tie_in_mode: bool,
}

/// Judge settings.
#[derive(Debug, Clone)]
pub struct JudgeOptions {
    /// Samples per judgment; the mode wins. At most 5 so that re-asks fit
    /// the sample-index budget.
    pub n_samples: u32,
    pub temperature: f64,
    pub template: String,
    pub icl_template: String,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        JudgeOptions {
            n_samples: 5,
            temperature: 0.7,
            template: "judge".into(),
            icl_template: "judge_icl".into(),
        }
    }
}

const JUDGE_ATTEMPTS: u32 = 3; // initial ask + 2 re-asks
const MAX_JUDGE_SAMPLES: u32 = 5;

/// Mode of the samples; ties resolve to the smallest value so a tie reports
/// more leakage, never less.
pub fn mode_of_samples(samples: &[u8]) -> (u8, bool) {
    let mut counts = [0usize; 4];
    for &s in samples {
        counts[s.clamp(1, 3) as usize] += 1;
    }
    let max = counts.iter().max().copied().unwrap_or(0);
    let tied: Vec<u8> = (1..=3u8).filter(|&v| counts[v as usize] == max).collect();
    (tied[0], tied.len() > 1)
}

fn normalized_of(mode: u8) -> f64 {
    f64::from(mode - 1) / 2.0
}

/// Result of judging all scored claims of one record, plus flags.
struct BatchJudgment {
    samples_per_claim: Vec<Vec<u8>>,
    flagged: bool,
}

fn render_claims_block(claims: &[&str]) -> String {
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| format!("- Claim {}: {}", i + 1, c))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts "Claim N ... Rating ... R" pairs from one completion. Accepts a
/// bare integer after the claim number when no "Rating" keyword is present.
fn parse_ratings(completion: &str, n_claims: usize) -> std::collections::BTreeMap<usize, u8> {
    let mut ratings = std::collections::BTreeMap::new();
    for line in completion.lines() {
        let lower = line.to_lowercase();
        let Some(claim_pos) = lower.find("claim") else {
            continue;
        };
        let after_claim = &lower[claim_pos + "claim".len()..];
        let Some(n) = leading_integer(after_claim) else {
            continue;
        };
        if n == 0 || n > n_claims {
            continue;
        }
        let rating_src = match after_claim.find("rating") {
            Some(pos) => &after_claim[pos + "rating".len()..],
            None => {
                // Skip past the claim number itself.
                let digits = after_claim
                    .trim_start()
                    .find(|c: char| !c.is_ascii_digit())
                    .unwrap_or(0);
                &after_claim.trim_start()[digits..]
            }
        };
        if let Some(r) = first_rating_digit(rating_src) {
            ratings.entry(n).or_insert(r);
        }
    }
    ratings
}

fn leading_integer(text: &str) -> Option<usize> {
    let trimmed = text.trim_start();
    let digits: String = trimmed.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn first_rating_digit(text: &str) -> Option<u8> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if ('1'..='3').contains(&c) {
            let prev_ok = i == 0 || !chars[i - 1].is_ascii_digit();
            let next_ok = i + 1 >= chars.len() || !chars[i + 1].is_ascii_digit();
            if prev_ok && next_ok {
                return Some(c as u8 - b'0');
            }
        }
    }
    None
}

/// Judges a batch of claims against one passage: one completion per sample
/// carries a rating line per claim; unparseable claims after the re-asks are
/// recorded as 3.
fn judge_batch(
    claims: &[&str],
    passage: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    options: &JudgeOptions,
) -> Result<BatchJudgment> {
    if claims.is_empty() || passage.is_empty() {
        return Err(Error::InvalidInput(
            "judge needs nonempty claims and passage".into(),
        ));
    }
    let n_samples = options.n_samples.clamp(1, MAX_JUDGE_SAMPLES);
    let icl = registry.get(&options.icl_template).unwrap_or("");
    let claims_block = render_claims_block(claims);
    let prompt = registry.render(
        &options.template,
        &[
            ("icl_samples", icl),
            ("context", passage),
            ("atomized_claims", &claims_block),
        ],
    )?;

    let mut samples_per_claim = vec![Vec::with_capacity(n_samples as usize); claims.len()];
    let mut flagged = false;
    for sample in 0..n_samples {
        let mut ratings = std::collections::BTreeMap::new();
        for attempt in 0..JUDGE_ATTEMPTS {
            let req = ChatRequest::new("", prompt.clone())
                .with_temperature(options.temperature)
                .with_sample_index(sample * JUDGE_ATTEMPTS + attempt);
            match chat.chat(&req) {
                Ok(completion) => {
                    ratings = parse_ratings(&completion, claims.len());
                    if ratings.len() == claims.len() {
                        break;
                    }
                }
                Err(_) => continue,
            }
        }
        for (i, samples) in samples_per_claim.iter_mut().enumerate() {
            match ratings.get(&(i + 1)) {
                Some(&r) => samples.push(r),
                None => {
                    flagged = true;
                    samples.push(3);
                }
            }
        }
    }
    Ok(BatchJudgment {
        samples_per_claim,
        flagged,
    })
}

/// Judges a single claim against a passage.
pub fn judge_claim_support(
    claim: &str,
    passage: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    options: &JudgeOptions,
) -> Result<ClaimSupportScore> {
    let batch = judge_batch(&[claim], passage, chat, registry, options)?;
    let samples = batch.samples_per_claim.into_iter().next().unwrap();
    let (mode, tie_in_mode) = mode_of_samples(&samples);
    Ok(ClaimSupportScore {
        claim_ref: ClaimRef {
            record_id: String::new(),
            index: 0,
        },
        passage_id: String::new(),
        samples,
        mode,
        normalized: normalized_of(mode),
        tie_in_mode,
    })
}

/// Judged leakage of one record against its linked passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPrivacy {
    pub record_id: String,
    pub linked_id: String,
    pub claim_scores: Vec<ClaimSupportScore>,
    /// Mean normalized claim score; higher is more private.
    pub value: f64,
    pub policy: ScoredClaimPolicy,
    /// Set when exclude_aux left nothing to score and all claims were used.
    pub fell_back_all_claims: bool,
    /// Set when any judge sample defaulted to 3 after failed asks.
    pub judge_flagged: bool,
}

/// Judges every scorable original claim against the linked passage and
/// averages. Under `ExcludeAux`, claims at the aux source indices are
/// dropped first; if nothing is left the whole claim set is used and the
/// result flagged.
#[allow(clippy::too_many_arguments)]
pub fn semantic_privacy(
    original_claims: &[Claim],
    aux: &AuxiliaryInfo,
    passage_id: &str,
    passage: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    options: &JudgeOptions,
    policy: ScoredClaimPolicy,
) -> Result<RecordPrivacy> {
    if original_claims.is_empty() {
        return Err(Error::InvalidInput("record has no claims to score".into()));
    }
    let excluded: Vec<u32> = match policy {
        ScoredClaimPolicy::ExcludeAux => aux.source_indices.clone(),
        ScoredClaimPolicy::AllClaims => Vec::new(),
    };
    let mut scorable: Vec<&Claim> = original_claims
        .iter()
        .filter(|c| !excluded.contains(&c.index))
        .collect();
    let mut fell_back_all_claims = false;
    if scorable.is_empty() {
        fell_back_all_claims = true;
        scorable = original_claims.iter().collect();
    }
    let texts: Vec<&str> = scorable.iter().map(|c| c.text.as_str()).collect();
    let batch = judge_batch(&texts, passage, chat, registry, options)?;
    let claim_scores: Vec<ClaimSupportScore> = scorable
        .iter()
        .zip(batch.samples_per_claim)
        .map(|(claim, samples)| {
            let (mode, tie_in_mode) = mode_of_samples(&samples);
            ClaimSupportScore {
                claim_ref: claim.claim_ref(),
                passage_id: passage_id.to_string(),
                samples,
                mode,
                normalized: normalized_of(mode),
                tie_in_mode,
            }
        })
        .collect();
    let value = claim_scores.iter().map(|s| s.normalized).sum::<f64>() / claim_scores.len() as f64;
    Ok(RecordPrivacy {
        record_id: aux.record_id.clone(),
        linked_id: passage_id.to_string(),
        claim_scores,
        value,
        policy,
        fell_back_all_claims,
        judge_flagged: batch.flagged,
    })
}

/// ROUGE precision/recall/F over the shared tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl RougeScore {
    const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };

    fn from_counts(matched: usize, cand_len: usize, ref_len: usize) -> RougeScore {
        if cand_len == 0 || ref_len == 0 {
            return RougeScore::ZERO;
        }
        let precision = matched as f64 / cand_len as f64;
        let recall = matched as f64 / ref_len as f64;
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f,
        }
    }
}

/// ROUGE-L: longest common subsequence over token sequences.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    let lcs = lcs_len(&cand, &reference);
    RougeScore::from_counts(lcs, cand.len(), reference.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // Two-row DP.
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-N: clipped n-gram overlap. Used for bigram-overlap diagnostics on
/// paraphrased auxiliary information.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    assert!(n >= 1);
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.len() < n || reference.len() < n {
        return RougeScore::ZERO;
    }
    let grams = |tokens: &[String]| {
        let mut counts: std::collections::BTreeMap<Vec<String>, usize> = Default::default();
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
        counts
    };
    let cand_grams = grams(&cand);
    let ref_grams = grams(&reference);
    let matched: usize = cand_grams
        .iter()
        .map(|(g, &c)| c.min(ref_grams.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(matched, cand.len() - n + 1, reference.len() - n + 1)
}

/// The lexical baseline metric: one minus ROUGE-L F between the original
/// document and its linked sanitized version.
pub fn lexical_privacy(original_text: &str, linked_text: &str) -> f64 {
    1.0 - rouge_l(original_text, linked_text).f
}

/// Embedding baseline: for each non-aux original claim, the max inner
/// product over the linked record's claims; the metric is one minus the mean
/// of those maxima, clamped into [0,1].
pub fn embedding_distance_metric(
    original_claims: &[Claim],
    aux: &AuxiliaryInfo,
    linked_claims: &[String],
    embed: &EmbedProvider,
) -> Result<f64> {
    if original_claims.is_empty() || linked_claims.is_empty() {
        return Err(Error::InvalidInput(
            "embedding metric needs nonempty claim sets".into(),
        ));
    }
    let mut scored: Vec<&str> = original_claims
        .iter()
        .filter(|c| !aux.source_indices.contains(&c.index))
        .map(|c| c.text.as_str())
        .collect();
    if scored.is_empty() {
        scored = original_claims.iter().map(|c| c.text.as_str()).collect();
    }
    let orig_vecs = embed.embed(&EmbedRequest::new(
        "",
        scored.iter().map(|s| s.to_string()).collect(),
    ))?;
    let linked_vecs = embed.embed(&EmbedRequest::new("", linked_claims.to_vec()))?;
    let mean_max = orig_vecs
        .iter()
        .map(|o| {
            linked_vecs
                .iter()
                .map(|l| o.iter().zip(l).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / orig_vecs.len() as f64;
    Ok((1.0 - mean_max).clamp(0.0, 1.0))
}

/// Outcome of the PII-existence baseline for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiiExistence {
    pub value: f64,
    pub considered: usize,
    pub matched: usize,
    /// True when every span sat inside the aux claims and nothing was
    /// considered; the value defaults to 1.0 then.
    pub zero_considered: bool,
}

/// PII-existence baseline: the fraction of detected PII surfaces (outside
/// the aux claims) that do not reappear in the linked text.
pub fn pii_existence_metric(
    spans: &[PiiSpan],
    aux_source_texts: &[String],
    linked_text: &str,
) -> PiiExistence {
    let aux_folded: Vec<String> = aux_source_texts.iter().map(|t| t.to_lowercase()).collect();
    let linked_folded = linked_text.to_lowercase();
    let mut considered = 0usize;
    let mut matched = 0usize;
    for span in spans {
        let surface = span.surface.to_lowercase();
        if surface.is_empty() || aux_folded.iter().any(|t| t.contains(&surface)) {
            continue;
        }
        considered += 1;
        if linked_folded.contains(&surface) {
            matched += 1;
        }
    }
    if considered == 0 {
        return PiiExistence {
            value: 1.0,
            considered: 0,
            matched: 0,
            zero_considered: true,
        };
    }
    PiiExistence {
        value: 1.0 - matched as f64 / considered as f64,
        considered,
        matched,
        zero_considered: false,
    }
}

/// Mean and across-seed population standard deviation of per-record values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub per_seed_means: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Aggregates per-record values: mean within each seed, then mean and
/// population std across seeds.
pub fn dataset_privacy(per_seed_record_values: &[Vec<f64>]) -> Result<SeedAggregate> {
    if per_seed_record_values.is_empty() {
        return Err(Error::InvalidInput("need at least one seed".into()));
    }
    let per_seed_means: Vec<f64> = per_seed_record_values
        .iter()
        .map(|values| {
            if values.is_empty() {
                Err(Error::InvalidInput("seed has no record values".into()))
            } else {
                Ok(values.iter().sum::<f64>() / values.len() as f64)
            }
        })
        .collect::<Result<_>>()?;
    let mean = per_seed_means.iter().sum::<f64>() / per_seed_means.len() as f64;
    let variance = per_seed_means
        .iter()
        .map(|m| (m - mean).powi(2))
        .sum::<f64>()
        / per_seed_means.len() as f64;
    Ok(SeedAggregate {
        per_seed_means,
        mean,
        std: variance.sqrt(),
    })
}

/// Per-method privacy summary over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPrivacy {
    pub method_name: String,
    pub per_record: Vec<RecordPrivacy>,
    pub mean: f64,
    pub std_across_seeds: f64,
}

impl DatasetPrivacy {
    pub fn from_seeds(method_name: impl Into<String>, per_seed: Vec<Vec<RecordPrivacy>>) -> Result<Self> {
        let values: Vec<Vec<f64>> = per_seed
            .iter()
            .map(|records| records.iter().map(|r| r.value).collect())
            .collect();
        let aggregate = dataset_privacy(&values)?;
        Ok(DatasetPrivacy {
            method_name: method_name.into(),
            per_record: per_seed.into_iter().flatten().collect(),
            mean: aggregate.mean,
            std_across_seeds: aggregate.std,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::SelectionStrategy;
    use crate::providers::mocks::{HashEmbed, MockSuite, OracleJudgeChat, ScriptedChat};
    use std::sync::Arc;

    fn oracle_chat() -> ChatProvider {
        ChatProvider::new(Arc::new(OracleJudgeChat))
    }

    fn one_shot_options() -> JudgeOptions {
        JudgeOptions {
            n_samples: 1,
            ..JudgeOptions::default()
        }
    }

    fn claims(texts: &[&str]) -> Vec<Claim> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Claim {
                record_id: "r1".into(),
                index: i as u32,
                text: t.to_string(),
            })
            .collect()
    }

    fn aux_over(indices: &[u32], claim_list: &[Claim]) -> AuxiliaryInfo {
        AuxiliaryInfo {
            record_id: "r1".into(),
            claims: indices
                .iter()
                .map(|&i| claim_list[i as usize].text.clone())
                .collect(),
            source_indices: indices.to_vec(),
            strategy: SelectionStrategy::FirstK,
            k: indices.len() as u32,
            seed: 0,
            paraphrased: false,
        }
    }

    #[test]
    fn mode_arithmetic() {
        assert_eq!(mode_of_samples(&[1, 1, 2, 3, 1]), (1, false));
        assert_eq!(mode_of_samples(&[1, 1, 3, 3, 2]), (1, true));
        assert_eq!(mode_of_samples(&[3, 3, 2]), (3, false));
        assert_eq!(mode_of_samples(&[2]), (2, false));
    }

    #[test]
    fn scripted_samples_produce_expected_mode() {
        let replies: Vec<String> = [1, 1, 2, 3, 1]
            .iter()
            .map(|r| format!("- Claim 1: Rating: {r}"))
            .collect();
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(replies)));
        let registry = TemplateRegistry::default();
        let options = JudgeOptions {
            n_samples: 5,
            ..JudgeOptions::default()
        };
        let score = judge_claim_support("claim", "passage text", &chat, &registry, &options).unwrap();
        assert_eq!(score.samples, vec![1, 1, 2, 3, 1]);
        assert_eq!(score.mode, 1);
        assert_eq!(score.normalized, 0.0);
        assert!(!score.tie_in_mode);
    }

    #[test]
    fn unparseable_samples_default_to_three_after_reasks() {
        let chat = ChatProvider::new(Arc::new(ScriptedChat::new(vec!["no ratings here".into()])));
        let registry = TemplateRegistry::default();
        let score =
            judge_claim_support("claim", "passage", &chat, &registry, &one_shot_options()).unwrap();
        assert_eq!(score.samples, vec![3]);
        assert_eq!(score.normalized, 1.0);
    }

    #[test]
    fn oracle_verbatim_claim_scores_one() {
        let registry = TemplateRegistry::default();
        let passage = "She hears voices telling her things. Pulse is 116/min.";
        let score = judge_claim_support(
            "Pulse is 116/min.",
            passage,
            &oracle_chat(),
            &registry,
            &one_shot_options(),
        )
        .unwrap();
        assert_eq!(score.mode, 1);
        assert_eq!(score.normalized, 0.0);
    }

    #[test]
    fn semantic_privacy_passthrough_is_zero() {
        let registry = TemplateRegistry::default();
        let cs = claims(&[
            "A 23-year-old woman is brought to the emergency department.",
            "She hears voices.",
            "Her pulse is 116/min.",
            "She does not drink alcohol.",
        ]);
        let passage = "A 23-year-old woman is brought to the emergency department. She hears voices. Her pulse is 116/min. She does not drink alcohol.";
        let aux = aux_over(&[0], &cs);
        let privacy = semantic_privacy(
            &cs,
            &aux,
            "r1",
            passage,
            &oracle_chat(),
            &registry,
            &one_shot_options(),
            ScoredClaimPolicy::ExcludeAux,
        )
        .unwrap();
        assert_eq!(privacy.value, 0.0);
        assert_eq!(privacy.claim_scores.len(), 3, "aux claim excluded");
    }

    #[test]
    fn semantic_privacy_disjoint_passage_is_one() {
        let registry = TemplateRegistry::default();
        let cs = claims(&["Pulse is rapid today.", "She hears voices."]);
        let aux = aux_over(&[0], &cs);
        let privacy = semantic_privacy(
            &cs,
            &aux,
            "x9",
            "Granite cliffs erode slowly under wind.",
            &oracle_chat(),
            &registry,
            &one_shot_options(),
            ScoredClaimPolicy::ExcludeAux,
        )
        .unwrap();
        assert_eq!(privacy.value, 1.0);
    }

    #[test]
    fn exclude_aux_covering_everything_falls_back() {
        let registry = TemplateRegistry::default();
        let cs = claims(&["Alpha fact here.", "Beta fact there."]);
        let aux = aux_over(&[0, 1], &cs);
        let privacy = semantic_privacy(
            &cs,
            &aux,
            "r1",
            "Alpha fact here. Beta fact there.",
            &oracle_chat(),
            &registry,
            &one_shot_options(),
            ScoredClaimPolicy::ExcludeAux,
        )
        .unwrap();
        assert!(privacy.fell_back_all_claims);
        assert_eq!(privacy.claim_scores.len(), 2);
    }

    #[test]
    fn mean_of_normalized_modes() {
        // Modes [1,2,3,3] -> (0 + 0.5 + 1 + 1) / 4.
        let registry = TemplateRegistry::default();
        let cs = claims(&[
            "The sky is deep blue today.",
            "The harvest sky looks blue.",
            "Quartz strata under basalt.",
            "Lichen colonies spread north.",
        ]);
        let aux = AuxiliaryInfo {
            record_id: "r1".into(),
            claims: vec!["unused".into()],
            source_indices: vec![],
            strategy: SelectionStrategy::FirstK,
            k: 1,
            seed: 0,
            paraphrased: false,
        };
        let passage = "The sky is deep blue today. A harvest moon rises blue over the sky tonight.";
        let privacy = semantic_privacy(
            &cs,
            &aux,
            "p",
            passage,
            &oracle_chat(),
            &registry,
            &one_shot_options(),
            ScoredClaimPolicy::AllClaims,
        )
        .unwrap();
        let modes: Vec<u8> = privacy.claim_scores.iter().map(|s| s.mode).collect();
        assert_eq!(modes, vec![1, 2, 3, 3]);
        assert!((privacy.value - 0.625).abs() < 1e-12);
    }

    #[test]
    fn rouge_identical_and_disjoint() {
        assert_eq!(rouge_l("same words here", "same words here").f, 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta").f, 0.0);
        assert_eq!(rouge_l("", "anything").f, 0.0);
    }

    #[test]
    fn rouge_derived_example() {
        let score = rouge_l("a b c d", "a c e");
        assert_eq!(score.precision, 0.5);
        assert!((score.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((score.f - 0.5714285714285715).abs() < 1e-12);
    }

    #[test]
    fn rouge_f_symmetric_under_swap() {
        let a = "pulse is rapid and thready";
        let b = "the pulse felt rapid";
        let fwd = rouge_l(a, b);
        let rev = rouge_l(b, a);
        assert_eq!(fwd.f, rev.f);
        assert_eq!(fwd.precision, rev.recall);
    }

    #[test]
    fn rouge_2_drops_when_reworded() {
        let original = "Auscultation of the lungs does not reveal any significant abnormalities.";
        let reworded = crate::providers::mocks::reword(original);
        let self_overlap = rouge_n(original, original, 2).precision;
        let cross_overlap = rouge_n(&reworded, original, 2).precision;
        assert_eq!(self_overlap, 1.0);
        assert!(cross_overlap < self_overlap);
    }

    #[test]
    fn lexical_privacy_endpoints() {
        assert_eq!(lexical_privacy("exact copy", "exact copy"), 0.0);
        assert_eq!(lexical_privacy("alpha beta", "gamma delta"), 1.0);
        assert!((1.0 - 0.29 - 0.71f64).abs() < 1e-12);
    }

    #[test]
    fn embedding_metric_identical_claims_zero() {
        let embed = EmbedProvider::new(Arc::new(HashEmbed::default()));
        let cs = claims(&["maple syrup harvest", "violin concert tonight"]);
        let aux = AuxiliaryInfo {
            record_id: "r1".into(),
            claims: vec![],
            source_indices: vec![],
            strategy: SelectionStrategy::FirstK,
            k: 0,
            seed: 0,
            paraphrased: false,
        };
        let linked: Vec<String> = cs.iter().map(|c| c.text.clone()).collect();
        let value = embedding_distance_metric(&cs, &aux, &linked, &embed).unwrap();
        assert!(value.abs() < 1e-9);
    }

    #[test]
    fn embedding_metric_disjoint_buckets_one() {
        let embed = EmbedProvider::new(Arc::new(HashEmbed::default()));
        let cs = claims(&["maple syrup harvest"]);
        let aux = AuxiliaryInfo {
            record_id: "r1".into(),
            claims: vec![],
            source_indices: vec![],
            strategy: SelectionStrategy::FirstK,
            k: 0,
            seed: 0,
            paraphrased: false,
        };
        let linked = vec!["quartz basalt strata".to_string()];
        // Verify the fixture really hashes into disjoint buckets first.
        let h = HashEmbed::default();
        let a = h.vector("maple syrup harvest");
        let b = h.vector("quartz basalt strata");
        assert_eq!(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(), 0.0);
        let value = embedding_distance_metric(&cs, &aux, &linked, &embed).unwrap();
        assert_eq!(value, 1.0);
    }

    #[test]
    fn pii_existence_arithmetic() {
        let spans: Vec<PiiSpan> = ["alice", "03/04/1989", "a@x.org", "(206) 555-0134"]
            .iter()
            .enumerate()
            .map(|(i, s)| PiiSpan {
                record_id: "r1".into(),
                start: i * 10,
                end: i * 10 + s.len(),
                kind: "test".into(),
                surface: s.to_string(),
            })
            .collect();
        let all = "Alice called 03/04/1989 from a@x.org at (206) 555-0134";
        assert_eq!(pii_existence_metric(&spans, &[], all).value, 0.0);
        assert_eq!(pii_existence_metric(&spans, &[], "nothing here").value, 1.0);
        let one = "only alice appears";
        assert_eq!(pii_existence_metric(&spans, &[], one).value, 0.75);
    }

    #[test]
    fn pii_existence_zero_considered_flag() {
        let spans = vec![PiiSpan {
            record_id: "r1".into(),
            start: 0,
            end: 5,
            kind: "name".into(),
            surface: "alice".into(),
        }];
        let outcome = pii_existence_metric(&spans, &["Alice is here".into()], "anything");
        assert!(outcome.zero_considered);
        assert_eq!(outcome.value, 1.0);
    }

    #[test]
    fn seed_aggregation_matches_hand_computation() {
        let agg = dataset_privacy(&[vec![0.50], vec![0.54], vec![0.52]]).unwrap();
        assert!((agg.mean - 0.52).abs() < 1e-12);
        assert!((agg.std - 0.016329931618554522).abs() < 1e-9);
        let single = dataset_privacy(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(single.std, 0.0);
        assert_eq!(single.mean, 1.0);
    }

    #[test]
    fn mock_suite_routes_judge_prompts() {
        let chat = ChatProvider::new(Arc::new(MockSuite::default()));
        let registry = TemplateRegistry::default();
        let score = judge_claim_support(
            "the lighthouse keeper waved",
            "The keeper of the old lighthouse waved at dusk.",
            &chat,
            &registry,
            &one_shot_options(),
        )
        .unwrap();
        assert_eq!(score.mode, 2, "coverage without verbatim match");
    }
}
