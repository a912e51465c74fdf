//! Cross-cutting analyses: sensitive-category leakage, the aux-only
//! inference baseline, score histograms, and agreement statistics for
//! validating the judge against human annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::access::AuxiliaryInfo;
use crate::atomize::{Claim, ClaimRef};
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest};
use crate::score::{semantic_privacy, ClaimSupportScore, JudgeOptions, RecordPrivacy, ScoredClaimPolicy};

/// The sensitive-information category lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategorySet {
    Medqa,
    Wildchat,
}

const COMMON_CATEGORIES: &[&str] = &[
    "Age",
    "Gender",
    "Sexual_Orientation",
    "Race_Nationality",
    "Spouse",
    "Partner",
    "Relationship_Status",
    "Family",
    "Location",
    "Appearance",
    "Pet",
    "Occupation",
    "Education",
    "Finance",
];

const MEDQA_ONLY: &[&str] = &[
    "Chief_Concern",
    "History_of_Present_Illness",
    "Past_Medical_History",
    "Medications",
    "Allergies_Reactions",
    "Social_History",
    "Family_History",
    "Review_of_Systems",
    "Physical_Exam",
    "Diagnostic_Results",
];

const WILDCHAT_ONLY: &[&str] = &["Health", "Mental_Health"];

impl CategorySet {
    pub fn categories(&self) -> Vec<&'static str> {
        let extra = match self {
            CategorySet::Medqa => MEDQA_ONLY,
            CategorySet::Wildchat => WILDCHAT_ONLY,
        };
        COMMON_CATEGORIES.iter().chain(extra).copied().collect()
    }

    pub fn template(&self) -> &'static str {
        match self {
            CategorySet::Medqa => "categorize_medqa",
            CategorySet::Wildchat => "categorize_wildchat",
        }
    }
}

/// Categories carried by one claim; `{"None"}` when nothing sensitive was
/// identified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabel {
    pub claim_ref: ClaimRef,
    pub categories: BTreeSet<String>,
}

const CATEGORIZE_ATTEMPTS: u32 = 3; // initial ask + 2 re-asks

/// Labels each claim with sensitive categories via the judge. The claims
/// form one batch; a claim-count mismatch that survives the re-asks fails
/// the batch. Out-of-list category names are dropped and flagged.
pub fn categorize_claims(
    claims: &[Claim],
    set: CategorySet,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
) -> Result<(Vec<CategoryLabel>, Vec<ClaimRef>)> {
    if claims.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let facts = claims
        .iter()
        .enumerate()
        .map(|(i, c)| format!("- Claim {}: {}", i + 1, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = registry.render(set.template(), &[("facts_prepared", facts.as_str())])?;
    let allowed: BTreeSet<&str> = set.categories().into_iter().collect();

    let mut parsed: BTreeMap<usize, String> = BTreeMap::new();
    for attempt in 0..CATEGORIZE_ATTEMPTS {
        let req = ChatRequest::new("", prompt.clone()).with_sample_index(attempt);
        let Ok(completion) = chat.chat(&req) else {
            continue;
        };
        parsed = parse_category_lines(&completion, claims.len());
        if parsed.len() == claims.len() {
            break;
        }
    }
    if parsed.len() != claims.len() {
        return Err(Error::BadReply(format!(
            "categorizer returned {} of {} claim lines after {} attempts",
            parsed.len(),
            claims.len(),
            CATEGORIZE_ATTEMPTS
        )));
    }

    let mut labels = Vec::with_capacity(claims.len());
    let mut flagged = Vec::new();
    for (i, claim) in claims.iter().enumerate() {
        let raw = &parsed[&(i + 1)];
        let mut categories: BTreeSet<String> = BTreeSet::new();
        let mut dropped = false;
        for piece in raw.split(',') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            if piece.eq_ignore_ascii_case("none") {
                continue;
            }
            match allowed.iter().find(|c| c.eq_ignore_ascii_case(piece)) {
                Some(canonical) => {
                    categories.insert((*canonical).to_string());
                }
                None => dropped = true,
            }
        }
        if categories.is_empty() {
            categories.insert("None".to_string());
        }
        if dropped {
            flagged.push(claim.claim_ref());
        }
        labels.push(CategoryLabel {
            claim_ref: claim.claim_ref(),
            categories,
        });
    }
    Ok((labels, flagged))
}

fn parse_category_lines(completion: &str, n_claims: usize) -> BTreeMap<usize, String> {
    let mut out = BTreeMap::new();
    for line in completion.lines() {
        if let Some((n, text)) = crate::providers::mocks::parse_claim_line(line) {
            if n >= 1 && n <= n_claims {
                out.entry(n).or_insert_with(|| text.to_string());
            }
        }
    }
    out
}

/// Counts leaked claims per category. A claim leaks when its judged mode is
/// 1 or 2 (same or similar information); "None" labels never count.
pub fn leakage_by_category(
    scores: &[ClaimSupportScore],
    labels: &[CategoryLabel],
) -> BTreeMap<String, u64> {
    let by_ref: BTreeMap<&ClaimRef, &CategoryLabel> =
        labels.iter().map(|l| (&l.claim_ref, l)).collect();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for score in scores {
        if score.mode > 2 {
            continue;
        }
        if let Some(label) = by_ref.get(&score.claim_ref) {
            for category in &label.categories {
                if category != "None" {
                    *counts.entry(category.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// The "use aux information" baseline: scores the record's remaining claims
/// against the auxiliary claims themselves, measuring what the adversary
/// could infer with no access to the sanitized release.
pub fn aux_only_baseline(
    original_claims: &[Claim],
    aux: &AuxiliaryInfo,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    options: &JudgeOptions,
) -> Result<RecordPrivacy> {
    let passage = aux.claims.join("\n");
    semantic_privacy(
        original_claims,
        aux,
        "aux_only",
        &passage,
        chat,
        registry,
        options,
        ScoredClaimPolicy::ExcludeAux,
    )
}

/// Items x raters integer ratings on a fixed scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    pub ratings: Vec<Vec<i32>>,
    pub scale_min: i32,
    pub scale_max: i32,
}

impl RatingsMatrix {
    pub fn new(ratings: Vec<Vec<i32>>, scale_min: i32, scale_max: i32) -> Result<Self> {
        if ratings.len() < 2 {
            return Err(Error::InvalidInput("need at least 2 items".into()));
        }
        let raters = ratings[0].len();
        if raters < 2 {
            return Err(Error::InvalidInput("need at least 2 raters".into()));
        }
        for row in &ratings {
            if row.len() != raters {
                return Err(Error::InvalidInput("ratings matrix must be rectangular".into()));
            }
            for &cell in row {
                if cell < scale_min || cell > scale_max {
                    return Err(Error::InvalidInput(format!(
                        "rating {cell} outside scale [{scale_min}, {scale_max}]"
                    )));
                }
            }
        }
        Ok(RatingsMatrix {
            ratings,
            scale_min,
            scale_max,
        })
    }
}

/// Fleiss' kappa over the categories of the scale. The fully degenerate
/// case (expected agreement 1, which forces observed agreement 1) is
/// defined as 1.0.
pub fn fleiss_kappa(matrix: &RatingsMatrix) -> Result<f64> {
    let n_items = matrix.ratings.len() as f64;
    let n_raters = matrix.ratings[0].len() as f64;
    let categories: Vec<i32> = (matrix.scale_min..=matrix.scale_max).collect();

    let mut category_totals: BTreeMap<i32, f64> = BTreeMap::new();
    let mut p_bar = 0.0;
    for row in &matrix.ratings {
        let mut counts: BTreeMap<i32, f64> = BTreeMap::new();
        for &cell in row {
            *counts.entry(cell).or_insert(0.0) += 1.0;
        }
        let sum_sq: f64 = counts.values().map(|c| c * c).sum();
        p_bar += (sum_sq - n_raters) / (n_raters * (n_raters - 1.0));
        for (cat, count) in counts {
            *category_totals.entry(cat).or_insert(0.0) += count;
        }
    }
    p_bar /= n_items;

    let mut p_bar_e = 0.0;
    for cat in categories {
        let share = category_totals.get(&cat).copied().unwrap_or(0.0) / (n_items * n_raters);
        p_bar_e += share * share;
    }

    let denom = 1.0 - p_bar_e;
    if denom.abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((p_bar - p_bar_e) / denom)
}

/// Fractional ranks with average ranks for ties.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average of their positions.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman needs two equal-length series of at least 2".into(),
        ));
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UnavailableMetric(
            "zero rank variance; spearman undefined".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Equal-width histogram over [0,1]; every bin is right-closed, so 0.5 with
/// two bins lands in the first. Out-of-range values clamp to the edge bins.
pub fn score_histogram(values: &[f64], bins: usize) -> Vec<u64> {
    assert!(bins >= 1, "histogram needs at least one bin");
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if v <= 0.0 {
            0
        } else {
            ((v * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1)
        };
        counts[idx] += 1;
    }
    counts
}

/// One line of a human annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub record_id: String,
    pub index: u32,
    pub ratings: Vec<i32>,
}

/// Loads line-delimited `{record_id, index, ratings}` annotations.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Judge-validation statistics over human annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub fleiss_kappa: f64,
    /// Spearman between the model's mode and the mode of human ratings.
    pub spearman_model_vs_human: Option<f64>,
    pub items: usize,
}

pub fn agreement_report(
    annotations: &[AnnotationRow],
    model_scores: &[ClaimSupportScore],
) -> Result<AgreementReport> {
    let matrix = RatingsMatrix::new(
        annotations.iter().map(|a| a.ratings.clone()).collect(),
        1,
        3,
    )?;
    let kappa = fleiss_kappa(&matrix)?;

    let model_by_ref: BTreeMap<(&str, u32), u8> = model_scores
        .iter()
        .map(|s| ((s.claim_ref.record_id.as_str(), s.claim_ref.index), s.mode))
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in annotations {
        if let Some(&model_mode) = model_by_ref.get(&(row.record_id.as_str(), row.index)) {
            let human_samples: Vec<u8> = row.ratings.iter().map(|&r| r.clamp(1, 3) as u8).collect();
            let (human_mode, _) = crate::score::mode_of_samples(&human_samples);
            xs.push(f64::from(model_mode));
            ys.push(f64::from(human_mode));
        }
    }
    let correlation = if xs.len() >= 2 {
        spearman(&xs, &ys).ok()
    } else {
        None
    };
    Ok(AgreementReport {
        fleiss_kappa: kappa,
        spearman_model_vs_human: correlation,
        items: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::SelectionStrategy;
    use crate::providers::mocks::{MockSuite, OracleJudgeChat};
    use std::sync::Arc;

    fn claim(record_id: &str, index: u32, text: &str) -> Claim {
        Claim {
            record_id: record_id.into(),
            index,
            text: text.into(),
        }
    }

    #[test]
    fn categorize_with_mock_suite() {
        let chat = ChatProvider::new(Arc::new(MockSuite::default()));
        let registry = TemplateRegistry::default();
        let claims = vec![
            claim("r1", 0, "A 23-year-old woman is brought in."),
            claim("r1", 1, "Quartz strata weather slowly."),
        ];
        let (labels, _) =
            categorize_claims(&claims, CategorySet::Medqa, &chat, &registry).unwrap();
        assert!(labels[0].categories.contains("Age"));
        assert!(labels[0].categories.contains("Gender"));
        assert_eq!(
            labels[1].categories.iter().collect::<Vec<_>>(),
            vec!["None"]
        );
    }

    #[test]
    fn out_of_list_category_dropped_with_flag() {
        let chat = ChatProvider::new(Arc::new(crate::providers::mocks::ScriptedChat::new(vec![
            "- Claim 1: Age, MadeUpCategory".into(),
        ])));
        let registry = TemplateRegistry::default();
        let claims = vec![claim("r1", 0, "A 23-year-old arrives.")];
        let (labels, flagged) =
            categorize_claims(&claims, CategorySet::Medqa, &chat, &registry).unwrap();
        assert!(labels[0].categories.contains("Age"));
        assert!(!labels[0].categories.contains("MadeUpCategory"));
        assert_eq!(flagged.len(), 1);
    }

    #[test]
    fn claim_count_mismatch_is_batch_error() {
        let chat = ChatProvider::new(Arc::new(crate::providers::mocks::ScriptedChat::new(vec![
            "- Claim 1: Age".into(),
        ])));
        let registry = TemplateRegistry::default();
        let claims = vec![
            claim("r1", 0, "first claim"),
            claim("r1", 1, "second claim"),
        ];
        assert!(categorize_claims(&claims, CategorySet::Medqa, &chat, &registry).is_err());
    }

    fn support(record_id: &str, index: u32, mode: u8) -> ClaimSupportScore {
        ClaimSupportScore {
            claim_ref: ClaimRef {
                record_id: record_id.into(),
                index,
            },
            passage_id: "p".into(),
            samples: vec![mode],
            mode,
            normalized: f64::from(mode - 1) / 2.0,
            tie_in_mode: false,
        }
    }

    fn label(record_id: &str, index: u32, cats: &[&str]) -> CategoryLabel {
        CategoryLabel {
            claim_ref: ClaimRef {
                record_id: record_id.into(),
                index,
            },
            categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn leakage_counting_rules() {
        let scores = vec![
            support("r1", 0, 1),
            support("r1", 1, 2),
            support("r1", 2, 1),
            support("r1", 3, 3),
        ];
        let labels = vec![
            label("r1", 0, &["Age"]),
            label("r1", 1, &["Age", "Gender"]),
            label("r1", 2, &["None"]),
            label("r1", 3, &["Gender"]),
        ];
        let counts = leakage_by_category(&scores, &labels);
        assert_eq!(counts.get("Age"), Some(&2));
        assert_eq!(counts.get("Gender"), Some(&1), "mode-3 claim never counts");
        assert!(!counts.contains_key("None"));
    }

    #[test]
    fn no_leaks_empty_map() {
        let scores = vec![support("r1", 0, 3)];
        let labels = vec![label("r1", 0, &["Age"])];
        assert!(leakage_by_category(&scores, &labels).is_empty());
    }

    fn judge_options() -> JudgeOptions {
        JudgeOptions {
            n_samples: 1,
            ..JudgeOptions::default()
        }
    }

    #[test]
    fn aux_only_disjoint_claims_score_one() {
        let chat = ChatProvider::new(Arc::new(OracleJudgeChat));
        let registry = TemplateRegistry::default();
        let claims = vec![
            claim("r1", 0, "The aurora shimmered green."),
            claim("r1", 1, "Pulse is 116/min."),
        ];
        let aux = AuxiliaryInfo {
            record_id: "r1".into(),
            claims: vec!["The aurora shimmered green.".into()],
            source_indices: vec![0],
            strategy: SelectionStrategy::FirstK,
            k: 1,
            seed: 0,
            paraphrased: false,
        };
        let privacy = aux_only_baseline(&claims, &aux, &chat, &registry, &judge_options()).unwrap();
        assert_eq!(privacy.value, 1.0);
    }

    #[test]
    fn aux_duplicating_a_claim_scores_it_zero() {
        let chat = ChatProvider::new(Arc::new(OracleJudgeChat));
        let registry = TemplateRegistry::default();
        let claims = vec![
            claim("r1", 0, "Pulse is 116/min."),
            claim("r1", 1, "Pulse is 116/min."),
            claim("r1", 2, "Quartz weathers slowly."),
        ];
        let aux = AuxiliaryInfo {
            record_id: "r1".into(),
            claims: vec!["Pulse is 116/min.".into()],
            source_indices: vec![0],
            strategy: SelectionStrategy::FirstK,
            k: 1,
            seed: 0,
            paraphrased: false,
        };
        let privacy = aux_only_baseline(&claims, &aux, &chat, &registry, &judge_options()).unwrap();
        let dup = privacy
            .claim_scores
            .iter()
            .find(|s| s.claim_ref.index == 1)
            .unwrap();
        assert_eq!(dup.normalized, 0.0);
    }

    #[test]
    fn fleiss_perfect_agreement_is_one() {
        let matrix = RatingsMatrix::new(vec![vec![1, 1, 1], vec![2, 2, 2], vec![3, 3, 3]], 1, 3)
            .unwrap();
        assert!((fleiss_kappa(&matrix).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleiss_hand_computed_small_case() {
        // P_i = 0 for both items; p_1 = p_2 = 0.5, Pe = 0.5, kappa = -1.
        let matrix = RatingsMatrix::new(vec![vec![1, 2], vec![2, 1]], 1, 2).unwrap();
        assert!((fleiss_kappa(&matrix).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleiss_chance_agreement_is_zero() {
        // Pbar = 0.5 and Pe = 0.5 by construction.
        let matrix =
            RatingsMatrix::new(vec![vec![1, 1], vec![2, 2], vec![1, 2], vec![2, 1]], 1, 2)
                .unwrap();
        assert!(fleiss_kappa(&matrix).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fleiss_degenerate_identical_cells() {
        let matrix = RatingsMatrix::new(vec![vec![2, 2], vec![2, 2]], 1, 3).unwrap();
        assert_eq!(fleiss_kappa(&matrix).unwrap(), 1.0);
    }

    #[test]
    fn spearman_endpoints_and_pinned_value() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(r, 0.8);
    }

    #[test]
    fn spearman_average_ranks_for_ties() {
        let ranks = fractional_ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn spearman_zero_variance_unavailable() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UnavailableMetric(_))
        ));
    }

    #[test]
    fn histogram_boundary_rules() {
        assert_eq!(score_histogram(&[0.0, 0.5, 1.0], 2), vec![2, 1]);
        assert_eq!(score_histogram(&[], 3), vec![0, 0, 0]);
        assert_eq!(score_histogram(&[1.0, 1.0, 1.0], 4), vec![0, 0, 0, 3]);
        let counts = score_histogram(&[0.1, 0.4, 0.6, 0.9], 2);
        assert_eq!(counts.iter().sum::<u64>(), 4);
    }
}
