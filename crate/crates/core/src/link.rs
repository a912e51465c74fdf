//! Stage 1 of the attack: link auxiliary information to one sanitized
//! record.
//!
//! Three index kinds share one interface: dense (unit vectors over atomized
//! claims or documents), BM25 (Okapi term statistics), and ROUGE (raw
//! document texts, merged-query only). Retrieval is an exhaustive scan —
//! corpora here are desk-scale — and entries are kept sorted so results
//! never depend on insertion order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::access::AuxiliaryInfo;
use crate::atomize::AtomizedDataset;
use crate::corpus::{Alignment, Dataset, DatasetPair};
use crate::error::{Error, Result};
use crate::providers::{EmbedProvider, EmbedRequest};
use crate::score::rouge_l;
use crate::text::tokenize;

/// Okapi BM25 parameters.
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Dense,
    Bm25,
    Rouge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexUnit {
    Claim,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    PerClaimMajority,
    MergedSingleQuery,
}

/// What one index entry points back to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryRef {
    pub record_id: String,
    /// None for document-unit entries.
    pub claim_index: Option<u32>,
}

#[derive(Debug, Clone)]
enum IndexInner {
    Dense {
        vectors: Vec<Vec<f64>>,
    },
    Bm25 {
        term_counts: Vec<BTreeMap<String, u32>>,
        lengths: Vec<u32>,
        doc_freq: BTreeMap<String, u32>,
        avg_len: f64,
    },
    Rouge {
        texts: Vec<String>,
    },
}

/// A retrieval index over a sanitized dataset.
#[derive(Debug, Clone)]
pub struct LinkIndex {
    pub kind: IndexKind,
    pub unit: IndexUnit,
    refs: Vec<EntryRef>,
    inner: IndexInner,
}

/// The linked record for one auxiliary bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub record_id: String,
    pub linked_id: String,
    pub mode: LinkMode,
    /// Sanitized id -> vote count; populated in majority mode, where the
    /// counts sum to the number of aux claims.
    pub votes: BTreeMap<String, u32>,
    pub tie_break_used: bool,
    pub per_claim_top: Vec<PerClaimTop>,
}

/// Evidence for one aux claim's top-1 match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClaimTop {
    pub aux_claim_index: u32,
    pub matched: EntryRef,
    pub similarity: f64,
}

fn sorted_entries<T>(mut entries: Vec<(EntryRef, T)>) -> (Vec<EntryRef>, Vec<T>) {
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries.into_iter().unzip()
}

fn build_index(kind: IndexKind, unit: IndexUnit, items: Vec<(EntryRef, String)>, embed: Option<&EmbedProvider>) -> Result<LinkIndex> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty input".into()));
    }
    let (refs, texts) = sorted_entries(items);
    let inner = match kind {
        IndexKind::Dense => {
            let embed = embed.ok_or_else(|| {
                Error::InvalidInput("dense index requires an embedding backend".into())
            })?;
            let mut vectors = Vec::with_capacity(texts.len());
            for (chunk_start, chunk) in texts.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
                let req = EmbedRequest::new("", chunk.to_vec());
                let embedded = embed.embed(&req).map_err(|e| {
                    let failed: Vec<String> = refs[chunk_start..chunk_start + chunk.len()]
                        .iter()
                        .map(|r| format!("{}#{}", r.record_id, r.claim_index.map(|i| i.to_string()).unwrap_or_default()))
                        .collect();
                    Error::Stage {
                        stage: "build_index".into(),
                        message: format!("embedding failed for refs [{}]: {e}", failed.join(", ")),
                    }
                })?;
                vectors.extend(embedded);
            }
            IndexInner::Dense { vectors }
        }
        IndexKind::Bm25 => {
            let mut term_counts = Vec::with_capacity(texts.len());
            let mut lengths = Vec::with_capacity(texts.len());
            let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
            for text in &texts {
                let tokens = tokenize(text);
                lengths.push(tokens.len() as u32);
                let mut counts: BTreeMap<String, u32> = BTreeMap::new();
                for token in tokens {
                    *counts.entry(token).or_insert(0) += 1;
                }
                for term in counts.keys() {
                    *doc_freq.entry(term.clone()).or_insert(0) += 1;
                }
                term_counts.push(counts);
            }
            let avg_len = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
            IndexInner::Bm25 {
                term_counts,
                lengths,
                doc_freq,
                avg_len,
            }
        }
        IndexKind::Rouge => {
            if unit != IndexUnit::Document {
                return Err(Error::UnsupportedMode(
                    "rouge indexes raw documents only".into(),
                ));
            }
            IndexInner::Rouge { texts }
        }
    };
    Ok(LinkIndex {
        kind,
        unit,
        refs,
        inner,
    })
}

/// Indexes every claim of an atomized sanitized dataset.
pub fn build_claim_index(
    atomized: &AtomizedDataset,
    kind: IndexKind,
    embed: Option<&EmbedProvider>,
) -> Result<LinkIndex> {
    let items: Vec<(EntryRef, String)> = atomized
        .claims
        .iter()
        .map(|c| {
            (
                EntryRef {
                    record_id: c.record_id.clone(),
                    claim_index: Some(c.index),
                },
                c.text.clone(),
            )
        })
        .collect();
    build_index(kind, IndexUnit::Claim, items, embed)
}

/// Indexes whole sanitized documents. Records with empty text (the
/// no-private-data baseline) are indexed with a single space so they stay
/// retrievable targets, just maximally unattractive ones.
pub fn build_document_index(
    dataset: &Dataset,
    kind: IndexKind,
    embed: Option<&EmbedProvider>,
) -> Result<LinkIndex> {
    let items: Vec<(EntryRef, String)> = dataset
        .records
        .iter()
        .map(|r| {
            let text = if r.text.is_empty() {
                " ".to_string()
            } else {
                r.text.clone()
            };
            (
                EntryRef {
                    record_id: r.id.clone(),
                    claim_index: None,
                },
                text,
            )
        })
        .collect();
    build_index(kind, IndexUnit::Document, items, embed)
}

impl LinkIndex {
    pub fn entry_count(&self) -> usize {
        self.refs.len()
    }

    pub fn entries(&self) -> &[EntryRef] {
        &self.refs
    }

    /// BM25 document frequency of a term, for bm25 indexes.
    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        match &self.inner {
            IndexInner::Bm25 { doc_freq, .. } => Some(doc_freq.get(term).copied().unwrap_or(0)),
            _ => None,
        }
    }

    pub fn avg_len(&self) -> Option<f64> {
        match &self.inner {
            IndexInner::Bm25 { avg_len, .. } => Some(*avg_len),
            _ => None,
        }
    }

    /// Okapi BM25 score of one entry against deduplicated query terms.
    pub fn bm25_score(&self, entry: usize, query_terms: &BTreeSet<String>) -> Result<f64> {
        let IndexInner::Bm25 {
            term_counts,
            lengths,
            doc_freq,
            avg_len,
        } = &self.inner
        else {
            return Err(Error::UnsupportedMode("not a bm25 index".into()));
        };
        let n = self.refs.len() as f64;
        let counts = &term_counts[entry];
        let dl = lengths[entry] as f64;
        let mut score = 0.0;
        for term in query_terms {
            let tf = counts.get(term).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            let df = doc_freq.get(term).copied().unwrap_or(0) as f64;
            score += bm25_term_score(tf, df, n, dl, *avg_len);
        }
        Ok(score)
    }

    /// Inner product of one dense entry with a unit query vector.
    pub fn dense_score(&self, entry: usize, query: &[f64]) -> Result<f64> {
        let IndexInner::Dense { vectors } = &self.inner else {
            return Err(Error::UnsupportedMode("not a dense index".into()));
        };
        Ok(dot(&vectors[entry], query))
    }

    fn top1(&self, query_text: &str, query_vector: Option<&[f64]>) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        match &self.inner {
            IndexInner::Dense { vectors } => {
                let query = query_vector.ok_or_else(|| {
                    Error::InvalidInput("dense retrieval needs a query vector".into())
                })?;
                for (i, v) in vectors.iter().enumerate() {
                    let s = dot(v, query);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
            }
            IndexInner::Bm25 { .. } => {
                let terms: BTreeSet<String> = tokenize(query_text).into_iter().collect();
                for i in 0..self.refs.len() {
                    let s = self.bm25_score(i, &terms)?;
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
            }
            IndexInner::Rouge { texts } => {
                for (i, text) in texts.iter().enumerate() {
                    let s = rouge_l(query_text, text).f;
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
            }
        }
        best.ok_or_else(|| Error::InvalidInput("empty index".into()))
    }
}

/// One term's Okapi BM25 contribution with this crate's fixed parameters:
/// `idf = ln(1 + (N - df + 0.5)/(df + 0.5))`.
pub fn bm25_term_score(tf: f64, df: f64, n: f64, dl: f64, avgdl: f64) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
    let denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl.max(f64::MIN_POSITIVE));
    idf * tf * (BM25_K1 + 1.0) / denom
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Aggregates per-claim top-1 matches into the winning sanitized id.
/// Ties on vote count resolve to the highest summed similarity, then to the
/// lexicographically smallest id; `tie_break_used` reports whether the vote
/// tie path ran.
pub fn tally_votes(per_claim: &[(String, f64)]) -> (String, BTreeMap<String, u32>, bool) {
    let mut votes: BTreeMap<String, u32> = BTreeMap::new();
    let mut sims: BTreeMap<String, f64> = BTreeMap::new();
    for (id, sim) in per_claim {
        *votes.entry(id.clone()).or_insert(0) += 1;
        *sims.entry(id.clone()).or_insert(0.0) += *sim;
    }
    let max_votes = votes.values().copied().max().unwrap_or(0);
    let tied: Vec<&String> = votes
        .iter()
        .filter(|(_, &v)| v == max_votes)
        .map(|(id, _)| id)
        .collect();
    let tie_break_used = tied.len() > 1;
    // BTreeMap iteration is ascending by id, so keeping strictly-greater
    // winners lands on the lexicographically smallest id among sim ties.
    let mut winner = tied[0].clone();
    let mut winner_sim = sims[&winner];
    for id in tied.iter().skip(1) {
        let s = sims[*id];
        if s > winner_sim {
            winner = (*id).clone();
            winner_sim = s;
        }
    }
    (winner, votes, tie_break_used)
}

/// Links one auxiliary bundle against the index.
pub fn link(
    aux: &AuxiliaryInfo,
    index: &LinkIndex,
    mode: LinkMode,
    embed: Option<&EmbedProvider>,
) -> Result<LinkResult> {
    if aux.claims.is_empty() {
        return Err(Error::InvalidInput("auxiliary bundle has no claims".into()));
    }
    match mode {
        LinkMode::PerClaimMajority => {
            if index.kind == IndexKind::Rouge {
                return Err(Error::UnsupportedMode(
                    "rouge linking supports merged_single_query only".into(),
                ));
            }
            let query_vectors = match index.kind {
                IndexKind::Dense => {
                    let embed = embed.ok_or_else(|| {
                        Error::InvalidInput("dense linking needs an embedding backend".into())
                    })?;
                    Some(embed.embed(&EmbedRequest::new("", aux.claims.clone()))?)
                }
                _ => None,
            };
            let mut per_claim_top = Vec::with_capacity(aux.claims.len());
            let mut parents: Vec<(String, f64)> = Vec::with_capacity(aux.claims.len());
            for (i, claim) in aux.claims.iter().enumerate() {
                let qv = query_vectors.as_ref().map(|v| v[i].as_slice());
                let (entry, similarity) = index.top1(claim, qv)?;
                let matched = index.refs[entry].clone();
                parents.push((matched.record_id.clone(), similarity));
                per_claim_top.push(PerClaimTop {
                    aux_claim_index: i as u32,
                    matched,
                    similarity,
                });
            }
            let (linked_id, votes, tie_break_used) = tally_votes(&parents);
            Ok(LinkResult {
                record_id: aux.record_id.clone(),
                linked_id,
                mode,
                votes,
                tie_break_used,
                per_claim_top,
            })
        }
        LinkMode::MergedSingleQuery => {
            if index.unit != IndexUnit::Document {
                return Err(Error::UnsupportedMode(
                    "merged_single_query scores whole documents; build a document-unit index"
                        .into(),
                ));
            }
            let query = aux.merged_query();
            let query_vector = match index.kind {
                IndexKind::Dense => {
                    let embed = embed.ok_or_else(|| {
                        Error::InvalidInput("dense linking needs an embedding backend".into())
                    })?;
                    Some(embed.embed(&EmbedRequest::new("", vec![query.clone()]))?.remove(0))
                }
                _ => None,
            };
            let (entry, similarity) = index.top1(&query, query_vector.as_deref())?;
            let matched = index.refs[entry].clone();
            Ok(LinkResult {
                record_id: aux.record_id.clone(),
                linked_id: matched.record_id.clone(),
                mode,
                votes: BTreeMap::new(),
                tie_break_used: false,
                per_claim_top: vec![PerClaimTop {
                    aux_claim_index: 0,
                    matched,
                    similarity,
                }],
            })
        }
    }
}

/// Fraction of results whose linked record is the record's own sanitized
/// counterpart. Requires one-to-one alignment.
pub fn linkage_rate(results: &[LinkResult], pair: &DatasetPair) -> Result<f64> {
    if pair.alignment != Alignment::OneToOneById {
        return Err(Error::UnavailableMetric(
            "correct-linkage rate needs a one-to-one aligned pair".into(),
        ));
    }
    if results.is_empty() {
        return Err(Error::InvalidInput("no link results".into()));
    }
    let correct = results
        .iter()
        .filter(|r| r.linked_id == r.record_id)
        .count();
    Ok(correct as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::SelectionStrategy;
    use crate::atomize::Claim;
    use crate::corpus::{DatasetRole, Record};
    use crate::providers::mocks::HashEmbed;
    use std::sync::Arc;

    fn atomized(claims: &[(&str, u32, &str)]) -> AtomizedDataset {
        AtomizedDataset {
            dataset_name: "d".into(),
            claims: claims
                .iter()
                .map(|(id, index, text)| Claim {
                    record_id: id.to_string(),
                    index: *index,
                    text: text.to_string(),
                })
                .collect(),
        }
    }

    fn aux(record_id: &str, claims: &[&str]) -> AuxiliaryInfo {
        AuxiliaryInfo {
            record_id: record_id.into(),
            claims: claims.iter().map(|s| s.to_string()).collect(),
            source_indices: (0..claims.len() as u32).collect(),
            strategy: SelectionStrategy::FirstK,
            k: claims.len() as u32,
            seed: 0,
            paraphrased: false,
        }
    }

    fn embedder() -> EmbedProvider {
        EmbedProvider::new(Arc::new(HashEmbed::default()))
    }

    #[test]
    fn claim_index_covers_every_claim() {
        let data = atomized(&[
            ("a", 0, "one flower"),
            ("a", 1, "two rivers"),
            ("b", 0, "three stones"),
            ("b", 1, "four clouds"),
            ("c", 0, "five roads"),
            ("c", 1, "six lamps"),
        ]);
        let index = build_claim_index(&data, IndexKind::Bm25, None).unwrap();
        assert_eq!(index.entry_count(), 6);
    }

    #[test]
    fn bm25_document_frequencies() {
        let data = atomized(&[("d1", 0, "a b"), ("d2", 0, "b c")]);
        let index = build_claim_index(&data, IndexKind::Bm25, None).unwrap();
        assert_eq!(index.doc_freq("b"), Some(2));
        assert_eq!(index.doc_freq("a"), Some(1));
        assert_eq!(index.doc_freq("z"), Some(0));
    }

    #[test]
    fn bm25_single_doc_closed_form() {
        // tf=1, N=1, df=1, |d| = avgdl: each term scores
        // ln(1 + 0.5/1.5) * (k1+1) / (1 + k1) = ln(4/3).
        let data = atomized(&[("d1", 0, "alpha beta")]);
        let index = build_claim_index(&data, IndexKind::Bm25, None).unwrap();
        let terms: BTreeSet<String> = tokenize("alpha beta").into_iter().collect();
        let score = index.bm25_score(0, &terms).unwrap();
        let expected = 2.0 * (1.0 + 0.5 / 1.5_f64).ln();
        assert!((score - expected).abs() < 1e-12, "{score} vs {expected}");
    }

    #[test]
    fn bm25_absent_term_contributes_zero() {
        let data = atomized(&[("d1", 0, "alpha beta")]);
        let index = build_claim_index(&data, IndexKind::Bm25, None).unwrap();
        let terms: BTreeSet<String> = ["gamma".to_string()].into_iter().collect();
        assert_eq!(index.bm25_score(0, &terms).unwrap(), 0.0);
    }

    #[test]
    fn dense_self_similarity_links_home() {
        let data = atomized(&[
            ("a", 0, "maple syrup harvest"),
            ("a", 1, "river dolphins migrate"),
            ("b", 0, "violin concert tonight"),
            ("b", 1, "quantum chip prototype"),
            ("c", 0, "desert lichen bloom"),
            ("c", 1, "harbor crane repair"),
            ("c", 2, "midnight bakery aroma"),
        ]);
        let embed = embedder();
        let index = build_claim_index(&data, IndexKind::Dense, Some(&embed)).unwrap();
        let bundle = aux(
            "c",
            &["desert lichen bloom", "harbor crane repair", "midnight bakery aroma"],
        );
        let result = link(&bundle, &index, LinkMode::PerClaimMajority, Some(&embed)).unwrap();
        assert_eq!(result.linked_id, "c");
        assert_eq!(result.votes.get("c"), Some(&3));
        assert!(!result.tie_break_used);
        assert_eq!(result.votes.values().sum::<u32>(), 3);
    }

    #[test]
    fn strict_majority_wins_without_tiebreak() {
        let (winner, votes, tie) = tally_votes(&[
            ("A".into(), 0.9),
            ("A".into(), 0.8),
            ("B".into(), 0.99),
        ]);
        assert_eq!(winner, "A");
        assert_eq!(votes.get("A"), Some(&2));
        assert!(!tie);
    }

    #[test]
    fn vote_tie_resolved_by_summed_similarity() {
        let (winner, _, tie) = tally_votes(&[
            ("A".into(), 2.1),
            ("B".into(), 2.4),
            ("C".into(), 1.9),
        ]);
        assert_eq!(winner, "B");
        assert!(tie);
    }

    #[test]
    fn full_tie_resolves_lexicographically() {
        let (winner, _, tie) = tally_votes(&[("B".into(), 1.0), ("A".into(), 1.0)]);
        assert_eq!(winner, "A");
        assert!(tie);
    }

    #[test]
    fn rouge_majority_unsupported() {
        let records = vec![Record::new("a", "some text"), Record::new("b", "other words")];
        let dataset = Dataset::new("d", DatasetRole::Sanitized, records).unwrap();
        let index = build_document_index(&dataset, IndexKind::Rouge, None).unwrap();
        let bundle = aux("a", &["some text"]);
        let err = link(&bundle, &index, LinkMode::PerClaimMajority, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMode(_)));
    }

    #[test]
    fn rouge_merged_picks_max_f() {
        let records = vec![
            Record::new("a", "the cat sat on the mat"),
            Record::new("b", "dogs chase red balls in parks"),
        ];
        let dataset = Dataset::new("d", DatasetRole::Sanitized, records).unwrap();
        let index = build_document_index(&dataset, IndexKind::Rouge, None).unwrap();
        let bundle = aux("b", &["dogs chase", "red balls"]);
        let result = link(&bundle, &index, LinkMode::MergedSingleQuery, None).unwrap();
        assert_eq!(result.linked_id, "b");
    }

    #[test]
    fn merged_mode_requires_document_unit() {
        let data = atomized(&[("a", 0, "x y"), ("b", 0, "z w")]);
        let index = build_claim_index(&data, IndexKind::Bm25, None).unwrap();
        let bundle = aux("a", &["x"]);
        let err = link(&bundle, &index, LinkMode::MergedSingleQuery, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMode(_)));
    }

    #[test]
    fn linkage_rate_fractions() {
        let records: Vec<Record> = (0..10).map(|i| Record::new(format!("r{i}"), "t")).collect();
        let orig = Dataset::new("o", DatasetRole::Original, records.clone()).unwrap();
        let san = Dataset::new("s", DatasetRole::Sanitized, records).unwrap();
        let pair = crate::corpus::pair_datasets(orig, san);
        let results: Vec<LinkResult> = (0..10)
            .map(|i| LinkResult {
                record_id: format!("r{i}"),
                linked_id: if i < 9 { format!("r{i}") } else { "r0".into() },
                mode: LinkMode::PerClaimMajority,
                votes: BTreeMap::new(),
                tie_break_used: false,
                per_claim_top: vec![],
            })
            .collect();
        assert!((linkage_rate(&results, &pair).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn linkage_rate_unavailable_when_unaligned() {
        let orig = Dataset::new("o", DatasetRole::Original, vec![Record::new("a", "t")]).unwrap();
        let san = Dataset::new("s", DatasetRole::Sanitized, vec![Record::new("x", "t")]).unwrap();
        let pair = crate::corpus::pair_datasets(orig, san);
        let err = linkage_rate(&[], &pair).unwrap_err();
        assert!(matches!(err, Error::UnavailableMetric(_)));
    }

    #[test]
    fn permutation_invariance_of_linking() {
        let forward = atomized(&[
            ("a", 0, "unique kestrel sighting"),
            ("b", 0, "granite cliff erosion"),
            ("c", 0, "tidal pool survey"),
        ]);
        let backward = atomized(&[
            ("c", 0, "tidal pool survey"),
            ("b", 0, "granite cliff erosion"),
            ("a", 0, "unique kestrel sighting"),
        ]);
        let bundle = aux("b", &["granite cliff erosion"]);
        for kind in [IndexKind::Bm25, IndexKind::Dense] {
            let embed = embedder();
            let provider = (kind == IndexKind::Dense).then_some(&embed);
            let i1 = build_claim_index(&forward, kind, provider).unwrap();
            let i2 = build_claim_index(&backward, kind, provider).unwrap();
            let r1 = link(&bundle, &i1, LinkMode::PerClaimMajority, provider).unwrap();
            let r2 = link(&bundle, &i2, LinkMode::PerClaimMajority, provider).unwrap();
            assert_eq!(r1.linked_id, r2.linked_id);
        }
    }
}
