//! The adversary's view: select k claims per record, then paraphrase them.

use serde::{Deserialize, Serialize};

use crate::atomize::Claim;
use crate::error::{Error, Result};
use crate::prompts::TemplateRegistry;
use crate::providers::{ChatProvider, ChatRequest};
use crate::rng::SplitMix64;

/// Which claims the adversary is assumed to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    FirstK,
    LastK,
    RandomK,
}

impl SelectionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionStrategy::FirstK => "first_k",
            SelectionStrategy::LastK => "last_k",
            SelectionStrategy::RandomK => "random_k",
        }
    }
}

/// The auxiliary bundle for one record: selected (optionally paraphrased)
/// claims plus enough provenance to reproduce the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryInfo {
    pub record_id: String,
    /// Claim texts, post-paraphrase when `paraphrased`.
    pub claims: Vec<String>,
    /// Pre-paraphrase claim indices, ascending.
    pub source_indices: Vec<u32>,
    pub strategy: SelectionStrategy,
    pub k: u32,
    pub seed: u64,
    pub paraphrased: bool,
}

impl AuxiliaryInfo {
    /// All claims joined into one retrieval query.
    pub fn merged_query(&self) -> String {
        self.claims.join(" ")
    }
}

/// Selects claims by strategy. `random_k` draws a uniform sample without
/// replacement via Fisher-Yates over indices with the crate's fixed
/// SplitMix64 generator, then returns the sample in ascending index order.
/// When k exceeds the claim count, all claims are returned.
pub fn select_aux_claims(
    claims: &[Claim],
    strategy: SelectionStrategy,
    k: u32,
    seed: u64,
) -> Result<Vec<Claim>> {
    if claims.is_empty() {
        return Err(Error::InvalidInput(
            "cannot select auxiliary claims from an empty claim list".into(),
        ));
    }
    let n = claims.len();
    let take = (k as usize).min(n);
    let indices: Vec<usize> = match strategy {
        SelectionStrategy::FirstK => (0..take).collect(),
        SelectionStrategy::LastK => (n - take..n).collect(),
        SelectionStrategy::RandomK => {
            let mut pool: Vec<usize> = (0..n).collect();
            let mut rng = SplitMix64::new(seed);
            // Partial Fisher-Yates: the first `take` slots are the sample.
            for i in 0..take {
                let j = i + rng.next_below((n - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut sample = pool[..take].to_vec();
            sample.sort_unstable();
            sample
        }
    };
    Ok(indices.into_iter().map(|i| claims[i].clone()).collect())
}

/// Paraphrases one claim. With the identity mock the output equals the
/// input; a backend failure keeps the original text (caller flags the
/// record).
pub fn paraphrase_claim(
    text: &str,
    chat: &ChatProvider,
    registry: &TemplateRegistry,
    template: &str,
) -> Result<String> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot paraphrase empty text".into()));
    }
    let prompt = registry.render(template, &[("document", text)])?;
    let reply = chat.chat(&ChatRequest::new("", prompt))?;
    // Claims stay single-line.
    let flattened = reply.split_whitespace().collect::<Vec<_>>().join(" ");
    if flattened.is_empty() {
        return Err(Error::BadReply("empty paraphrase".into()));
    }
    Ok(flattened)
}

/// Builds the auxiliary bundle for one record.
pub fn build_auxiliary_info(
    claims: &[Claim],
    strategy: SelectionStrategy,
    k: u32,
    seed: u64,
    paraphrase: Option<(&ChatProvider, &TemplateRegistry, &str)>,
) -> Result<(AuxiliaryInfo, bool)> {
    let selected = select_aux_claims(claims, strategy, k, seed)?;
    let record_id = selected[0].record_id.clone();
    let source_indices: Vec<u32> = selected.iter().map(|c| c.index).collect();
    let mut flagged = false;
    let mut texts = Vec::with_capacity(selected.len());
    for claim in &selected {
        match paraphrase {
            None => texts.push(claim.text.clone()),
            Some((chat, registry, template)) => {
                match paraphrase_claim(&claim.text, chat, registry, template) {
                    Ok(p) => texts.push(p),
                    Err(_) => {
                        flagged = true;
                        texts.push(claim.text.clone());
                    }
                }
            }
        }
    }
    Ok((
        AuxiliaryInfo {
            record_id,
            claims: texts,
            source_indices,
            strategy,
            k,
            seed,
            paraphrased: paraphrase.is_some(),
        },
        flagged,
    ))
}
