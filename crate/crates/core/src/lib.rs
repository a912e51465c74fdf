//! Quantifies semantic privacy leakage of sanitized text datasets.
//!
//! The pipeline executes a two-stage re-identification attack: an adversary
//! holding a few (optionally paraphrased) atomic claims from an original
//! record first *links* them to a record in the sanitized release, then a
//! judge model scores how much of the original record's content the linked
//! record still *supports*. Lexical baselines (ROUGE-L, BM25-linked ROUGE),
//! embedding and PII-existence baselines, and utility metrics (MCQ accuracy,
//! category-distribution preservation, coherence) run alongside so that
//! privacy and utility can be compared per sanitization method.
//!
//! Everything runs offline against deterministic mock providers; real chat
//! and embedding endpoints are drop-in replacements behind the same cache.

pub mod access;
pub mod analysis;
pub mod atomize;
pub mod corpus;
pub mod error;
pub mod link;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod rng;
pub mod sanitize;
pub mod score;
pub mod text;
pub mod utility;

pub use access::{select_aux_claims, AuxiliaryInfo, SelectionStrategy};
pub use atomize::{AtomizedDataset, Claim, ClaimRef};
pub use corpus::{load_dataset, pair_datasets, save_dataset, Alignment, Dataset, DatasetPair, DatasetRole, Record};
pub use error::{Error, Result};
pub use link::{build_claim_index, build_document_index, link, linkage_rate, IndexKind, IndexUnit, LinkIndex, LinkMode, LinkResult};
pub use pipeline::{run, RunConfig};
pub use providers::{ChatProvider, ChatRequest, EmbedProvider, EmbedRequest};
pub use score::{rouge_l, ClaimSupportScore, DatasetPrivacy, RecordPrivacy, ScoredClaimPolicy};
