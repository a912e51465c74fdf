//! Staged pipeline: atomize, aux, sanitize, link, score, utility, analyze,
//! report.
//!
//! Every stage persists its output under `out_dir/stages`, content-addressed
//! by a digest of the run config, the dataset bytes, and the template texts.
//! A rerun with the same config loads persisted outputs instead of
//! recomputing, so judge-heavy runs resume for free and resumed runs equal
//! cold runs.

pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::access::{build_auxiliary_info, AuxiliaryInfo, SelectionStrategy};
use crate::analysis::{
    aux_only_baseline, categorize_claims, leakage_by_category, score_histogram, CategoryLabel,
    CategorySet,
};
use crate::atomize::{atomize_dataset, AtomizeOptions, AtomizedDataset, AtomizerKind, Claim};
use crate::corpus::{load_dataset, pair_datasets, Alignment, Dataset, DatasetRole};
use crate::error::{Error, Result};
use crate::link::{
    build_claim_index, build_document_index, link, linkage_rate, IndexKind, IndexUnit, LinkIndex,
    LinkMode, LinkResult,
};
use crate::prompts::TemplateRegistry;
use crate::providers::http::{HttpBackendConfig, HttpChat, HttpEmbed};
use crate::providers::mocks::{HashEmbed, MockSuite};
use crate::providers::{ChatProvider, EmbedProvider, ResponseCache};
use crate::rng::record_seed;
use crate::sanitize::{detect_pii, sanitize, PiiSpan, SanitizeMethod, SanitizerConfig};
use crate::score::{
    dataset_privacy, embedding_distance_metric, lexical_privacy, pii_existence_metric,
    semantic_privacy, JudgeOptions, RecordPrivacy, ScoredClaimPolicy,
};
use crate::utility::{
    classify_conversation, coherence_over_dataset, mcq_accuracy, normalized_chi2_utility,
    CategoryDistribution,
};

pub use report::{compare_table, CacheStats, FailureNote, MethodReport, MetricSummary, ReportBundle, AUX_ONLY_METHOD};

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Line-delimited original dataset.
    pub original: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxConfig {
    pub k: u32,
    pub strategy: SelectionStrategy,
    /// Extra strategies evaluated for the linkage-rate table.
    pub linkage_strategies: Vec<SelectionStrategy>,
    pub paraphrase: bool,
    pub paraphrase_template: String,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            k: 3,
            strategy: SelectionStrategy::RandomK,
            linkage_strategies: vec![
                SelectionStrategy::FirstK,
                SelectionStrategy::RandomK,
                SelectionStrategy::LastK,
            ],
            paraphrase: true,
            paraphrase_template: "paraphrase".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AtomizerConfig {
    pub kind: AtomizerKind,
    pub template: String,
    pub icl_template: String,
    pub summarize_template: String,
}

impl Default for AtomizerConfig {
    fn default() -> Self {
        AtomizerConfig {
            kind: AtomizerKind::SentenceFallback,
            template: "atomize".into(),
            icl_template: "atomize_icl".into(),
            summarize_template: "summarize".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    pub kind: IndexKind,
    pub unit: IndexUnit,
    pub mode: LinkMode,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            kind: IndexKind::Dense,
            unit: IndexUnit::Claim,
            mode: LinkMode::PerClaimMajority,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub n_samples: u32,
    pub policy: ScoredClaimPolicy,
    pub temperature: f64,
    pub template: String,
    pub icl_template: String,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            n_samples: 5,
            policy: ScoredClaimPolicy::ExcludeAux,
            temperature: 0.7,
            template: "judge".into(),
            icl_template: "judge_icl".into(),
        }
    }
}

impl JudgeConfig {
    fn options(&self) -> JudgeOptions {
        JudgeOptions {
            n_samples: self.n_samples,
            temperature: self.temperature,
            template: self.template.clone(),
            icl_template: self.icl_template.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    /// MCQ accuracy; needs options and gold answers on every record.
    pub mcq: bool,
    pub mcq_template: String,
    pub coherence: bool,
    pub coherence_template: String,
    /// Category-distribution preservation for conversation datasets.
    pub category_distribution: bool,
    pub category_template: String,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            mcq: true,
            mcq_template: "utility_medqa".into(),
            coherence: true,
            coherence_template: "coherence_medqa".into(),
            category_distribution: false,
            category_template: "utility_wildchat".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub categorize: bool,
    pub category_set: CategorySet,
    pub histogram_bins: usize,
    pub aux_only: bool,
    /// External PII span annotations; the shipped detector runs on the
    /// original records when absent.
    pub pii_spans_file: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            categorize: false,
            category_set: CategorySet::Medqa,
            histogram_bins: 10,
            aux_only: true,
            pii_spans_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the credential.
    pub credential_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProvidersConfig {
    /// Use the deterministic offline mocks.
    pub mock: bool,
    pub max_in_flight: Option<usize>,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub chat: Option<HttpProviderConfig>,
    pub embed: Option<HttpProviderConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TemplatesConfig {
    /// Directory of `<id>.txt` overrides.
    pub dir: Option<PathBuf>,
}

/// The complete run configuration; loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub aux: AuxConfig,
    #[serde(default)]
    pub atomizer: AtomizerConfig,
    #[serde(default)]
    pub linker: LinkerConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub utility: UtilityConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub sanitizers: Vec<SanitizerConfig>,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub templates: TemplatesConfig,
}

impl RunConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative paths resolve against the config file's directory.
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.out_dir);
        resolve(&mut self.dataset.original);
        for sanitizer in &mut self.sanitizers {
            if let Some(path) = &mut sanitizer.import_path {
                resolve(path);
            }
        }
        if let Some(path) = &mut self.providers.cache_dir {
            resolve(path);
        }
        if let Some(path) = &mut self.templates.dir {
            resolve(path);
        }
        if let Some(path) = &mut self.analysis.pii_spans_file {
            resolve(path);
        }
    }

    /// Template ids this run will render.
    fn referenced_templates(&self) -> Vec<&str> {
        let mut ids = vec![
            self.judge.template.as_str(),
            self.judge.icl_template.as_str(),
        ];
        if self.atomizer.kind == AtomizerKind::Llm {
            ids.push(self.atomizer.template.as_str());
            ids.push(self.atomizer.icl_template.as_str());
        }
        ids.push(self.atomizer.summarize_template.as_str());
        if self.aux.paraphrase {
            ids.push(self.aux.paraphrase_template.as_str());
        }
        for sanitizer in &self.sanitizers {
            if matches!(
                sanitizer.method,
                SanitizeMethod::LlmSanitize | SanitizeMethod::LlmSanitizeParaphrase
            ) {
                ids.push(sanitizer.sanitize_template.as_str());
                ids.push(sanitizer.paraphrase_template.as_str());
            }
        }
        if self.utility.mcq {
            ids.push(self.utility.mcq_template.as_str());
        }
        if self.utility.coherence {
            ids.push(self.utility.coherence_template.as_str());
        }
        if self.utility.category_distribution {
            ids.push(self.utility.category_template.as_str());
        }
        if self.analysis.categorize {
            ids.push(self.analysis.category_set.template());
        }
        ids
    }

    pub fn validate(&self, registry: &TemplateRegistry) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sanitizers.is_empty() {
            return Err(Error::Config("at least one sanitizer is required".into()));
        }
        let mut names = BTreeSet::new();
        for sanitizer in &self.sanitizers {
            sanitizer.validate()?;
            if !names.insert(&sanitizer.name) {
                return Err(Error::Config(format!(
                    "duplicate sanitizer name {:?}",
                    sanitizer.name
                )));
            }
        }
        if self.aux.k == 0 {
            return Err(Error::Config("aux.k must be at least 1".into()));
        }
        if !(1..=5).contains(&self.judge.n_samples) {
            return Err(Error::Config(
                "judge.n_samples must be between 1 and 5".into(),
            ));
        }
        for id in self.referenced_templates() {
            if !registry.contains(id) {
                return Err(Error::UnknownTemplate(id.to_string()));
            }
        }
        if !self.providers.mock && (self.providers.chat.is_none() || self.providers.embed.is_none())
        {
            return Err(Error::Config(
                "non-mock runs need [providers.chat] and [providers.embed]".into(),
            ));
        }
        Ok(())
    }
}

// ── Execution context ────────────────────────────────────────────────────

/// Stage boundaries the CLI can stop at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunStage {
    Atomize,
    Aux,
    Sanitize,
    Link,
    Score,
    Utility,
    Analyze,
    Report,
}

pub struct RunContext {
    pub config: RunConfig,
    pub registry: TemplateRegistry,
    pub chat: ChatProvider,
    pub embed: EmbedProvider,
    stages_dir: PathBuf,
    cache: ResponseCache,
    config_digest: String,
}

impl RunContext {
    pub fn new(config: RunConfig) -> Result<Self> {
        let registry = match &config.templates.dir {
            Some(dir) => TemplateRegistry::with_overrides(dir)?,
            None => TemplateRegistry::default(),
        };
        config.validate(&registry)?;

        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let stages_dir = config.out_dir.join("stages");
        std::fs::create_dir_all(&stages_dir).map_err(|e| Error::io(&stages_dir, e))?;
        let cache_dir = config
            .providers
            .cache_dir
            .clone()
            .unwrap_or_else(|| config.out_dir.join("cache"));
        let cache = ResponseCache::new(&cache_dir)?;

        let in_flight = config.providers.max_in_flight.unwrap_or(8);
        let (chat, embed) = if config.providers.mock {
            (
                ChatProvider::new(Arc::new(MockSuite::default()))
                    .with_cache(cache.clone())
                    .with_in_flight_limit(in_flight),
                EmbedProvider::new(Arc::new(HashEmbed::default()))
                    .with_cache(cache.clone())
                    .with_in_flight_limit(in_flight),
            )
        } else {
            let chat_cfg = config.providers.chat.as_ref().expect("validated");
            let embed_cfg = config.providers.embed.as_ref().expect("validated");
            (
                ChatProvider::new(Arc::new(HttpChat::new(http_config(chat_cfg))?))
                    .with_cache(cache.clone())
                    .with_in_flight_limit(in_flight),
                EmbedProvider::new(Arc::new(HttpEmbed::new(http_config(embed_cfg))?))
                    .with_cache(cache.clone())
                    .with_in_flight_limit(in_flight),
            )
        };

        let config_digest = digest_config(&config, &registry)?;
        Ok(RunContext {
            config,
            registry,
            chat,
            embed,
            stages_dir,
            cache,
            config_digest,
        })
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    fn stage_path(&self, name: &str) -> PathBuf {
        self.stages_dir
            .join(format!("{name}-{}.jsonl", &self.config_digest[..12]))
    }

    /// Loads a persisted stage or computes and persists it.
    fn jsonl_stage<T, F>(&self, name: &str, compute: F) -> Result<Vec<T>>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<Vec<T>>,
    {
        let path = self.stage_path(name);
        if path.exists() {
            return load_jsonl(&path);
        }
        let items = compute()?;
        save_jsonl(&path, &items)?;
        Ok(items)
    }

    /// Like [`Self::jsonl_stage`] but with a sidecar flag list so flags
    /// survive resumption.
    fn flagged_stage<T, F>(&self, name: &str, compute: F) -> Result<(Vec<T>, Vec<String>)>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<(Vec<T>, Vec<String>)>,
    {
        let data_path = self.stage_path(name);
        let flags_path = self.stage_path(&format!("{name}-flags"));
        if data_path.exists() && flags_path.exists() {
            return Ok((load_jsonl(&data_path)?, load_jsonl(&flags_path)?));
        }
        let (items, flags) = compute()?;
        save_jsonl(&data_path, &items)?;
        save_jsonl(&flags_path, &flags)?;
        Ok((items, flags))
    }
}

fn http_config(config: &HttpProviderConfig) -> HttpBackendConfig {
    HttpBackendConfig {
        endpoint: config.endpoint.clone(),
        model: config.model.clone(),
        credential_env: config.credential_env.clone(),
        timeout_secs: config.timeout_secs,
    }
}

fn digest_config(config: &RunConfig, registry: &TemplateRegistry) -> Result<String> {
    let mut hasher = Sha256::new();
    let config_json =
        serde_json::to_string(config).map_err(|e| Error::Config(format!("config digest: {e}")))?;
    hasher.update(config_json.as_bytes());
    let dataset_bytes = std::fs::read(&config.dataset.original)
        .map_err(|e| Error::io(&config.dataset.original, e))?;
    hasher.update(&dataset_bytes);
    for sanitizer in &config.sanitizers {
        if let Some(path) = &sanitizer.import_path {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            hasher.update(&bytes);
        }
    }
    let ids: Vec<&str> = registry.ids().collect();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(registry.get(id)?.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = std::io::BufWriter::new(file);
        for item in items {
            let line =
                serde_json::to_string(item).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(writer, "{line}").map_err(|e| Error::io(&tmp, e))?;
        }
        writer.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

// ── Stage implementations ────────────────────────────────────────────────

impl RunContext {
    pub fn load_original(&self) -> Result<Dataset> {
        load_dataset(&self.config.dataset.original, DatasetRole::Original)
    }

    fn atomize_options(&self) -> AtomizeOptions {
        AtomizeOptions {
            kind: self.config.atomizer.kind,
            template: self.config.atomizer.template.clone(),
            icl_template: self.config.atomizer.icl_template.clone(),
            summarize_template: self.config.atomizer.summarize_template.clone(),
        }
    }

    pub fn atomize_original(&self, original: &Dataset) -> Result<AtomizedDataset> {
        let claims = self.jsonl_stage("atomize-original", || {
            let outcome = atomize_dataset(
                original,
                Some(&self.chat),
                &self.registry,
                &self.atomize_options(),
            )?;
            Ok(outcome.atomized.claims)
        })?;
        Ok(AtomizedDataset {
            dataset_name: original.name.clone(),
            claims,
        })
    }

    fn atomize_sanitized(&self, method: &str, sanitized: &Dataset) -> Result<AtomizedDataset> {
        let claims = self.jsonl_stage(&format!("atomize-{method}"), || {
            let outcome = atomize_dataset(
                sanitized,
                Some(&self.chat),
                &self.registry,
                &self.atomize_options(),
            )?;
            Ok(outcome.atomized.claims)
        })?;
        Ok(AtomizedDataset {
            dataset_name: method.to_string(),
            claims,
        })
    }

    /// Builds (or loads) the auxiliary bundles for one strategy and seed.
    /// Per-record streams derive from the run seed and the record id, so one
    /// seed fixes the whole dataset's selection.
    pub fn aux_bundles(
        &self,
        atomized: &AtomizedDataset,
        strategy: SelectionStrategy,
        seed: u64,
    ) -> Result<(Vec<AuxiliaryInfo>, Vec<String>)> {
        let name = format!("aux-{}-{}", strategy.as_str(), seed);
        self.flagged_stage(&name, || {
            let by_record = group_claims(atomized);
            let paraphrase = self.config.aux.paraphrase.then_some((
                &self.chat,
                &self.registry,
                self.config.aux.paraphrase_template.as_str(),
            ));
            let results: Vec<Result<(AuxiliaryInfo, bool)>> = by_record
                .par_iter()
                .map(|(record_id, claims)| {
                    build_auxiliary_info(
                        claims,
                        strategy,
                        self.config.aux.k,
                        record_seed(seed, record_id),
                        paraphrase,
                    )
                })
                .collect();
            let mut bundles = Vec::new();
            let mut flagged = Vec::new();
            for result in results {
                let (bundle, flag) = result?;
                if flag {
                    flagged.push(bundle.record_id.clone());
                }
                bundles.push(bundle);
            }
            Ok((bundles, flagged))
        })
    }

    fn sanitized_dataset(
        &self,
        original: &Dataset,
        sanitizer: &SanitizerConfig,
    ) -> Result<(Dataset, Vec<PiiSpan>, Vec<String>)> {
        let (records, flagged) =
            self.flagged_stage(&format!("sanitized-{}", sanitizer.name), || {
                let outcome = sanitize(original, sanitizer, Some(&self.chat), &self.registry)?;
                Ok((outcome.dataset.records, outcome.flagged))
            })?;
        let spans = self.jsonl_stage(&format!("pii-{}", sanitizer.name), || {
            // Recomputing is cheap; the sidecar exists for auditability.
            let outcome = sanitize(original, sanitizer, Some(&self.chat), &self.registry)?;
            Ok(outcome.pii_spans)
        })?;
        let dataset = Dataset::new(sanitizer.name.clone(), DatasetRole::Sanitized, records)?;
        Ok((dataset, spans, flagged))
    }

    fn links(
        &self,
        method: &str,
        label: &str,
        index: &LinkIndex,
        mode: LinkMode,
        bundles: &[AuxiliaryInfo],
        needs_embed: bool,
    ) -> Result<Vec<LinkResult>> {
        self.jsonl_stage(label, || {
            let embed = needs_embed.then_some(&self.embed);
            let results: Vec<Result<LinkResult>> = bundles
                .par_iter()
                .map(|aux| {
                    link(aux, index, mode, embed).map_err(|e| Error::Stage {
                        stage: format!("link-{method}"),
                        message: format!("record {}: {e}", aux.record_id),
                    })
                })
                .collect();
            results.into_iter().collect()
        })
    }

    fn scores(
        &self,
        method: &str,
        seed: u64,
        original_claims: &BTreeMap<String, Vec<Claim>>,
        bundles: &[AuxiliaryInfo],
        links: &[LinkResult],
        sanitized: &Dataset,
    ) -> Result<Vec<RecordPrivacy>> {
        self.jsonl_stage(&format!("score-{method}-{seed}"), || {
            let linked_by_record: BTreeMap<&str, &LinkResult> =
                links.iter().map(|l| (l.record_id.as_str(), l)).collect();
            let text_by_id = text_index(sanitized);
            let options = self.config.judge.options();
            let results: Vec<Result<RecordPrivacy>> = bundles
                .par_iter()
                .map(|aux| {
                    let claims = original_claims.get(&aux.record_id).ok_or_else(|| {
                        Error::InvalidInput(format!("no claims for record {}", aux.record_id))
                    })?;
                    let linked = linked_by_record.get(aux.record_id.as_str()).ok_or_else(|| {
                        Error::InvalidInput(format!("no link result for {}", aux.record_id))
                    })?;
                    let passage = text_by_id
                        .get(linked.linked_id.as_str())
                        .copied()
                        .unwrap_or("");
                    let passage = if passage.is_empty() { " " } else { passage };
                    semantic_privacy(
                        claims,
                        aux,
                        &linked.linked_id,
                        passage,
                        &self.chat,
                        &self.registry,
                        &options,
                        self.config.judge.policy,
                    )
                })
                .collect();
            results.into_iter().collect()
        })
    }

    fn aux_only_scores(
        &self,
        seed: u64,
        original_claims: &BTreeMap<String, Vec<Claim>>,
        bundles: &[AuxiliaryInfo],
    ) -> Result<Vec<RecordPrivacy>> {
        self.jsonl_stage(&format!("auxonly-{seed}"), || {
            let options = self.config.judge.options();
            let results: Vec<Result<RecordPrivacy>> = bundles
                .par_iter()
                .map(|aux| {
                    let claims = original_claims.get(&aux.record_id).ok_or_else(|| {
                        Error::InvalidInput(format!("no claims for record {}", aux.record_id))
                    })?;
                    aux_only_baseline(claims, aux, &self.chat, &self.registry, &options)
                })
                .collect();
            results.into_iter().collect()
        })
    }

    fn category_labels(&self, atomized: &AtomizedDataset) -> Result<Vec<CategoryLabel>> {
        self.jsonl_stage("categories-original", || {
            let by_record = group_claims(atomized);
            let results: Vec<Result<Vec<CategoryLabel>>> = by_record
                .par_iter()
                .map(|(_, claims)| {
                    categorize_claims(
                        claims,
                        self.config.analysis.category_set,
                        &self.chat,
                        &self.registry,
                    )
                    .map(|(labels, _)| labels)
                })
                .collect();
            let mut labels = Vec::new();
            for result in results {
                labels.extend(result?);
            }
            Ok(labels)
        })
    }
}

/// Record id -> text lookup.
fn text_index(dataset: &Dataset) -> BTreeMap<&str, &str> {
    dataset
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect()
}

/// Claims grouped by record id in record order.
fn group_claims(atomized: &AtomizedDataset) -> Vec<(String, Vec<Claim>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<Claim>> = BTreeMap::new();
    for claim in &atomized.claims {
        if !map.contains_key(&claim.record_id) {
            order.push(claim.record_id.clone());
        }
        map.entry(claim.record_id.clone())
            .or_default()
            .push(claim.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let claims = map.remove(&id).unwrap_or_default();
            (id, claims)
        })
        .collect()
}

// ── Driver ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct UtilityStage {
    task_utility: Option<f64>,
    text_coherence: Option<f64>,
    category_utility: Option<f64>,
    flagged: Vec<String>,
    notes: Vec<String>,
}

/// Flat claim-level score line for the exported score files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClaimScoreLine {
    record_id: String,
    index: u32,
    samples: Vec<u8>,
    mode: u8,
    normalized: f64,
}

/// Runs the whole pipeline and writes `report.json` plus CSV tables.
pub fn run(config: RunConfig) -> Result<ReportBundle> {
    let ctx = RunContext::new(config)?;
    execute(&ctx, RunStage::Report)
}

/// Runs stages up to and including `stage`; the report is only assembled at
/// [`RunStage::Report`].
pub fn run_until(config: RunConfig, stage: RunStage) -> Result<Option<ReportBundle>> {
    let ctx = RunContext::new(config)?;
    if stage == RunStage::Report {
        return Ok(Some(execute(&ctx, stage)?));
    }
    execute_stages(&ctx, stage)?;
    Ok(None)
}

fn execute(ctx: &RunContext, stage: RunStage) -> Result<ReportBundle> {
    let mut bundle = execute_stages(ctx, stage)?;
    // Cache size is read after all stages so cold, warm, and resumed runs
    // agree on it.
    bundle.cache_stats = CacheStats {
        entries: ctx.cache.len()? as u64,
    };
    let out_dir = &ctx.config.out_dir;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, bundle.to_json()).map_err(|e| Error::io(&report_path, e))?;

    let tables_dir = out_dir.join("tables");
    std::fs::create_dir_all(&tables_dir).map_err(|e| Error::io(&tables_dir, e))?;
    let methods: Vec<&str> = bundle.method_order.iter().map(|s| s.as_str()).collect();
    let privacy_metrics = [
        "lexical_distance",
        "lexical_distance_bm25",
        "semantic_distance",
        "embedding_distance",
        "pii_existence",
        "task_utility",
        "text_coherence",
    ];
    let available: Vec<&str> = privacy_metrics
        .iter()
        .copied()
        .filter(|m| bundle.methods.values().any(|r| r.metric(m).is_some()))
        .collect();
    if !available.is_empty() {
        let table = compare_table(&bundle, &available, &methods)?;
        let path = tables_dir.join("compare.csv");
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }
    let linkage_metrics: Vec<String> = bundle
        .methods
        .values()
        .flat_map(|r| r.linkage_rates.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|s| format!("linkage_rate_{s}"))
        .collect();
    if !linkage_metrics.is_empty() {
        let refs: Vec<&str> = linkage_metrics.iter().map(|s| s.as_str()).collect();
        let table = compare_table(&bundle, &refs, &methods)?;
        let path = tables_dir.join("linkage.csv");
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(bundle)
}

fn execute_stages(ctx: &RunContext, through: RunStage) -> Result<ReportBundle> {
    let config = &ctx.config;
    let original = ctx.load_original()?;
    let mut failures: Vec<FailureNote> = Vec::new();

    // Stage: atomize.
    let atomized_original = ctx.atomize_original(&original)?;
    let original_claims: BTreeMap<String, Vec<Claim>> = group_claims(&atomized_original)
        .into_iter()
        .collect();
    if through == RunStage::Atomize {
        return Ok(empty_bundle(ctx, &original, failures));
    }

    // Stage: aux bundles for every (strategy, seed).
    let mut strategies: Vec<SelectionStrategy> = vec![config.aux.strategy];
    for s in &config.aux.linkage_strategies {
        if !strategies.contains(s) {
            strategies.push(*s);
        }
    }
    let mut aux: BTreeMap<(String, u64), Vec<AuxiliaryInfo>> = BTreeMap::new();
    let mut aux_flags: Vec<String> = Vec::new();
    for &seed in &config.seeds {
        for &strategy in &strategies {
            let (bundles, flags) = ctx.aux_bundles(&atomized_original, strategy, seed)?;
            aux_flags.extend(flags);
            aux.insert((strategy.as_str().to_string(), seed), bundles);
        }
    }
    if through == RunStage::Aux {
        return Ok(empty_bundle(ctx, &original, failures));
    }

    // PII spans on the originals feed the existence metric for every method.
    let original_spans: BTreeMap<String, Vec<PiiSpan>> = match &config.analysis.pii_spans_file {
        Some(path) => {
            let spans: Vec<PiiSpan> = load_jsonl(path)?;
            let mut map: BTreeMap<String, Vec<PiiSpan>> = BTreeMap::new();
            for span in spans {
                map.entry(span.record_id.clone()).or_default().push(span);
            }
            map
        }
        None => original
            .records
            .iter()
            .map(|r| {
                let spans = detect_pii(&r.text)
                    .into_iter()
                    .map(|s| PiiSpan {
                        record_id: r.id.clone(),
                        start: s.start,
                        end: s.end,
                        kind: s.kind.to_string(),
                        surface: s.surface,
                    })
                    .collect();
                (r.id.clone(), spans)
            })
            .collect(),
    };

    let labels: Option<Vec<CategoryLabel>> = if config.analysis.categorize
        && through >= RunStage::Analyze
    {
        match ctx.category_labels(&atomized_original) {
            Ok(labels) => Some(labels),
            Err(e) => {
                failures.push(FailureNote {
                    stage: "analyze".into(),
                    method: String::new(),
                    message: e.to_string(),
                });
                None
            }
        }
    } else {
        None
    };

    let mut method_reports: BTreeMap<String, MethodReport> = BTreeMap::new();
    let method_order: Vec<String> = config.sanitizers.iter().map(|s| s.name.clone()).collect();

    for sanitizer in &config.sanitizers {
        match process_method(
            ctx,
            sanitizer,
            &original,
            &original_claims,
            &original_spans,
            &aux,
            &strategies,
            labels.as_deref(),
            through,
        ) {
            Ok(Some(report)) => {
                method_reports.insert(sanitizer.name.clone(), report);
            }
            Ok(None) => {}
            Err(e) => failures.push(FailureNote {
                stage: "method".into(),
                method: sanitizer.name.clone(),
                message: e.to_string(),
            }),
        }
    }

    // Aux-only baseline (method independent).
    let mut aux_only_summary = None;
    if config.analysis.aux_only && through >= RunStage::Analyze {
        let result: Result<Vec<Vec<f64>>> = config
            .seeds
            .iter()
            .map(|&seed| {
                let bundles = &aux[&(config.aux.strategy.as_str().to_string(), seed)];
                let scores = ctx.aux_only_scores(seed, &original_claims, bundles)?;
                Ok(scores.iter().map(|r| r.value).collect())
            })
            .collect();
        match result.and_then(|values| dataset_privacy(&values)) {
            Ok(aggregate) => aux_only_summary = Some(MetricSummary::from_aggregate(aggregate)),
            Err(e) => failures.push(FailureNote {
                stage: "aux_only".into(),
                method: String::new(),
                message: e.to_string(),
            }),
        }
    }

    let mut bundle = empty_bundle(ctx, &original, failures);
    bundle.method_order = method_order;
    bundle.methods = method_reports;
    bundle.aux_only = aux_only_summary;
    Ok(bundle)
}

fn empty_bundle(ctx: &RunContext, original: &Dataset, failures: Vec<FailureNote>) -> ReportBundle {
    ReportBundle {
        run_name: ctx.config.name.clone(),
        config_digest: ctx.config_digest.clone(),
        dataset: original.name.clone(),
        seeds: ctx.config.seeds.clone(),
        method_order: Vec::new(),
        methods: BTreeMap::new(),
        aux_only: None,
        cache_stats: CacheStats { entries: 0 },
        failures,
    }
}

#[allow(clippy::too_many_arguments)]
fn process_method(
    ctx: &RunContext,
    sanitizer: &SanitizerConfig,
    original: &Dataset,
    original_claims: &BTreeMap<String, Vec<Claim>>,
    original_spans: &BTreeMap<String, Vec<PiiSpan>>,
    aux: &BTreeMap<(String, u64), Vec<AuxiliaryInfo>>,
    strategies: &[SelectionStrategy],
    labels: Option<&[CategoryLabel]>,
    through: RunStage,
) -> Result<Option<MethodReport>> {
    let config = &ctx.config;
    let method = sanitizer.name.as_str();
    let (sanitized, span_audit, san_flags) = ctx.sanitized_dataset(original, sanitizer)?;
    export_sanitized(ctx, method, &sanitized, &span_audit)?;
    let pair = pair_datasets(original.clone(), sanitized.clone());

    let mut report = MethodReport {
        alignment: Some(pair.alignment),
        ..MethodReport::default()
    };
    let mut flags: BTreeSet<String> = san_flags.into_iter().collect();

    if through == RunStage::Sanitize {
        return Ok(Some(report));
    }

    let san_atomized = ctx.atomize_sanitized(method, &sanitized)?;
    let has_claims = !san_atomized.claims.is_empty();

    // Indexes are cheap to rebuild; the embedding provider caches vectors.
    let primary_index: Option<LinkIndex> = if has_claims {
        let index = match config.linker.unit {
            IndexUnit::Claim => {
                build_claim_index(&san_atomized, config.linker.kind, Some(&ctx.embed))?
            }
            IndexUnit::Document => {
                build_document_index(&sanitized, config.linker.kind, Some(&ctx.embed))?
            }
        };
        Some(index)
    } else {
        report
            .notes
            .push("privacy metrics skipped: sanitized dataset has no claims".into());
        None
    };

    let mut semantic_per_seed: Vec<Vec<f64>> = Vec::new();
    let mut lexical_per_seed: Vec<Vec<f64>> = Vec::new();
    let mut lexical_bm25_per_seed: Vec<Vec<f64>> = Vec::new();
    let mut embedding_per_seed: Vec<Vec<f64>> = Vec::new();
    let mut pii_per_seed: Vec<Vec<f64>> = Vec::new();
    let mut linkage_by_strategy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all_record_values: Vec<f64> = Vec::new();
    let mut leak_counts: BTreeMap<String, u64> = BTreeMap::new();

    if let Some(primary_index) = &primary_index {
        let rouge_index = build_document_index(&sanitized, IndexKind::Rouge, None)?;
        let bm25_index = build_claim_index(&san_atomized, IndexKind::Bm25, None)?;
        let needs_embed = config.linker.kind == IndexKind::Dense;

        for &seed in &config.seeds {
            // Primary links per strategy (linkage table + scoring).
            let mut primary_links: Option<Vec<LinkResult>> = None;
            for &strategy in strategies {
                let bundles = &aux[&(strategy.as_str().to_string(), seed)];
                let label = format!("link-{method}-{}-{seed}", strategy.as_str());
                let links = ctx.links(
                    method,
                    &label,
                    primary_index,
                    config.linker.mode,
                    bundles,
                    needs_embed,
                )?;
                if pair.alignment == Alignment::OneToOneById {
                    let rate = linkage_rate(&links, &pair)?;
                    linkage_by_strategy
                        .entry(strategy.as_str().to_string())
                        .or_default()
                        .push(rate);
                }
                if strategy == config.aux.strategy {
                    primary_links = Some(links);
                }
            }
            let primary_links = primary_links.expect("primary strategy always runs");
            let bundles = &aux[&(config.aux.strategy.as_str().to_string(), seed)];

            if through >= RunStage::Score {
                let scores = ctx.scores(
                    method,
                    seed,
                    original_claims,
                    bundles,
                    &primary_links,
                    &sanitized,
                )?;
                export_claim_scores(ctx, method, seed, &scores)?;
                for record in &scores {
                    if record.judge_flagged || record.fell_back_all_claims {
                        flags.insert(record.record_id.clone());
                    }
                    all_record_values.push(record.value);
                }
                if let Some(labels) = labels {
                    let claim_scores: Vec<_> = scores
                        .iter()
                        .flat_map(|r| r.claim_scores.iter().cloned())
                        .collect();
                    for (category, count) in leakage_by_category(&claim_scores, labels) {
                        *leak_counts.entry(category).or_insert(0) += count;
                    }
                }
                semantic_per_seed.push(scores.iter().map(|r| r.value).collect());

                // Lexical baselines reuse their own linkers.
                let rouge_links = ctx.links(
                    method,
                    &format!("linkrouge-{method}-{seed}"),
                    &rouge_index,
                    LinkMode::MergedSingleQuery,
                    bundles,
                    false,
                )?;
                lexical_per_seed.push(lexical_values(&rouge_links, original, &sanitized));
                let bm25_links = ctx.links(
                    method,
                    &format!("linkbm25-{method}-{seed}"),
                    &bm25_index,
                    LinkMode::PerClaimMajority,
                    bundles,
                    false,
                )?;
                lexical_bm25_per_seed.push(lexical_values(&bm25_links, original, &sanitized));

                // Embedding and PII baselines follow the primary links.
                let san_text_by_id = text_index(&sanitized);
                let san_claims_by_record: BTreeMap<String, Vec<String>> =
                    group_claims(&san_atomized)
                        .into_iter()
                        .map(|(id, claims)| {
                            (id, claims.into_iter().map(|c| c.text).collect())
                        })
                        .collect();
                let bundle_by_record: BTreeMap<&str, &AuxiliaryInfo> = bundles
                    .iter()
                    .map(|b| (b.record_id.as_str(), b))
                    .collect();
                let mut embedding_values = Vec::new();
                let mut pii_values = Vec::new();
                for link_result in &primary_links {
                    let aux_bundle = bundle_by_record[link_result.record_id.as_str()];
                    let claims = &original_claims[&link_result.record_id];
                    let linked_claims = san_claims_by_record
                        .get(&link_result.linked_id)
                        .cloned()
                        .unwrap_or_default();
                    let value = if linked_claims.is_empty() {
                        1.0
                    } else {
                        embedding_distance_metric(claims, aux_bundle, &linked_claims, &ctx.embed)?
                    };
                    embedding_values.push(value);

                    let spans = original_spans
                        .get(&link_result.record_id)
                        .map(|s| s.as_slice())
                        .unwrap_or(&[]);
                    let aux_sources: Vec<String> = aux_bundle
                        .source_indices
                        .iter()
                        .filter_map(|&i| claims.iter().find(|c| c.index == i))
                        .map(|c| c.text.clone())
                        .collect();
                    let linked_text = san_text_by_id
                        .get(link_result.linked_id.as_str())
                        .copied()
                        .unwrap_or("");
                    pii_values.push(pii_existence_metric(spans, &aux_sources, linked_text).value);
                }
                embedding_per_seed.push(embedding_values);
                pii_per_seed.push(pii_values);
            }
        }
    }

    if through >= RunStage::Score {
        let mut insert = |name: &str, per_seed: &[Vec<f64>]| -> Result<()> {
            if !per_seed.is_empty() && per_seed.iter().all(|v| !v.is_empty()) {
                let aggregate = dataset_privacy(per_seed)?;
                report
                    .privacy
                    .insert(name.to_string(), MetricSummary::from_aggregate(aggregate));
            }
            Ok(())
        };
        insert("semantic_distance", &semantic_per_seed)?;
        insert("lexical_distance", &lexical_per_seed)?;
        insert("lexical_distance_bm25", &lexical_bm25_per_seed)?;
        insert("embedding_distance", &embedding_per_seed)?;
        insert("pii_existence", &pii_per_seed)?;
        for (strategy, rates) in linkage_by_strategy {
            let per_seed: Vec<Vec<f64>> = rates.iter().map(|&r| vec![r]).collect();
            report.linkage_rates.insert(
                strategy,
                MetricSummary::from_aggregate(dataset_privacy(&per_seed)?),
            );
        }
        report.histogram = score_histogram(&all_record_values, ctx.config.analysis.histogram_bins);
        report.category_leakage = leak_counts;
    }

    if through >= RunStage::Utility {
        let utility = utility_stage(ctx, method, original, &sanitized, &pair)?;
        if let Some(v) = utility.task_utility {
            report
                .utility
                .insert("task_utility".into(), MetricSummary::constant(v));
        }
        if let Some(v) = utility.text_coherence {
            report
                .utility
                .insert("text_coherence".into(), MetricSummary::constant(v));
        }
        if let Some(v) = utility.category_utility {
            report
                .utility
                .insert("category_utility".into(), MetricSummary::constant(v));
        }
        flags.extend(utility.flagged);
        report.notes.extend(utility.notes);
    }

    report.flagged_records = flags.into_iter().collect();
    Ok(Some(report))
}

/// Readable copies of each sanitized dataset (corpus format) and its
/// detected-span sidecar under `out_dir/sanitized/`.
fn export_sanitized(
    ctx: &RunContext,
    method: &str,
    sanitized: &Dataset,
    spans: &[PiiSpan],
) -> Result<()> {
    let dir = ctx.config.out_dir.join("sanitized");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    crate::corpus::save_dataset(sanitized, dir.join(format!("{method}.jsonl")))?;
    save_jsonl(&dir.join(format!("{method}.pii.jsonl")), spans)?;
    Ok(())
}

/// Flat claim-level score export under `out_dir/scores/`.
fn export_claim_scores(
    ctx: &RunContext,
    method: &str,
    seed: u64,
    scores: &[RecordPrivacy],
) -> Result<()> {
    let dir = ctx.config.out_dir.join("scores");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let lines: Vec<ClaimScoreLine> = scores
        .iter()
        .flat_map(|record| {
            record.claim_scores.iter().map(|s| ClaimScoreLine {
                record_id: s.claim_ref.record_id.clone(),
                index: s.claim_ref.index,
                samples: s.samples.clone(),
                mode: s.mode,
                normalized: s.normalized,
            })
        })
        .collect();
    save_jsonl(&dir.join(format!("{method}-seed{seed}.jsonl")), &lines)
}

fn lexical_values(links: &[LinkResult], original: &Dataset, sanitized: &Dataset) -> Vec<f64> {
    let orig_by_id = text_index(original);
    let san_by_id = text_index(sanitized);
    links
        .iter()
        .map(|l| {
            let orig_text = orig_by_id.get(l.record_id.as_str()).copied().unwrap_or("");
            let linked_text = san_by_id.get(l.linked_id.as_str()).copied().unwrap_or("");
            lexical_privacy(orig_text, linked_text)
        })
        .collect()
}

fn utility_stage(
    ctx: &RunContext,
    method: &str,
    original: &Dataset,
    sanitized: &Dataset,
    pair: &crate::corpus::DatasetPair,
) -> Result<UtilityStage> {
    let path = ctx.stage_path(&format!("utility-{method}")).with_extension("json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path,
            line: 0,
            message: e.to_string(),
        });
    }
    let config = &ctx.config;
    let mut stage = UtilityStage::default();

    let mcq_applicable = config.utility.mcq
        && original
            .records
            .iter()
            .all(|r| r.options.is_some() && r.answer.is_some());
    if config.utility.mcq && !mcq_applicable {
        stage
            .notes
            .push("task utility skipped: records lack options or answers".into());
    }
    if mcq_applicable {
        if pair.alignment == Alignment::OneToOneById {
            let profiles: BTreeMap<String, String> = sanitized
                .records
                .iter()
                .map(|r| (r.id.clone(), r.text.clone()))
                .collect();
            let outcome = mcq_accuracy(
                original,
                &profiles,
                &ctx.chat,
                &ctx.registry,
                &config.utility.mcq_template,
            )?;
            stage.task_utility = Some(outcome.accuracy);
            stage.flagged.extend(outcome.flagged);
        } else {
            stage
                .notes
                .push("task utility skipped: pair is not one-to-one aligned".into());
        }
    }

    if config.utility.coherence {
        match coherence_over_dataset(
            sanitized,
            &ctx.chat,
            &ctx.registry,
            &config.utility.coherence_template,
        ) {
            Ok(outcome) => {
                stage.text_coherence = Some(outcome.mean);
                stage.flagged.extend(outcome.flagged);
            }
            Err(Error::UnavailableMetric(message)) => {
                stage.notes.push(format!("text coherence unavailable: {message}"));
            }
            Err(e) => return Err(e),
        }
    }

    if config.utility.category_distribution {
        let original_labels: Vec<String> = original
            .records
            .iter()
            .filter_map(|r| r.category.clone())
            .collect();
        if original_labels.len() == original.len() {
            let mut sanitized_labels = Vec::new();
            for record in &sanitized.records {
                if record.text.is_empty() {
                    continue;
                }
                sanitized_labels.push(classify_conversation(
                    &record.text,
                    &ctx.chat,
                    &ctx.registry,
                    &config.utility.category_template,
                )?);
            }
            let original_dist = CategoryDistribution::from_labels(original_labels);
            let sanitized_dist = CategoryDistribution::from_labels(sanitized_labels);
            match normalized_chi2_utility(&original_dist, &sanitized_dist) {
                Ok(v) => stage.category_utility = Some(v),
                Err(Error::UnavailableMetric(message)) => {
                    stage
                        .notes
                        .push(format!("category utility unavailable: {message}"));
                }
                Err(e) => return Err(e),
            }
        } else {
            stage
                .notes
                .push("category utility skipped: original records lack categories".into());
        }
    }

    stage.flagged.sort();
    stage.flagged.dedup();
    let text =
        serde_json::to_string_pretty(&stage).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, &text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(stage)
}
