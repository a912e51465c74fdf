//! Report assembly: per-method metric summaries, CSV tables, and the JSON
//! bundle that two identical runs must reproduce byte for byte.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Alignment;
use crate::error::{Error, Result};
use crate::score::SeedAggregate;

/// Mean and across-seed std for one metric, with the per-seed means kept at
/// full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    pub fn from_aggregate(aggregate: SeedAggregate) -> Self {
        MetricSummary {
            mean: aggregate.mean,
            std: aggregate.std,
            per_seed: aggregate.per_seed_means,
        }
    }

    /// A seed-independent value (utility metrics).
    pub fn constant(value: f64) -> Self {
        MetricSummary {
            mean: value,
            std: 0.0,
            per_seed: vec![value],
        }
    }

    fn render(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.std)
    }
}

/// Everything measured for one sanitization method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MethodReport {
    pub alignment: Option<Alignment>,
    /// Privacy metrics: semantic_distance, lexical_distance,
    /// lexical_distance_bm25, embedding_distance, pii_existence.
    pub privacy: BTreeMap<String, MetricSummary>,
    /// Correct-linkage rate per aux selection strategy.
    pub linkage_rates: BTreeMap<String, MetricSummary>,
    /// task_utility, text_coherence, category_utility.
    pub utility: BTreeMap<String, MetricSummary>,
    /// Histogram of per-record semantic privacy values pooled across seeds.
    pub histogram: Vec<u64>,
    /// Leaked-claim counts per sensitive category, summed across seeds.
    pub category_leakage: BTreeMap<String, u64>,
    pub flagged_records: Vec<String>,
    pub notes: Vec<String>,
}

impl MethodReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        if let Some(m) = self.privacy.get(name) {
            return Some(m);
        }
        if let Some(m) = self.utility.get(name) {
            return Some(m);
        }
        if let Some(strategy) = name.strip_prefix("linkage_rate_") {
            return self.linkage_rates.get(strategy);
        }
        None
    }

    fn metric_names(&self) -> impl Iterator<Item = String> + '_ {
        self.privacy
            .keys()
            .chain(self.utility.keys())
            .cloned()
            .chain(self.linkage_rates.keys().map(|s| format!("linkage_rate_{s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureNote {
    pub stage: String,
    pub method: String,
    pub message: String,
}

/// The full run output. Serialized with stable ordering so identical runs
/// emit identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_name: String,
    pub config_digest: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    /// Presentation order of methods (config order).
    pub method_order: Vec<String>,
    pub methods: BTreeMap<String, MethodReport>,
    /// The "use aux information" baseline: semantic privacy against the aux
    /// claims alone.
    pub aux_only: Option<MetricSummary>,
    pub cache_stats: CacheStats,
    pub failures: Vec<FailureNote>,
}

/// The baseline row name accepted by [`compare_table`].
pub const AUX_ONLY_METHOD: &str = "use_aux_information";

impl ReportBundle {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report is serializable");
        text.push('\n');
        text
    }

    fn known_metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .methods
            .values()
            .flat_map(|m| m.metric_names().collect::<Vec<_>>())
            .collect();
        if self.aux_only.is_some() {
            names.push("semantic_distance".into());
        }
        names.sort();
        names.dedup();
        names
    }
}

/// Renders one CSV row per method and one column per metric; absent cells
/// print "-". Unknown metric or method names are errors.
pub fn compare_table(
    bundle: &ReportBundle,
    metrics: &[&str],
    methods: &[&str],
) -> Result<String> {
    let known = bundle.known_metrics();
    for metric in metrics {
        if !known.iter().any(|k| k == metric) {
            return Err(Error::InvalidInput(format!("unknown metric {metric:?}")));
        }
    }
    let mut out = String::new();
    out.push_str("method");
    for metric in metrics {
        out.push(',');
        out.push_str(metric);
    }
    out.push('\n');
    for method in methods {
        if *method == AUX_ONLY_METHOD {
            let summary = bundle
                .aux_only
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("unknown method {method:?}")))?;
            out.push_str(method);
            for metric in metrics {
                out.push(',');
                if *metric == "semantic_distance" {
                    out.push_str(&summary.render());
                } else {
                    out.push('-');
                }
            }
            out.push('\n');
            continue;
        }
        let report = bundle
            .methods
            .get(*method)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {method:?}")))?;
        out.push_str(method);
        for metric in metrics {
            out.push(',');
            match report.metric(metric) {
                Some(summary) => out.push_str(&summary.render()),
                None => out.push('-'),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ReportBundle {
        let mut methods = BTreeMap::new();
        let mut a = MethodReport::default();
        a.privacy.insert(
            "semantic_distance".into(),
            MetricSummary {
                mean: 0.52,
                std: 0.02,
                per_seed: vec![0.5, 0.54, 0.52],
            },
        );
        a.privacy
            .insert("lexical_distance".into(), MetricSummary::constant(0.71));
        a.utility
            .insert("task_utility".into(), MetricSummary::constant(0.69));
        methods.insert("no_sanitization".into(), a);
        let mut b = MethodReport::default();
        b.privacy
            .insert("semantic_distance".into(), MetricSummary::constant(0.9));
        methods.insert("pii_mask".into(), b);
        ReportBundle {
            run_name: "t".into(),
            config_digest: "abc".into(),
            dataset: "d".into(),
            seeds: vec![1],
            method_order: vec!["no_sanitization".into(), "pii_mask".into()],
            methods,
            aux_only: None,
            cache_stats: CacheStats { entries: 0 },
            failures: vec![],
        }
    }

    #[test]
    fn table_shape_and_formatting() {
        let table = compare_table(
            &bundle(),
            &["semantic_distance", "lexical_distance", "task_utility"],
            &["no_sanitization", "pii_mask"],
        )
        .unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3, "header plus two methods");
        assert!(lines[1].contains("0.52 (0.02)"));
        assert!(lines[2].contains('-'), "missing metrics render as dash");
    }

    #[test]
    fn unknown_metric_is_an_error() {
        let err = compare_table(&bundle(), &["mystery_metric"], &["pii_mask"]).unwrap_err();
        assert!(err.to_string().contains("unknown metric"));
        assert!(err.to_string().contains("mystery_metric"));
    }

    #[test]
    fn unknown_method_is_an_error() {
        let err =
            compare_table(&bundle(), &["semantic_distance"], &["missing_method"]).unwrap_err();
        assert!(err.to_string().contains("unknown method"));
    }

    #[test]
    fn json_round_trips() {
        let b = bundle();
        let text = b.to_json();
        let back: ReportBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(b, back);
        assert_eq!(text, back.to_json(), "serialization is stable");
    }
}
