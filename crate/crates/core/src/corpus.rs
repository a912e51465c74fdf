//! Data model and ingestion for original/sanitized datasets.
//!
//! Datasets are line-delimited JSON, one record per line. Required keys are
//! `id` and `text`; task metadata (`question`, `options`, `answer`,
//! `category`, `summary`) is optional and unknown keys round-trip verbatim.
//! Datasets are immutable after load and safe to share across pipeline
//! stages.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One original or sanitized document plus its task metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// Option letter -> option text for MCQ-style records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// Set by the no-private-data sanitizer; the only case where an empty
    /// `text` is legal.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_private_data: bool,
    /// Unknown keys, preserved verbatim on round-trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Record {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Record {
            id: id.into(),
            text: text.into(),
            question: None,
            options: None,
            answer: None,
            category: None,
            summary: None,
            no_private_data: false,
            extra: BTreeMap::new(),
        }
    }

    /// Conversation-shaped records carry a category label; they get
    /// summarized before atomization.
    pub fn is_conversation(&self) -> bool {
        self.category.is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidRecord {
                id: String::new(),
                message: "record id must be nonempty".into(),
            });
        }
        if self.text.is_empty() && !self.no_private_data {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: "empty text is only legal with the no_private_data marker".into(),
            });
        }
        if let (Some(options), Some(answer)) = (&self.options, &self.answer) {
            if !options.contains_key(answer) {
                return Err(Error::InvalidRecord {
                    id: self.id.clone(),
                    message: format!(
                        "answer {:?} is not one of the option keys {:?}",
                        answer,
                        options.keys().collect::<Vec<_>>()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Whether a dataset holds the private originals or a sanitized release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Original,
    Sanitized,
}

/// An ordered collection of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: DatasetRole,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, role: DatasetRole, records: Vec<Record>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for record in &records {
            record.validate()?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::InvalidRecord {
                    id: record.id.clone(),
                    message: "duplicate record id".into(),
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            role,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// How original and sanitized datasets relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Every original id appears exactly once in the sanitized dataset;
    /// correct-linkage rate is defined.
    OneToOneById,
    /// Id sets differ (e.g. unconditioned synthesis); linkage rate is
    /// unavailable.
    Unaligned,
}

/// A paired original/sanitized dataset with its detected alignment.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub original: Dataset,
    pub sanitized: Dataset,
    pub alignment: Alignment,
}

/// Loads a line-delimited dataset. Errors name the offending line or id.
pub fn load_dataset(path: impl AsRef<Path>, role: DatasetRole) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: record.id.clone(),
            });
        }
        records.push(record);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        name,
        role,
        records,
    })
}

/// Writes a dataset in the line-delimited format read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in &dataset.records {
        let line = serde_json::to_string(record).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Pairs datasets, detecting one-to-one alignment by id. Never fails: an id
/// mismatch downgrades to [`Alignment::Unaligned`].
pub fn pair_datasets(original: Dataset, sanitized: Dataset) -> DatasetPair {
    let orig_ids: BTreeSet<&str> = original.ids().collect();
    let san_ids: BTreeSet<&str> = sanitized.ids().collect();
    // Ids are unique per dataset, so set equality is multiset equality.
    let alignment = if orig_ids == san_ids && original.len() == sanitized.len() {
        Alignment::OneToOneById
    } else {
        Alignment::Unaligned
    };
    DatasetPair {
        original,
        sanitized,
        alignment,
    }
}
