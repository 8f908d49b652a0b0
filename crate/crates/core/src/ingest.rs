//! Parsing and validation of interaction logs and attribute tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTERACTION_HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];
pub const ATTRIBUTE_HEADER: [&str; 3] = ["subject_id", "attribute", "value"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for IngestError {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        IngestError::Parse {
            line,
            message: err.to_string(),
        }
    }
}

/// A single `(user, item, timestamp)` event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }

    /// Canonical ordering key: timestamp first, then user, then item.
    pub fn sort_key(&self) -> (u64, &str, &str) {
        (self.timestamp, &self.user, &self.item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    User,
    Item,
}

impl FromStr for SubjectKind {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(SubjectKind::User),
            "item" => Ok(SubjectKind::Item),
            other => Err(IngestError::Usage(format!(
                "unknown subject kind `{other}` (expected `user` or `item`)"
            ))),
        }
    }
}

impl fmt::Display for SubjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubjectKind::User => f.write_str("user"),
            SubjectKind::Item => f.write_str("item"),
        }
    }
}

/// Supported interaction-log encodings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LogFormat {
    #[default]
    Csv,
}

/// Untyped, possibly multi-valued attributes per subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub kind: SubjectKind,
    pub records: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub vocab: BTreeMap<String, BTreeSet<String>>,
}

impl AttributeTable {
    pub fn empty(kind: SubjectKind) -> Self {
        Self {
            kind,
            records: BTreeMap::new(),
            vocab: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self, subject: &str, attribute: &str) -> &[String] {
        self.records
            .get(subject)
            .and_then(|attrs| attrs.get(attribute))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Adds one `(subject, attribute, value)` row, rejecting exact duplicates.
    pub fn insert(
        &mut self,
        subject: &str,
        attribute: &str,
        value: &str,
    ) -> Result<(), IngestError> {
        let values = self
            .records
            .entry(subject.to_owned())
            .or_default()
            .entry(attribute.to_owned())
            .or_default();
        if values.iter().any(|v| v == value) {
            return Err(IngestError::Validation(format!(
                "duplicate attribute row ({subject}, {attribute}, {value})"
            )));
        }
        values.push(value.to_owned());
        self.vocab
            .entry(attribute.to_owned())
            .or_default()
            .insert(value.to_owned());
        Ok(())
    }

    /// Drops records whose subject is not in `keep`; returns how many were dropped.
    /// The vocabulary is rebuilt from the surviving records.
    fn retain_subjects(&mut self, keep: &BTreeSet<String>) -> usize {
        let before = self.records.len();
        self.records.retain(|subject, _| keep.contains(subject));
        let dropped = before - self.records.len();
        if dropped > 0 {
            self.vocab.clear();
            for attrs in self.records.values() {
                for (name, values) in attrs {
                    self.vocab
                        .entry(name.clone())
                        .or_default()
                        .extend(values.iter().cloned());
                }
            }
        }
        dropped
    }
}

/// A validated, canonically ordered interaction log with its catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub users: BTreeSet<String>,
    pub items: BTreeSet<String>,
    pub user_attributes: AttributeTable,
    pub item_attributes: AttributeTable,
    /// Attribute records dropped because their subject never appears in the log.
    pub dropped_attribute_records: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source)
}

fn check_header(
    records: &mut csv::StringRecordsIter<'_, impl Read>,
    expected: &[&str; 3],
) -> Result<bool, IngestError> {
    match records.next() {
        None => Ok(false),
        Some(header) => {
            let header = header?;
            let got: Vec<&str> = header.iter().map(str::trim).collect();
            if got != expected {
                return Err(IngestError::Parse {
                    line: 1,
                    message: format!(
                        "expected header `{}`, found `{}`",
                        expected.join(","),
                        got.join(",")
                    ),
                });
            }
            Ok(true)
        }
    }
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn parse_interaction_log<R: Read>(
    source: R,
    format: LogFormat,
) -> Result<Vec<Interaction>, IngestError> {
    let LogFormat::Csv = format;
    let mut reader = csv_reader(source);
    let mut records = reader.records();
    if !check_header(&mut records, &INTERACTION_HEADER)? {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for record in records {
        let record = record?;
        let line = row_line(&record);
        if record.len() != 3 {
            return Err(IngestError::Parse {
                line,
                message: format!("expected 3 columns, found {}", record.len()),
            });
        }
        let (user, item, ts) = (record[0].trim(), record[1].trim(), record[2].trim());
        if user.is_empty() || item.is_empty() {
            return Err(IngestError::Parse {
                line,
                message: "empty user_id or item_id".into(),
            });
        }
        let timestamp = parse_timestamp(ts).map_err(|message| IngestError::Parse { line, message })?;
        out.push(Interaction::new(user, item, timestamp));
    }
    Ok(out)
}

fn parse_timestamp(raw: &str) -> Result<u64, String> {
    if let Ok(ts) = raw.parse::<u64>() {
        return Ok(ts);
    }
    if raw.starts_with('-') && raw[1..].chars().all(|c| c.is_ascii_digit()) && raw.len() > 1 {
        return Err(format!("negative timestamp `{raw}`"));
    }
    Err(format!("timestamp `{raw}` is not a non-negative integer"))
}

pub fn parse_attribute_table<R: Read>(
    source: R,
    kind: SubjectKind,
) -> Result<AttributeTable, IngestError> {
    let mut reader = csv_reader(source);
    let mut records = reader.records();
    let mut table = AttributeTable::empty(kind);
    if !check_header(&mut records, &ATTRIBUTE_HEADER)? {
        return Ok(table);
    }
    for record in records {
        let record = record?;
        let line = row_line(&record);
        if record.len() != 3 {
            return Err(IngestError::Parse {
                line,
                message: format!("expected 3 columns, found {}", record.len()),
            });
        }
        let (subject, attribute, value) = (record[0].trim(), record[1].trim(), record[2].trim());
        if subject.is_empty() || attribute.is_empty() {
            return Err(IngestError::Parse {
                line,
                message: "empty subject_id or attribute".into(),
            });
        }
        table.insert(subject, attribute, value).map_err(|e| match e {
            IngestError::Validation(msg) => IngestError::Validation(format!("line {line}: {msg}")),
            other => other,
        })?;
    }
    Ok(table)
}

/// Builds the canonical dataset: catalog and user set come from the log,
/// interactions are sorted by `(timestamp, user, item)`.
pub fn build_dataset(
    mut interactions: Vec<Interaction>,
    mut user_attributes: AttributeTable,
    mut item_attributes: AttributeTable,
) -> Result<Dataset, IngestError> {
    interactions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    if let Some(dup) = interactions.windows(2).find(|w| w[0] == w[1]) {
        let d = &dup[0];
        return Err(IngestError::Validation(format!(
            "duplicate interaction ({}, {}, {})",
            d.user, d.item, d.timestamp
        )));
    }
    let users: BTreeSet<String> = interactions.iter().map(|x| x.user.clone()).collect();
    let items: BTreeSet<String> = interactions.iter().map(|x| x.item.clone()).collect();
    let dropped =
        user_attributes.retain_subjects(&users) + item_attributes.retain_subjects(&items);
    if dropped > 0 {
        tracing::warn!(dropped, "attribute records for subjects absent from the log dropped");
    }
    Ok(Dataset {
        interactions,
        users,
        items,
        user_attributes,
        item_attributes,
        dropped_attribute_records: dropped,
    })
}

pub fn write_interaction_log<W: Write>(sink: W, interactions: &[Interaction]) -> csv::Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    writer.write_record(INTERACTION_HEADER)?;
    for x in interactions {
        writer.write_record([x.user.as_str(), x.item.as_str(), &x.timestamp.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_attribute_table<W: Write>(sink: W, table: &AttributeTable) -> csv::Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    writer.write_record(ATTRIBUTE_HEADER)?;
    for (subject, attrs) in &table.records {
        for (name, values) in attrs {
            for value in values {
                writer.write_record([subject, name, value])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Returns true when the interaction list has no repeated `(user, item, timestamp)`.
pub fn has_unique_triples(interactions: &[Interaction]) -> bool {
    let mut seen = HashSet::with_capacity(interactions.len());
    interactions.iter().all(|x| seen.insert(x))
}
