//! On-disk trace directory: everything `diagnose` needs to rebuild a report.
//!
//! ```text
//! trace.json                 sizes, warnings, config echo, per-period schedule
//! catalog_popularity.csv     item_id,count over D^(0)
//! user_attributes.csv        ground-truth user attributes
//! period_{n}/recs.csv        user_id,rank,item_id
//! period_{n}/injected.csv    user_id,item_id,timestamp
//! period_{n}/reference.csv   user_id,item_id (held-out ground truth)
//! period_{n}/generated.jsonl one generated-content record per line
//! period_{n}/embeddings_{user,item}.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{parse_attribute_table, parse_interaction_log, write_attribute_table, write_interaction_log, LogFormat, SubjectKind};
use crate::loop_engine::{LoopTrace, PeriodTrace, PipelineConfig};
use crate::recommenders::{EmbeddingMatrix, RankedList};
use crate::riskgen::GeneratedRecord;
use crate::timeline::SplitConfig;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed trace file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io { path: path.to_owned(), source }
}

fn malformed(path: &Path, message: impl ToString) -> TraceError {
    TraceError::Malformed { path: path.to_owned(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodManifest {
    pub index: usize,
    pub tau: u64,
    pub dataset_size: usize,
    pub injected: usize,
    pub has_embeddings: bool,
    pub quotas: BTreeMap<String, usize>,
}

/// Contents of `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub split: SplitConfig,
    pub pipeline: PipelineConfig,
    pub cutoff_time: u64,
    pub initial_size: usize,
    pub final_size: usize,
    pub common_users: usize,
    pub catalog_size: usize,
    pub warnings: Vec<String>,
    /// Free-form echo of the run configuration (e.g. the diagnostics settings).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub periods: Vec<PeriodManifest>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, TraceError> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> TraceError + '_ {
    move |e| malformed(path, e)
}

fn create(path: &Path) -> Result<BufWriter<File>, TraceError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_pairs<'a>(path: &Path, header: [&str; 2], rows: impl Iterator<Item = (&'a str, &'a str)>) -> Result<(), TraceError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for (a, b) in rows {
        w.write_record([a, b]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_period(dir: &Path, p: &PeriodTrace) -> Result<(), TraceError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("recs.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["user_id", "rank", "item_id"]).map_err(csv_err(&path))?;
    for (user, list) in &p.ranked_lists {
        for (rank, item) in list.iter().enumerate() {
            w.write_record([user.as_str(), &(rank + 1).to_string(), item.as_str()])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("injected.csv");
    write_interaction_log(create(&path)?, &p.injected).map_err(csv_err(&path))?;

    write_pairs(
        &dir.join("reference.csv"),
        ["user_id", "item_id"],
        p.ground_truth.iter().flat_map(|(u, items)| items.iter().map(move |i| (u.as_str(), i.as_str()))),
    )?;

    let path = dir.join("generated.jsonl");
    let mut out = create(&path)?;
    for record in &p.generated {
        serde_json::to_writer(&mut out, record).map_err(|e| malformed(&path, e))?;
        out.write_all(b"\n").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    if let Some((users, items)) = &p.embeddings {
        for (name, m) in [("embeddings_user.csv", users), ("embeddings_item.csv", items)] {
            let path = dir.join(name);
            m.write_csv(create(&path)?).map_err(csv_err(&path))?;
        }
    }
    Ok(())
}

pub fn period_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("period_{index}"))
}

/// Writes the whole trace under `root`, creating it if needed.
pub fn write_trace(root: &Path, trace: &LoopTrace, extra: serde_json::Value) -> Result<(), TraceError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let manifest = TraceManifest {
        split: trace.split,
        pipeline: trace.pipeline.clone(),
        cutoff_time: trace.cutoff_time,
        initial_size: trace.initial_size,
        final_size: trace.periods.last().map_or(trace.initial_size, |p| p.dataset_size),
        common_users: trace.common_users,
        catalog_size: trace.catalog.len(),
        warnings: trace.warnings.clone(),
        extra,
        periods: trace
            .periods
            .iter()
            .map(|p| PeriodManifest {
                index: p.index,
                tau: p.tau,
                dataset_size: p.dataset_size,
                injected: p.injected.len(),
                has_embeddings: p.embeddings.is_some(),
                quotas: p.quotas.clone(),
            })
            .collect(),
    };
    let path = root.join("trace.json");
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| malformed(&path, e))?;
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;

    let path = root.join("catalog_popularity.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["item_id", "count"]).map_err(csv_err(&path))?;
    for (item, count) in &trace.initial_popularity {
        w.write_record([item.as_str(), &count.to_string()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = root.join("user_attributes.csv");
    write_attribute_table(create(&path)?, &trace.user_attributes).map_err(csv_err(&path))?;

    for p in &trace.periods {
        write_period(&period_dir(root, p.index), p)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, TraceError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, TraceError> {
    let mut r = csv::ReaderBuilder::new().from_reader(open(path)?);
    let found = r.headers().map_err(csv_err(path))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(malformed(path, format!("expected header {header:?}")));
    }
    r.records()
        .map(|row| {
            let row = row.map_err(|e| malformed(path, e))?;
            if row.len() != header.len() {
                return Err(malformed(path, format!("row has {} fields", row.len())));
            }
            Ok(row)
        })
        .collect()
}

fn read_period(dir: &Path, m: &PeriodManifest) -> Result<(PeriodTrace, Vec<String>), TraceError> {
    let mut warnings = Vec::new();

    let path = dir.join("recs.csv");
    let mut ranked: BTreeMap<String, Vec<(usize, String)>> =
        m.quotas.keys().map(|u| (u.clone(), Vec::new())).collect();
    for row in read_rows(&path, &["user_id", "rank", "item_id"])? {
        let rank: usize = row[1].parse().map_err(|e| malformed(&path, format!("rank `{}`: {e}", &row[1])))?;
        ranked.entry(row[0].to_string()).or_default().push((rank, row[2].to_string()));
    }
    let mut ranked_lists = BTreeMap::new();
    for (user, mut entries) in ranked {
        entries.sort();
        if entries.iter().enumerate().any(|(i, (r, _))| *r != i + 1) {
            return Err(malformed(&path, format!("ranks for `{user}` are not 1..K")));
        }
        ranked_lists.insert(user, entries.into_iter().map(|(_, i)| i).collect::<RankedList>());
    }

    let path = dir.join("injected.csv");
    let injected = parse_interaction_log(open(&path)?, LogFormat::Csv).map_err(|e| malformed(&path, e))?;

    let path = dir.join("reference.csv");
    let mut ground_truth: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in read_rows(&path, &["user_id", "item_id"])? {
        ground_truth.entry(row[0].to_string()).or_default().push(row[1].to_string());
    }

    let path = dir.join("generated.jsonl");
    let mut generated = Vec::new();
    for (n, line) in open(&path)?.lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GeneratedRecord =
            serde_json::from_str(&line).map_err(|e| malformed(&path, format!("line {}: {e}", n + 1)))?;
        generated.push(record);
    }

    let read_matrix = |name: &str| -> Result<Option<EmbeddingMatrix>, TraceError> {
        let path = dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        EmbeddingMatrix::read_csv(open(&path)?).map(Some).map_err(|e| malformed(&path, e))
    };
    let embeddings = match (read_matrix("embeddings_user.csv")?, read_matrix("embeddings_item.csv")?) {
        (Some(u), Some(i)) => Some((u, i)),
        _ => {
            if m.has_embeddings {
                warnings.push(format!("period {}: embedding snapshot missing", m.index));
            }
            None
        }
    };

    Ok((
        PeriodTrace {
            index: m.index,
            tau: m.tau,
            dataset_size: m.dataset_size,
            quotas: m.quotas.clone(),
            ground_truth,
            ranked_lists,
            injected,
            generated,
            embeddings,
        },
        warnings,
    ))
}

/// Reads a trace directory back. Missing embedding snapshots are tolerated
/// (reported as warnings); anything else missing or malformed is an error.
pub fn read_trace(root: &Path) -> Result<(LoopTrace, TraceManifest), TraceError> {
    let path = root.join("trace.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: TraceManifest = serde_json::from_str(&text).map_err(|e| malformed(&path, e))?;

    let path = root.join("catalog_popularity.csv");
    let mut initial_popularity = BTreeMap::new();
    for row in read_rows(&path, &["item_id", "count"])? {
        let count: u64 = row[1].parse().map_err(|e| malformed(&path, format!("count `{}`: {e}", &row[1])))?;
        initial_popularity.insert(row[0].to_string(), count);
    }
    if initial_popularity.len() != manifest.catalog_size {
        return Err(malformed(&path, format!("{} items, manifest says {}", initial_popularity.len(), manifest.catalog_size)));
    }
    let catalog: BTreeSet<String> = initial_popularity.keys().cloned().collect();

    let path = root.join("user_attributes.csv");
    let user_attributes = parse_attribute_table(open(&path)?, SubjectKind::User).map_err(|e| malformed(&path, e))?;

    let mut warnings = manifest.warnings.clone();
    let mut periods = Vec::with_capacity(manifest.periods.len());
    for m in &manifest.periods {
        let (p, w) = read_period(&period_dir(root, m.index), m)?;
        if p.injected.len() != m.injected {
            return Err(malformed(
                &period_dir(root, m.index).join("injected.csv"),
                format!("{} rows, manifest says {}", p.injected.len(), m.injected),
            ));
        }
        warnings.extend(w);
        periods.push(p);
    }

    let trace = LoopTrace {
        split: manifest.split,
        pipeline: manifest.pipeline.clone(),
        cutoff_time: manifest.cutoff_time,
        initial_size: manifest.initial_size,
        common_users: manifest.common_users,
        catalog,
        initial_popularity,
        user_attributes,
        warnings,
        periods,
    };
    Ok((trace, manifest))
}
