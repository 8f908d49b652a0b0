//! Adapter contract for plugging a real text-generation backend into the
//! generator roles, plus a record/replay cache so such runs stay reproducible.
//!
//! No network client ships with the crate; callers implement [`LlmBackend`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AttributeSchema, Profile, Provenance};
use crate::recommenders::RankedList;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("no recorded completion for request {0}")]
    CacheMiss(String),
    #[error("replay cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parse failures are a normal outcome of generation, not a crash.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("could not parse completion: {0}")]
pub struct ParseFailure(pub String);

pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, BackendError>;
}

/// What a profile request asks for; the parser keeps only these attributes.
#[derive(Debug, Clone)]
pub struct ProfileRequest<'a> {
    pub subject: &'a str,
    pub schema: &'a AttributeSchema,
}

/// Parses `attribute: value[, value...]` lines. Unrequested attributes are
/// dropped; values outside the vocabulary are kept and flagged.
pub fn parse_profile(text: &str, request: &ProfileRequest<'_>) -> Result<Profile, ParseFailure> {
    let mut attributes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in text.lines() {
        let Some((name, values)) = line.split_once(':') else { continue };
        let name = name.trim().trim_start_matches(['-', '*']).trim();
        if !request.schema.contains_key(name) {
            continue;
        }
        let entry = attributes.entry(name.to_owned()).or_default();
        for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
            if !entry.iter().any(|e| e == v) {
                entry.push(v.to_owned());
            }
        }
    }
    attributes.retain(|_, v| !v.is_empty());
    if attributes.is_empty() {
        return Err(ParseFailure(format!(
            "no requested attribute found for `{}`",
            request.subject
        )));
    }
    let fabricated = attributes
        .iter()
        .map(|(name, values)| {
            let vocab = &request.schema[name];
            (name.clone(), values.iter().any(|v| !vocab.contains(v)))
        })
        .collect();
    Ok(Profile {
        subject: request.subject.to_owned(),
        attributes,
        provenance: Provenance::Generated,
        fabricated,
    })
}

/// Picks whichever of the two offered items the completion names first.
pub fn parse_item_choice(text: &str, first: &str, second: &str) -> Result<String, ParseFailure> {
    let pos = |id: &str| text.find(id);
    match (pos(first), pos(second)) {
        (Some(a), Some(b)) => Ok(if a <= b { first } else { second }.to_owned()),
        (Some(_), None) => Ok(first.to_owned()),
        (None, Some(_)) => Ok(second.to_owned()),
        (None, None) => Err(ParseFailure(format!("neither `{first}` nor `{second}` mentioned"))),
    }
}

/// One identifier per line, optional `1.`/`-` markers stripped, duplicates
/// dropped, truncated to `k`.
pub fn parse_ranked_list(text: &str, k: usize) -> Result<RankedList, ParseFailure> {
    let mut seen = BTreeSet::new();
    let items: Vec<String> = text
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')', '-', '*'])
                .trim()
        })
        .filter(|l| !l.is_empty())
        .filter(|l| seen.insert(l.to_string()))
        .take(k)
        .map(str::to_owned)
        .collect();
    if items.is_empty() {
        return Err(ParseFailure("empty ranked list".into()));
    }
    Ok(RankedList(items))
}

pub fn request_hash(prompt: &str, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub seed: u64,
    pub prompt: String,
    pub completion: String,
}

/// Append-only JSON-lines cache keyed by [`request_hash`].
#[derive(Debug)]
pub struct ReplayCache {
    path: PathBuf,
    entries: HashMap<String, String>,
}

impl ReplayCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line)
                    .map_err(|e| BackendError::Cache(format!("line {}: {e}", n + 1)))?;
                entries.entry(entry.key).or_insert(entry.completion);
            }
        }
        Ok(Self { path, entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, prompt: &str, seed: u64, completion: &str) -> Result<(), BackendError> {
        let key = request_hash(prompt, seed);
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        let entry = CacheEntry {
            key: key.clone(),
            seed,
            prompt: prompt.to_owned(),
            completion: completion.to_owned(),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(&entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        writeln!(file, "{line}")?;
        self.entries.insert(key, entry.completion);
        Ok(())
    }
}

/// Serves completions from the cache; on a miss, forwards to `live` (when
/// present) and records the answer.
pub struct CachedBackend<B> {
    live: Option<B>,
    cache: Mutex<ReplayCache>,
}

impl<B: LlmBackend> CachedBackend<B> {
    pub fn recording(live: B, cache: ReplayCache) -> Self {
        Self {
            live: Some(live),
            cache: Mutex::new(cache),
        }
    }

    pub fn replay_only(cache: ReplayCache) -> Self {
        Self {
            live: None,
            cache: Mutex::new(cache),
        }
    }
}

impl<B: LlmBackend> LlmBackend for CachedBackend<B> {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, BackendError> {
        let key = request_hash(prompt, seed);
        let mut cache = self.cache.lock().expect("cache lock poisoned");
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.to_owned());
        }
        let live = self.live.as_ref().ok_or(BackendError::CacheMiss(key))?;
        let completion = live.complete(prompt, seed)?;
        cache.record(prompt, seed, &completion)?;
        Ok(completion)
    }
}
