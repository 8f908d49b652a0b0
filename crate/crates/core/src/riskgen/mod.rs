//! Parameterized stand-ins for generative recommender roles.
//!
//! Each generator is a pure function of its config, the subject and an
//! invocation index. The knobs map onto the risks being diagnosed:
//! `popularity_temperature` drives popularity bias, `fef_probability` injects
//! fabricated values or identifiers, `lc_flip_probability` controls how often a
//! repeated call disagrees with the first one, and `attribute_skew` sets the
//! prior over emitted profile attributes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AttributeTable, Interaction};
use crate::recommenders::RankedList;
use crate::seeding::rng_for;

pub mod backend;

/// Prefix reserved for fabricated attribute values and item identifiers.
pub const FABRICATED_PREFIX: &str = "FAB::";

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("augmentation error: {0}")]
    Augmentation(String),
    #[error("generation error: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorRole {
    Augmenter,
    Representer,
    Decision,
}

impl GeneratorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorRole::Augmenter => "augmenter",
            GeneratorRole::Representer => "representer",
            GeneratorRole::Decision => "decision",
        }
    }
}

impl fmt::Display for GeneratorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// β ≥ 0. Zero is uniform choice; `inf` is greedy toward popular items.
    #[serde(with = "temperature")]
    pub popularity_temperature: f64,
    pub fef_probability: f64,
    pub lc_flip_probability: f64,
    /// Prior weights over emitted values, per attribute.
    pub attribute_skew: BTreeMap<String, BTreeMap<String, f64>>,
    /// Mixture weight of the user's history distribution against the skew prior.
    pub history_weight: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            popularity_temperature: 1.0,
            fef_probability: 0.0,
            lc_flip_probability: 0.0,
            attribute_skew: BTreeMap::new(),
            history_weight: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(GenerationError::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        unit("fef_probability", self.fef_probability)?;
        unit("lc_flip_probability", self.lc_flip_probability)?;
        unit("history_weight", self.history_weight)?;
        if !(self.popularity_temperature >= 0.0) {
            return Err(GenerationError::Config(format!(
                "popularity_temperature must be non-negative, got {}",
                self.popularity_temperature
            )));
        }
        for (attr, weights) in &self.attribute_skew {
            if weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(GenerationError::Config(format!(
                    "attribute_skew for `{attr}` has a negative or non-finite weight"
                )));
            }
            if !weights.values().any(|w| *w > 0.0) {
                return Err(GenerationError::Config(format!(
                    "attribute_skew for `{attr}` needs at least one positive weight"
                )));
            }
        }
        Ok(())
    }

    /// Same knobs, reseeded for one period of the loop.
    pub fn for_period(&self, period: usize) -> Self {
        Self {
            seed: crate::seeding::derive_seed(self.seed, &["period".into(), period.into()]),
            ..self.clone()
        }
    }

    fn rng(&self, role: GeneratorRole, subject: &str, invocation: u64) -> ChaCha8Rng {
        rng_for(self.seed, &[role.as_str().into(), subject.into(), invocation.into()])
    }
}

/// JSON has no infinity, so `inf` travels as a string.
mod temperature {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

pub fn is_fabricated(id: &str) -> bool {
    id.starts_with(FABRICATED_PREFIX)
}

fn fabricate(rng: &mut ChaCha8Rng, namespace: &str) -> String {
    format!("{FABRICATED_PREFIX}{namespace}::{:08x}", rng.random::<u32>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub subject: String,
    pub attributes: BTreeMap<String, Vec<String>>,
    pub provenance: Provenance,
    pub fabricated: BTreeMap<String, bool>,
}

/// Observed vocabulary per attribute name.
pub type AttributeSchema = BTreeMap<String, BTreeSet<String>>;

fn normalized(weights: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    (total > 0.0).then(|| weights.iter().map(|w| w / total).collect())
}

/// Generates a profile for `user`. Each attribute is fabricated with
/// probability `fef_probability`; otherwise it is drawn from the skew prior
/// mixed with the value frequencies found in the user's history items.
pub fn infer_profile(
    config: &GeneratorConfig,
    user: &str,
    history: &[&BTreeMap<String, Vec<String>>],
    schema: &AttributeSchema,
    invocation: u64,
) -> Result<Profile, GenerationError> {
    if schema.is_empty() {
        return Err(GenerationError::Usage("attribute schema is empty".into()));
    }
    let mut rng = config.rng(GeneratorRole::Representer, user, invocation);
    let mut attributes = BTreeMap::new();
    let mut fabricated = BTreeMap::new();
    for (attr, vocab) in schema {
        if vocab.is_empty() {
            return Err(GenerationError::Usage(format!("attribute `{attr}` has an empty vocabulary")));
        }
        let fab = rng.random::<f64>() < config.fef_probability;
        let value = if fab {
            fabricate(&mut rng, attr)
        } else {
            let values: Vec<&String> = vocab.iter().collect();
            let skew = config.attribute_skew.get(attr).and_then(|w| {
                normalized(&values.iter().map(|v| w.get(*v).copied().unwrap_or(0.0)).collect::<Vec<_>>())
            });
            let mut counts: HashMap<&str, f64> = HashMap::new();
            for item_attrs in history {
                for v in item_attrs.get(attr).into_iter().flatten() {
                    *counts.entry(v.as_str()).or_default() += 1.0;
                }
            }
            let hist = normalized(
                &values.iter().map(|v| counts.get(v.as_str()).copied().unwrap_or(0.0)).collect::<Vec<_>>(),
            );
            let weights = match (skew, hist) {
                (Some(s), Some(h)) => s
                    .iter()
                    .zip(&h)
                    .map(|(s, h)| (1.0 - config.history_weight) * s + config.history_weight * h)
                    .collect(),
                (Some(s), None) => s,
                (None, Some(h)) => h,
                (None, None) => vec![1.0; values.len()],
            };
            let pick = WeightedIndex::new(&weights)
                .map_err(|e| GenerationError::Generation(format!("attribute `{attr}`: {e}")))?
                .sample(&mut rng);
            values[pick].clone()
        };
        fabricated.insert(attr.clone(), !vocab.contains(&value));
        attributes.insert(attr.clone(), vec![value]);
    }
    Ok(Profile {
        subject: user.to_owned(),
        attributes,
        provenance: Provenance::Generated,
        fabricated,
    })
}

/// Catalog items with their popularity, ordered by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPool {
    items: Vec<String>,
    popularity: Vec<f64>,
}

impl ItemPool {
    pub fn new(catalog: &BTreeSet<String>, counts: &HashMap<String, u64>) -> Self {
        let items: Vec<String> = catalog.iter().cloned().collect();
        let popularity = items
            .iter()
            .map(|i| counts.get(i).copied().unwrap_or(0) as f64)
            .collect();
        Self { items, popularity }
    }

    pub fn from_interactions(catalog: &BTreeSet<String>, interactions: &[Interaction]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for x in interactions {
            *counts.entry(x.item.clone()).or_default() += 1;
        }
        Self::new(catalog, &counts)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn without(&self, excluded: &BTreeSet<String>) -> Self {
        let (items, popularity) = self
            .items
            .iter()
            .zip(&self.popularity)
            .filter(|(i, _)| !excluded.contains(*i))
            .map(|(i, p)| (i.clone(), *p))
            .unzip();
        Self { items, popularity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: &str) -> bool {
        self.position(item).is_some()
    }

    fn position(&self, item: &str) -> Option<usize> {
        self.items.binary_search_by(|x| x.as_str().cmp(item)).ok()
    }

    pub fn popularity_of(&self, item: &str) -> f64 {
        self.position(item).map_or(0.0, |i| self.popularity[i])
    }
}

/// Orders `items` by popularity-tempered sampling without replacement
/// (Gumbel top-k over `β·ln(1 + pop)`), returning the first `k`.
fn tempered_order(
    items: &[(String, f64)],
    beta: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut keyed: Vec<(f64, &str)> = if beta.is_infinite() {
        items.iter().map(|(id, pop)| (*pop, id.as_str())).collect()
    } else {
        items
            .iter()
            .map(|(id, pop)| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let gumbel = -(-u.ln()).ln();
                let logit = if beta == 0.0 { 0.0 } else { beta * pop.ln_1p() };
                (logit + gumbel, id.as_str())
            })
            .collect()
    };
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    keyed.into_iter().take(k).map(|(_, id)| id.to_owned()).collect()
}

/// Candidate mode reorders a backbone's candidates; open mode samples from
/// the whole catalog and may replace slots with fabricated identifiers.
pub fn rerank_or_generate(
    config: &GeneratorConfig,
    user: &str,
    candidates: Option<&RankedList>,
    k: usize,
    pool: &ItemPool,
    invocation: u64,
) -> Result<RankedList, GenerationError> {
    if k == 0 {
        return Err(GenerationError::Usage("K must be at least 1".into()));
    }
    let beta = config.popularity_temperature;
    let mut rng = config.rng(GeneratorRole::Decision, user, invocation);
    match candidates {
        Some(cands) => {
            if k > cands.len() {
                return Err(GenerationError::Usage(format!(
                    "K = {k} exceeds {} candidates",
                    cands.len()
                )));
            }
            let scored: Vec<(String, f64)> =
                cands.iter().map(|c| (c.clone(), pool.popularity_of(c))).collect();
            Ok(tempered_order(&scored, beta, k, &mut rng).into())
        }
        None => {
            if pool.is_empty() {
                return Err(GenerationError::Generation("catalog is empty".into()));
            }
            let scored: Vec<(String, f64)> =
                pool.items.iter().cloned().zip(pool.popularity.iter().copied()).collect();
            let mut list = tempered_order(&scored, beta, k, &mut rng);
            for slot in &mut list {
                if rng.random::<f64>() < config.fef_probability {
                    *slot = fabricate(&mut rng, "item");
                }
            }
            Ok(list.into())
        }
    }
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn attribute_tokens(attrs: Option<&BTreeMap<String, Vec<String>>>) -> BTreeSet<String> {
    attrs
        .into_iter()
        .flatten()
        .flat_map(|(name, values)| values.iter().map(move |v| format!("{name}={v}")))
        .collect()
}

fn prefer_first(beta: f64, delta: f64, rng: &mut ChaCha8Rng) -> bool {
    let p = if beta.is_infinite() {
        match delta.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        }
    } else {
        1.0 / (1.0 + (-beta * delta).exp())
    };
    rng.random::<f64>() < p
}

/// For every user in the snapshot, samples `pairs_per_user` pairs of distinct
/// cold items and emits the preferred one as a synthetic interaction at
/// `timestamp`. Preference is attribute Jaccard overlap with the user's
/// history plus a `ln(1 + popularity)` prior.
pub fn augment_interactions(
    config: &GeneratorConfig,
    snapshot: &[Interaction],
    item_attributes: &AttributeTable,
    cold_items: &[String],
    pairs_per_user: usize,
    timestamp: u64,
) -> Result<Vec<Interaction>, GenerationError> {
    if pairs_per_user == 0 {
        return Err(GenerationError::Usage("pairs_per_user must be at least 1".into()));
    }
    let cold: BTreeSet<&str> = cold_items.iter().map(String::as_str).collect();
    if cold.len() < 2 {
        return Err(GenerationError::Augmentation(format!(
            "need at least 2 cold items, found {}",
            cold.len()
        )));
    }
    let mut popularity: HashMap<&str, f64> = HashMap::new();
    let mut history: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for x in snapshot {
        *popularity.entry(x.item.as_str()).or_default() += 1.0;
        history.entry(x.user.as_str()).or_default().insert(x.item.as_str());
    }
    if let Some(warm) = cold.iter().find(|i| popularity.contains_key(*i)) {
        return Err(GenerationError::Augmentation(format!(
            "item `{warm}` has interactions in the snapshot"
        )));
    }
    let cold: Vec<&str> = cold.into_iter().collect();
    let cold_tokens: Vec<BTreeSet<String>> = cold
        .iter()
        .map(|i| attribute_tokens(item_attributes.records.get(*i)))
        .collect();

    let beta = config.popularity_temperature;
    let mut out = Vec::with_capacity(history.len() * pairs_per_user);
    for (user, items) in &history {
        let profile: BTreeSet<String> = items
            .iter()
            .flat_map(|i| attribute_tokens(item_attributes.records.get(*i)))
            .collect();
        let pref = |c: usize| jaccard(&profile, &cold_tokens[c]) + popularity.get(cold[c]).copied().unwrap_or(0.0).ln_1p();
        let mut rng = config.rng(GeneratorRole::Augmenter, user, 0);
        for _ in 0..pairs_per_user {
            let pair = rand::seq::index::sample(&mut rng, cold.len(), 2);
            let (a, b) = (pair.index(0), pair.index(1));
            let chosen = if prefer_first(beta, pref(a) - pref(b), &mut rng) { a } else { b };
            out.push(Interaction::new(*user, cold[chosen], timestamp));
        }
    }
    Ok(out)
}

/// Second and later trials replay trial 1 unless a flip with probability
/// `lc_flip_probability` fires, in which case the generator is re-invoked
/// with a fresh invocation index.
pub fn repeat_invocation<T>(
    config: &GeneratorConfig,
    role: GeneratorRole,
    subject: &str,
    trial: u64,
    mut generate: impl FnMut(u64) -> T,
) -> T {
    if trial <= 1 {
        return generate(0);
    }
    let mut rng = rng_for(config.seed, &["lc".into(), role.as_str().into(), subject.into(), trial.into()]);
    if rng.random::<f64>() < config.lc_flip_probability {
        generate(trial)
    } else {
        generate(0)
    }
}

/// Output payload of a generated-content record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratedOutput {
    Attributes(BTreeMap<String, Vec<String>>),
    Items(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FabricationFlags {
    PerAttribute(BTreeMap<String, bool>),
    PerEntry(Vec<bool>),
}

/// One line of `generated.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub period: usize,
    pub role: GeneratorRole,
    pub subject: String,
    pub output: GeneratedOutput,
    pub fabricated: FabricationFlags,
    pub trial: u32,
}

impl GeneratedRecord {
    pub fn profile(period: usize, trial: u32, profile: &Profile) -> Self {
        Self {
            period,
            role: GeneratorRole::Representer,
            subject: profile.subject.clone(),
            output: GeneratedOutput::Attributes(profile.attributes.clone()),
            fabricated: FabricationFlags::PerAttribute(profile.fabricated.clone()),
            trial,
        }
    }

    pub fn items(
        period: usize,
        role: GeneratorRole,
        trial: u32,
        subject: &str,
        items: &[String],
        in_catalog: impl Fn(&str) -> bool,
    ) -> Self {
        Self {
            period,
            role,
            subject: subject.to_owned(),
            output: GeneratedOutput::Items(items.to_vec()),
            fabricated: FabricationFlags::PerEntry(items.iter().map(|i| !in_catalog(i)).collect()),
            trial,
        }
    }
}

#[cfg(test)]
mod tests;
