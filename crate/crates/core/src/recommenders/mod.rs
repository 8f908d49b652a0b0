//! Backbone recommenders behind a common [`TrainedModel`] contract.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Interaction;

mod knn;
mod mf;
mod popular;

pub use knn::ItemKnn;
pub use mf::MatrixFactorization;
pub use popular::MostPopular;

#[derive(Debug, Error, PartialEq)]
pub enum RecommendError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommenderKind {
    MostPopular,
    ItemKnn,
    MatrixFactorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub kind: RecommenderKind,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    /// L2 penalty applied to the factors touched by each SGD step.
    pub regularization: f64,
    pub neighbors: usize,
    pub seed: u64,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            kind: RecommenderKind::MostPopular,
            embedding_dim: 16,
            learning_rate: 0.05,
            epochs: 20,
            negatives_per_positive: 1,
            regularization: 0.01,
            neighbors: 20,
            seed: 0,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<(), RecommendError> {
        if self.embedding_dim < 1 {
            return Err(RecommendError::Config("embedding_dim must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(RecommendError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RecommendError::Config("learning_rate must be positive".into()));
        }
        if self.negatives_per_positive < 1 || self.neighbors < 1 {
            return Err(RecommendError::Config(
                "negatives_per_positive and neighbors must be at least 1".into(),
            ));
        }
        if !(self.regularization >= 0.0) {
            return Err(RecommendError::Config("regularization must be non-negative".into()));
        }
        Ok(())
    }
}

/// An ordered recommendation list. Entries produced by generative decision
/// roles may lie outside the catalog.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList(pub Vec<String>);

impl Deref for RankedList {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl From<Vec<String>> for RankedList {
    fn from(items: Vec<String>) -> Self {
        RankedList(items)
    }
}

impl FromIterator<String> for RankedList {
    fn from_iter<T: IntoIterator<Item = String>>(iter: T) -> Self {
        RankedList(iter.into_iter().collect())
    }
}

/// Row-major embedding table: one `dim`-sized vector per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub subject_ids: Vec<String>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(subject_ids: Vec<String>, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(subject_ids.len() * dim, values.len(), "embedding shape mismatch");
        Self {
            subject_ids,
            dim,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1)).take(self.len())
    }

    /// Writes `subject_id,dim_0,...,dim_{d-1}` CSV. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(sink);
        let mut header = vec!["subject_id".to_string()];
        header.extend((0..self.dim).map(|d| format!("dim_{d}")));
        writer.write_record(&header)?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.row(i).iter().map(|v| v.to_string()));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(source: R) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().from_reader(source);
        let header = reader.headers().map_err(|e| e.to_string())?.clone();
        if header.get(0) != Some("subject_id") {
            return Err("embedding CSV must start with `subject_id`".into());
        }
        let dim = header.len() - 1;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| e.to_string())?;
            if record.len() != dim + 1 {
                return Err(format!("row for `{}` has {} columns", &record[0], record.len()));
            }
            ids.push(record[0].to_string());
            for v in record.iter().skip(1) {
                values.push(v.parse::<f64>().map_err(|e| format!("bad value `{v}`: {e}"))?);
            }
        }
        Ok(Self::new(ids, dim, values))
    }
}

/// Training input: the interactions to fit plus the full catalog, so items
/// without interactions remain recommendable.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub interactions: &'a [Interaction],
    pub catalog: &'a BTreeSet<String>,
}

/// Dense id ↔ index maps shared by the built-in models.
#[derive(Debug, Clone)]
pub(crate) struct Index {
    pub users: Vec<String>,
    pub user_pos: HashMap<String, usize>,
    pub items: Vec<String>,
    pub item_pos: HashMap<String, usize>,
    /// Interaction count per item index.
    pub popularity: Vec<f64>,
    /// Distinct item indices per user index, ascending.
    pub history: Vec<Vec<usize>>,
    /// `(user, item)` index pairs in canonical interaction order.
    pub positives: Vec<(usize, usize)>,
}

impl Index {
    pub fn build(snapshot: Snapshot<'_>) -> Result<Self, RecommendError> {
        if snapshot.interactions.is_empty() {
            return Err(RecommendError::Data("training snapshot is empty".into()));
        }
        let mut rows: Vec<&Interaction> = snapshot.interactions.iter().collect();
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

        let mut item_set: BTreeSet<&str> = snapshot.catalog.iter().map(String::as_str).collect();
        item_set.extend(rows.iter().map(|x| x.item.as_str()));
        let items: Vec<String> = item_set.into_iter().map(str::to_owned).collect();
        let users: Vec<String> = rows
            .iter()
            .map(|x| x.user.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let item_pos: HashMap<String, usize> =
            items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let user_pos: HashMap<String, usize> =
            users.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut popularity = vec![0.0; items.len()];
        let mut history = vec![Vec::new(); users.len()];
        let mut positives = Vec::with_capacity(rows.len());
        for x in rows {
            let (u, i) = (user_pos[&x.user], item_pos[&x.item]);
            popularity[i] += 1.0;
            history[u].push(i);
            positives.push((u, i));
        }
        for h in &mut history {
            h.sort_unstable();
            h.dedup();
        }
        Ok(Self {
            users,
            user_pos,
            items,
            item_pos,
            popularity,
            history,
            positives,
        })
    }
}

/// A trained backbone. Scoring is pure; models are immutable after training.
pub trait TrainedModel: Send + Sync {
    fn kind(&self) -> RecommenderKind;

    /// Catalog in ascending id order.
    fn items(&self) -> &[String];

    fn item_index(&self, item: &str) -> Option<usize>;

    /// Interaction counts aligned with [`TrainedModel::items`].
    fn popularity(&self) -> &[f64];

    /// Scores for every catalog item, or `None` when the user is unknown.
    fn user_scores(&self, user: &str) -> Option<Vec<f64>>;

    fn embeddings(&self) -> Option<(EmbeddingMatrix, EmbeddingMatrix)> {
        None
    }

    /// Unknown users are scored by global popularity.
    fn score(&self, user: &str, item: &str) -> Option<f64> {
        let i = self.item_index(item)?;
        match self.user_scores(user) {
            Some(scores) => Some(scores[i]),
            None => Some(self.popularity()[i]),
        }
    }

    /// Top-`k` eligible items by descending score, ties by ascending item id.
    fn recommend(
        &self,
        user: &str,
        k: usize,
        exclusions: &BTreeSet<String>,
    ) -> Result<RankedList, RecommendError> {
        if k == 0 {
            return Err(RecommendError::Usage("K must be at least 1".into()));
        }
        let scores = self
            .user_scores(user)
            .unwrap_or_else(|| self.popularity().to_vec());
        Ok(top_k(self.items(), &scores, k, exclusions))
    }
}

pub(crate) fn top_k(
    items: &[String],
    scores: &[f64],
    k: usize,
    exclusions: &BTreeSet<String>,
) -> RankedList {
    let mut eligible: Vec<usize> = (0..items.len())
        .filter(|&i| !exclusions.contains(&items[i]))
        .collect();
    // items are sorted, so index order is item-id order
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < eligible.len() {
        eligible.select_nth_unstable_by(k - 1, by_score);
        eligible.truncate(k);
    }
    eligible.sort_by(by_score);
    eligible.into_iter().map(|i| items[i].clone()).collect()
}

pub fn train(
    config: &RecommenderConfig,
    snapshot: Snapshot<'_>,
) -> Result<Box<dyn TrainedModel>, RecommendError> {
    train_from(config, snapshot, None)
}

/// Like [`train`], but embedding models start from `init` where subjects match.
pub fn train_from(
    config: &RecommenderConfig,
    snapshot: Snapshot<'_>,
    init: Option<&(EmbeddingMatrix, EmbeddingMatrix)>,
) -> Result<Box<dyn TrainedModel>, RecommendError> {
    config.validate()?;
    let index = Index::build(snapshot)?;
    Ok(match config.kind {
        RecommenderKind::MostPopular => Box::new(MostPopular::fit(index)),
        RecommenderKind::ItemKnn => Box::new(ItemKnn::fit(index, config.neighbors)),
        RecommenderKind::MatrixFactorization => Box::new(MatrixFactorization::fit(index, config, init)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn rows(pairs: &[(&str, &str)]) -> Vec<Interaction> {
        pairs
            .iter()
            .enumerate()
            .map(|(t, (u, i))| Interaction::new(*u, *i, t as u64))
            .collect()
    }

    fn config(kind: RecommenderKind) -> RecommenderConfig {
        RecommenderConfig {
            kind,
            embedding_dim: 4,
            epochs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn exhaustion_clamp() {
        let cat = catalog(&["A", "B"]);
        let data = rows(&[("u", "A")]);
        let model = train(&config(RecommenderKind::MostPopular), Snapshot { interactions: &data, catalog: &cat }).unwrap();
        let list = model.recommend("u", 5, &catalog(&["A"])).unwrap();
        assert_eq!(list.0, ["B"]);
    }

    #[test]
    fn equal_scores_break_by_item_id() {
        let cat = catalog(&["B", "A"]);
        let data = rows(&[("u", "A"), ("v", "B")]);
        let model = train(&config(RecommenderKind::MostPopular), Snapshot { interactions: &data, catalog: &cat }).unwrap();
        assert_eq!(model.recommend("w", 2, &BTreeSet::new()).unwrap().0, ["A", "B"]);
    }

    #[test]
    fn zero_k_is_usage_error() {
        let cat = catalog(&["A"]);
        let data = rows(&[("u", "A")]);
        let model = train(&config(RecommenderKind::MostPopular), Snapshot { interactions: &data, catalog: &cat }).unwrap();
        assert!(matches!(model.recommend("u", 0, &BTreeSet::new()), Err(RecommendError::Usage(_))));
    }

    #[test]
    fn bad_config_and_empty_snapshot() {
        let cat = catalog(&["A"]);
        let data = rows(&[("u", "A")]);
        let mut cfg = config(RecommenderKind::MatrixFactorization);
        cfg.embedding_dim = 0;
        assert!(matches!(
            train(&cfg, Snapshot { interactions: &data, catalog: &cat }),
            Err(RecommendError::Config(_))
        ));
        assert!(matches!(
            train(&config(RecommenderKind::ItemKnn), Snapshot { interactions: &[], catalog: &cat }),
            Err(RecommendError::Data(_))
        ));
    }

    #[test]
    fn embedding_csv_round_trip() {
        let m = EmbeddingMatrix::new(vec!["a".into(), "b".into()], 2, vec![0.1, -2.5, 1e-17, 3.0]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,dim_0,dim_1\n"));
        assert_eq!(EmbeddingMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<(u8, u8)>, u8, usize, Vec<u8>, u8)> {
        (
            proptest::collection::vec((0u8..4, 0u8..6), 1..20),
            0u8..5,
            1usize..8,
            proptest::collection::vec(0u8..6, 0..4),
            0u8..3,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recommend_matches_brute_force_top_k((pairs, user, k, excl, kind) in arb_case()) {
            let cat: BTreeSet<String> = (0..6).map(|i| format!("i{i}")).collect();
            let data: Vec<Interaction> = pairs.iter().enumerate()
                .map(|(t, (u, i))| Interaction::new(format!("u{u}"), format!("i{i}"), t as u64))
                .collect();
            let kind = [RecommenderKind::MostPopular, RecommenderKind::ItemKnn, RecommenderKind::MatrixFactorization][kind as usize];
            let model = train(&config(kind), Snapshot { interactions: &data, catalog: &cat }).unwrap();
            let exclusions: BTreeSet<String> = excl.iter().map(|i| format!("i{i}")).collect();
            let user = format!("u{user}");
            let list = model.recommend(&user, k, &exclusions).unwrap();

            // brute force: score every eligible item, stable sort by (-score, id)
            let mut eligible: Vec<(f64, String)> = cat.iter()
                .filter(|i| !exclusions.contains(*i))
                .map(|i| (model.score(&user, i).unwrap(), i.clone()))
                .collect();
            eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expected: Vec<String> = eligible.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(&list.0, &expected);
            let distinct: BTreeSet<&String> = list.iter().collect();
            prop_assert_eq!(distinct.len(), list.len());
        }

        #[test]
        fn training_ignores_input_order(pairs in proptest::collection::vec((0u8..4, 0u8..6, 0u64..30), 1..20), rot in 0usize..20) {
            let cat: BTreeSet<String> = (0..6).map(|i| format!("i{i}")).collect();
            let mut data: Vec<Interaction> = pairs.iter()
                .map(|(u, i, t)| Interaction::new(format!("u{u}"), format!("i{i}"), *t))
                .collect();
            let a = train(&config(RecommenderKind::MatrixFactorization), Snapshot { interactions: &data, catalog: &cat }).unwrap();
            let k = rot % data.len();
            data.rotate_left(k);
            let b = train(&config(RecommenderKind::MatrixFactorization), Snapshot { interactions: &data, catalog: &cat }).unwrap();
            prop_assert_eq!(a.embeddings(), b.embeddings());
        }
    }
}
