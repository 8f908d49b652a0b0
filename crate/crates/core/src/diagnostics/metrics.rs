//! Bias and hallucination metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;
use crate::ingest::{AttributeTable, Interaction};
use crate::recommenders::RankedList;

/// Value frequencies of one attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub attribute: String,
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl Histogram {
    pub fn from_counts(attribute: impl Into<String>, counts: BTreeMap<String, u64>) -> Self {
        let total = counts.values().sum();
        Self {
            attribute: attribute.into(),
            counts,
            total,
        }
    }

    pub fn share(&self, value: &str) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(value).copied().unwrap_or(0) as f64 / self.total as f64
    }

    /// Most frequent value, ties broken by the smallest value.
    pub fn mode(&self) -> Option<&str> {
        self.counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(v, _)| v.as_str())
    }
}

/// Counts every occurrence of `attribute` across the records, including
/// multi-valued ones.
pub fn attribute_distribution<'a>(
    records: impl IntoIterator<Item = &'a BTreeMap<String, Vec<String>>>,
    attribute: &str,
) -> Result<Histogram, DiagnosticsError> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut seen = false;
    for record in records {
        if let Some(values) = record.get(attribute) {
            seen = true;
            for v in values {
                *counts.entry(v.clone()).or_default() += 1;
            }
        }
    }
    if !seen {
        return Err(DiagnosticsError::Usage(format!("unknown attribute `{attribute}`")));
    }
    Ok(Histogram::from_counts(attribute, counts))
}

pub fn table_distribution(table: &AttributeTable, attribute: &str) -> Result<Histogram, DiagnosticsError> {
    if !table.vocab.contains_key(attribute) {
        return Err(DiagnosticsError::Usage(format!("unknown attribute `{attribute}`")));
    }
    attribute_distribution(table.records.values(), attribute)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub tv_distance: f64,
    pub top1_share_delta: f64,
}

/// Total-variation distance between the normalized histograms, plus how much
/// more mass the generated mode carries than the same value in the reference.
pub fn distribution_divergence(
    generated: &Histogram,
    reference: &Histogram,
) -> Result<Divergence, DiagnosticsError> {
    if generated.total == 0 || reference.total == 0 {
        return Err(DiagnosticsError::Usage("histogram with zero total".into()));
    }
    let support: BTreeSet<&String> = generated.counts.keys().chain(reference.counts.keys()).collect();
    let tv = 0.5
        * support
            .iter()
            .map(|v| (generated.share(v) - reference.share(v)).abs())
            .sum::<f64>();
    let mode = generated.mode().expect("non-empty histogram");
    Ok(Divergence {
        tv_distance: tv.clamp(0.0, 1.0),
        top1_share_delta: generated.share(mode) - reference.share(mode),
    })
}

/// Attribute values or item ids attached to one subject.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub subject: String,
    pub values: BTreeSet<String>,
}

impl ObservationSet {
    pub fn new<I, S>(subject: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            subject: subject.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }
}

/// Pooled `1 − Σ|generated ∩ truth| / Σ|truth|`.
pub fn fef_rate(pairs: &[(ObservationSet, ObservationSet)]) -> Result<f64, DiagnosticsError> {
    if pairs.is_empty() {
        return Err(DiagnosticsError::Usage("no observation pairs".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (generated, truth) in pairs {
        if truth.values.is_empty() {
            return Err(DiagnosticsError::Domain(format!(
                "empty ground-truth set for `{}`",
                truth.subject
            )));
        }
        hit += generated.values.intersection(&truth.values).count();
        total += truth.values.len();
    }
    Ok((1.0 - hit as f64 / total as f64).clamp(0.0, 1.0))
}

/// Share of recommended entries that are not catalog members.
pub fn catalog_fef_rate<'a>(
    lists: impl IntoIterator<Item = &'a RankedList>,
    catalog: &BTreeSet<String>,
) -> Result<f64, DiagnosticsError> {
    let (mut outside, mut total) = (0usize, 0usize);
    for list in lists {
        total += list.len();
        outside += list.iter().filter(|i| !catalog.contains(*i)).count();
    }
    if total == 0 {
        return Err(DiagnosticsError::Usage("no recommended entries".into()));
    }
    Ok(outside as f64 / total as f64)
}

/// Output of one invocation for contradiction checks. Sets compare as sets,
/// ranked lists compare in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observation {
    Set(BTreeSet<String>),
    Ranked(RankedList),
}

/// Fraction of trial pairs whose two outputs differ.
pub fn lc_rate(trials: &[(Observation, Observation)]) -> Result<f64, DiagnosticsError> {
    if trials.is_empty() {
        return Err(DiagnosticsError::Usage("no trials".into()));
    }
    let mut differ = 0usize;
    for pair in trials {
        let unequal = match pair {
            (Observation::Set(a), Observation::Set(b)) => a != b,
            (Observation::Ranked(a), Observation::Ranked(b)) => a != b,
            _ => {
                return Err(DiagnosticsError::Usage(
                    "trial pair mixes a set with a ranked list".into(),
                ))
            }
        };
        differ += usize::from(unequal);
    }
    Ok(differ as f64 / trials.len() as f64)
}

/// Interaction counts per catalog item over a stated training snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityIndex {
    pub counts: BTreeMap<String, u64>,
}

impl PopularityIndex {
    /// Every catalog item gets an entry; interactions on non-catalog items are ignored.
    pub fn new<'a>(
        catalog: &BTreeSet<String>,
        interactions: impl IntoIterator<Item = &'a Interaction>,
    ) -> Self {
        let mut index = Self {
            counts: catalog.iter().map(|i| (i.clone(), 0)).collect(),
        };
        index.add(interactions);
        index
    }

    pub fn add<'a>(&mut self, interactions: impl IntoIterator<Item = &'a Interaction>) {
        for x in interactions {
            if let Some(c) = self.counts.get_mut(&x.item) {
                *c += 1;
            }
        }
    }

    pub fn contains(&self, item: &str) -> bool {
        self.counts.contains_key(item)
    }

    pub fn get(&self, item: &str) -> u64 {
        self.counts.get(item).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub std_error: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let quantile = |q: f64| {
            let pos = q * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: n,
            min: sorted[0],
            q1: quantile(0.25),
            median: quantile(0.5),
            q3: quantile(0.75),
            max: sorted[n - 1],
            mean,
            std_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub per_user: BTreeMap<String, f64>,
    pub summary: Summary,
    /// Users skipped because nothing in their list was a catalog item.
    pub skipped: Vec<String>,
}

/// Per user: mean popularity of the recommended catalog items minus mean
/// popularity of the reference items.
pub fn popularity_gap(
    ranked_lists: &BTreeMap<String, RankedList>,
    reference_items: &BTreeMap<String, Vec<String>>,
    index: &PopularityIndex,
) -> Result<GapStats, DiagnosticsError> {
    let mean_pop = |items: &mut dyn Iterator<Item = &String>| {
        let (mut sum, mut n) = (0.0, 0usize);
        for i in items.filter(|i| index.contains(i)) {
            sum += index.get(i) as f64;
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    };
    let mut per_user = BTreeMap::new();
    let mut skipped = Vec::new();
    for (user, list) in ranked_lists {
        let reference = reference_items.get(user).ok_or_else(|| {
            DiagnosticsError::Usage(format!("user `{user}` has no reference items"))
        })?;
        if list.is_empty() || reference.is_empty() {
            return Err(DiagnosticsError::Usage(format!("user `{user}` has an empty list")));
        }
        let Some(rec) = mean_pop(&mut list.iter()) else {
            tracing::warn!(user, "ranked list entirely outside the catalog; skipped");
            skipped.push(user.clone());
            continue;
        };
        let Some(truth) = mean_pop(&mut reference.iter()) else {
            skipped.push(user.clone());
            continue;
        };
        per_user.insert(user.clone(), rec - truth);
    }
    if let Some(user) = reference_items.keys().find(|u| !ranked_lists.contains_key(*u)) {
        return Err(DiagnosticsError::Usage(format!("user `{user}` has no ranked list")));
    }
    let gaps: Vec<f64> = per_user.values().copied().collect();
    let summary = Summary::of(&gaps)
        .ok_or_else(|| DiagnosticsError::Metric("every user was skipped".into()))?;
    Ok(GapStats {
        per_user,
        summary,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[&str]) -> BTreeSet<String> {
        values.iter().map(|s| s.to_string()).collect()
    }

    fn obs(values: &[&str]) -> ObservationSet {
        ObservationSet::new("s", values.iter().copied())
    }

    #[test]
    fn distribution_counts_occurrences() {
        let rec = |g: &str| BTreeMap::from([("gender".to_string(), vec![g.to_string()])]);
        let profiles = [rec("Male"), rec("Male"), rec("Male"), rec("Female")];
        let h = attribute_distribution(profiles.iter(), "gender").unwrap();
        assert_eq!(h.counts, BTreeMap::from([("Male".into(), 3), ("Female".into(), 1)]));
        assert_eq!(h.total, 4);
        assert!(matches!(attribute_distribution(profiles.iter(), "age"), Err(DiagnosticsError::Usage(_))));
    }

    #[test]
    fn divergence_examples() {
        let h = |pairs: &[(&str, u64)]| {
            Histogram::from_counts("a", pairs.iter().map(|(v, c)| (v.to_string(), *c)).collect())
        };
        let a = h(&[("A", 3), ("B", 1)]);
        assert_eq!(distribution_divergence(&a, &a).unwrap().tv_distance, 0.0);
        assert_eq!(distribution_divergence(&a, &h(&[("C", 2)])).unwrap().tv_distance, 1.0);
        let d = distribution_divergence(&a, &h(&[("A", 1), ("B", 3)])).unwrap();
        assert!((d.tv_distance - 0.5).abs() < 1e-15);
        assert!((d.top1_share_delta - 0.5).abs() < 1e-15);
        assert!(distribution_divergence(&a, &h(&[])).is_err());
    }

    #[test]
    fn fef_examples() {
        assert_eq!(fef_rate(&[(obs(&["a", "b"]), obs(&["a", "b"]))]).unwrap(), 0.0);
        assert_eq!(fef_rate(&[(obs(&["x"]), obs(&["a"])), (obs(&["y"]), obs(&["b"]))]).unwrap(), 1.0);
        assert_eq!(fef_rate(&[(obs(&["a", "b", "c"]), obs(&["a", "d"]))]).unwrap(), 0.5);
        assert!(matches!(fef_rate(&[]), Err(DiagnosticsError::Usage(_))));
        assert!(matches!(fef_rate(&[(obs(&["a"]), obs(&[]))]), Err(DiagnosticsError::Domain(_))));
    }

    #[test]
    fn catalog_fef_examples() {
        let catalog = set(&["i0", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8"]);
        let clean: RankedList = (0..9).map(|i| format!("i{i}")).collect();
        assert_eq!(catalog_fef_rate([&clean], &catalog).unwrap(), 0.0);
        let mut dirty = clean.clone();
        dirty.0.push("FAB::item::1".into());
        assert!((catalog_fef_rate([&dirty], &catalog).unwrap() - 0.1).abs() < 1e-15);
        let empty = RankedList::default();
        assert!(catalog_fef_rate([&empty], &catalog).is_err());
    }

    #[test]
    fn lc_examples() {
        let same = (Observation::Set(set(&["a"])), Observation::Set(set(&["a"])));
        let diff = (Observation::Set(set(&["a"])), Observation::Set(set(&["b"])));
        assert_eq!(lc_rate(&[same.clone(), same.clone()]).unwrap(), 0.0);
        assert_eq!(lc_rate(&[diff.clone(), diff.clone()]).unwrap(), 1.0);
        assert_eq!(lc_rate(&[same.clone(), same.clone(), same.clone(), diff]).unwrap(), 0.25);
        let ranked = |v: &[&str]| Observation::Ranked(v.iter().map(|s| s.to_string()).collect());
        // order matters for ranked lists but not for sets
        assert_eq!(lc_rate(&[(ranked(&["a", "b"]), ranked(&["b", "a"]))]).unwrap(), 1.0);
        assert_eq!(
            lc_rate(&[(Observation::Set(set(&["a", "b"])), Observation::Set(set(&["b", "a"])))]).unwrap(),
            0.0
        );
        assert!(lc_rate(&[(Observation::Set(set(&["a"])), ranked(&["a"]))]).is_err());
        assert!(lc_rate(&[]).is_err());
    }

    #[test]
    fn popularity_gap_examples() {
        let index = PopularityIndex { counts: BTreeMap::from([("i1".into(), 10), ("i2".into(), 2)]) };
        let ranked = BTreeMap::from([("u".to_string(), RankedList(vec!["i1".into()]))]);
        let reference = BTreeMap::from([("u".to_string(), vec!["i2".to_string()])]);
        let stats = popularity_gap(&ranked, &reference, &index).unwrap();
        assert_eq!(stats.per_user["u"], 8.0);
        assert_eq!(stats.summary.mean, 8.0);

        let same = BTreeMap::from([("u".to_string(), RankedList(vec!["i2".into()]))]);
        assert_eq!(popularity_gap(&same, &reference, &index).unwrap().per_user["u"], 0.0);
    }

    #[test]
    fn popularity_gap_skips_fabricated_lists() {
        let index = PopularityIndex { counts: BTreeMap::from([("i1".into(), 4)]) };
        let reference = BTreeMap::from([
            ("u".to_string(), vec!["i1".to_string()]),
            ("v".to_string(), vec!["i1".to_string()]),
        ]);
        let ranked = BTreeMap::from([
            ("u".to_string(), RankedList(vec!["FAB::item::0".into()])),
            ("v".to_string(), RankedList(vec!["i1".into(), "FAB::item::1".into()])),
        ]);
        let stats = popularity_gap(&ranked, &reference, &index).unwrap();
        assert_eq!(stats.skipped, ["u"]);
        assert_eq!(stats.per_user.len(), 1);

        let all_bad = BTreeMap::from([("u".to_string(), RankedList(vec!["FAB::item::0".into()]))]);
        let reference_u = BTreeMap::from([("u".to_string(), vec!["i1".to_string()])]);
        assert!(matches!(popularity_gap(&all_bad, &reference_u, &index), Err(DiagnosticsError::Metric(_))));
        assert!(popularity_gap(&ranked, &reference_u, &index).is_err());
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
        let s = Summary::of(&[1.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median), (1.25, 1.5));
    }

    // -- exhaustive oracles over a 3-symbol alphabet --------------------------

    const SYMBOLS: [&str; 3] = ["a", "b", "c"];

    fn subset(mask: u8) -> BTreeSet<String> {
        (0..3).filter(|b| mask >> b & 1 == 1).map(|b| SYMBOLS[b].to_string()).collect()
    }

    /// Independent FEF oracle: counts membership symbol by symbol via bitmasks.
    fn fef_oracle(pairs: &[(u8, u8)]) -> f64 {
        let hit: u32 = pairs.iter().map(|(g, t)| (g & t).count_ones()).sum();
        let total: u32 = pairs.iter().map(|(_, t)| t.count_ones()).sum();
        1.0 - hit as f64 / total as f64
    }

    fn all_pair_lists(max_pairs: usize, truth_nonempty: bool) -> Vec<Vec<(u8, u8)>> {
        let masks: Vec<(u8, u8)> = (0..8u8)
            .flat_map(|g| (0..8u8).map(move |t| (g, t)))
            .filter(|(_, t)| !truth_nonempty || *t != 0)
            .collect();
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_pairs {
            let mut next = Vec::new();
            for list in &frontier {
                for m in &masks {
                    let mut l: Vec<(u8, u8)> = list.clone();
                    l.push(*m);
                    next.push(l);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out.retain(|l| !l.is_empty());
        out
    }

    #[test]
    fn fef_matches_oracle_exhaustively() {
        // up to 3 pairs exhaustively (56^3 lists); 4-pair lists covered by the proptest below
        for pairs in all_pair_lists(3, true) {
            let sets: Vec<_> = pairs
                .iter()
                .map(|(g, t)| (ObservationSet { subject: String::new(), values: subset(*g) }, ObservationSet { subject: String::new(), values: subset(*t) }))
                .collect();
            assert_eq!(fef_rate(&sets).unwrap(), fef_oracle(&pairs), "{pairs:?}");
        }
    }

    #[test]
    fn lc_matches_oracle_exhaustively() {
        for pairs in all_pair_lists(3, false) {
            let trials: Vec<_> = pairs
                .iter()
                .map(|(a, b)| (Observation::Set(subset(*a)), Observation::Set(subset(*b))))
                .collect();
            let oracle = pairs.iter().filter(|(a, b)| a != b).count() as f64 / pairs.len() as f64;
            assert_eq!(lc_rate(&trials).unwrap(), oracle);
        }
    }

    proptest! {
        #[test]
        fn four_pair_oracles(pairs in proptest::collection::vec((0u8..8, 1u8..8), 4)) {
            let sets: Vec<_> = pairs.iter()
                .map(|(g, t)| (ObservationSet { subject: String::new(), values: subset(*g) }, ObservationSet { subject: String::new(), values: subset(*t) }))
                .collect();
            prop_assert_eq!(fef_rate(&sets).unwrap(), fef_oracle(&pairs));
            let zero = fef_rate(&sets).unwrap() == 0.0;
            prop_assert_eq!(zero, pairs.iter().all(|(g, t)| g & t == *t));
        }

        #[test]
        fn tv_is_symmetric_and_bounded(a in proptest::collection::btree_map("[a-d]", 0u64..5, 1..4),
                                       b in proptest::collection::btree_map("[a-d]", 0u64..5, 1..4)) {
            let ha = Histogram::from_counts("x", a);
            let hb = Histogram::from_counts("x", b);
            prop_assume!(ha.total > 0 && hb.total > 0);
            let ab = distribution_divergence(&ha, &hb).unwrap().tv_distance;
            let ba = distribution_divergence(&hb, &ha).unwrap().tv_distance;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn gap_invariant_under_count_translation(counts in proptest::collection::vec(0u64..50, 5),
                                                 lists in proptest::collection::vec((proptest::collection::vec(0usize..5, 1..4), proptest::collection::vec(0usize..5, 1..4)), 1..5),
                                                 shift in 0u64..100) {
            let index = PopularityIndex { counts: counts.iter().enumerate().map(|(i, c)| (format!("i{i}"), *c)).collect() };
            let shifted = PopularityIndex { counts: index.counts.iter().map(|(k, c)| (k.clone(), c + shift)).collect() };
            let ranked: BTreeMap<String, RankedList> = lists.iter().enumerate()
                .map(|(u, (r, _))| (format!("u{u}"), r.iter().map(|i| format!("i{i}")).collect()))
                .collect();
            let reference: BTreeMap<String, Vec<String>> = lists.iter().enumerate()
                .map(|(u, (_, g))| (format!("u{u}"), g.iter().map(|i| format!("i{i}")).collect()))
                .collect();
            let a = popularity_gap(&ranked, &reference, &index).unwrap();
            let b = popularity_gap(&ranked, &reference, &shifted).unwrap();
            for (u, gap) in &a.per_user {
                prop_assert!((gap - b.per_user[u]).abs() < 1e-9);
            }
        }
    }
}
