//! Temporal split at a cutoff, common users, and the post-cutoff period schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Dataset, Interaction};

#[derive(Debug, Error, PartialEq)]
pub enum TimelineError {
    #[error("invalid split configuration: {0}")]
    Config(String),
    #[error("degenerate timeline: {0}")]
    Degenerate(String),
    #[error("schedule error: {0}")]
    Schedule(String),
}

/// How the cutoff fraction is turned into a cutoff timestamp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Fraction of the span between the first and last timestamp.
    #[default]
    Timeline,
    /// Fraction of the interaction count; the cutoff lands on the timestamp
    /// boundary closest to `round(fraction * |D|)` interactions.
    InteractionCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub cutoff_fraction: f64,
    pub num_periods: usize,
    #[serde(default)]
    pub mode: SplitMode,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), TimelineError> {
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction < 1.0) {
            return Err(TimelineError::Config(format!(
                "cutoff_fraction must lie in (0, 1), got {}",
                self.cutoff_fraction
            )));
        }
        if self.num_periods == 0 {
            return Err(TimelineError::Config("num_periods must be at least 1".into()));
        }
        Ok(())
    }
}

/// `d0` holds interactions at or before `cutoff_time`, `dgt` those after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub cutoff_time: u64,
    pub d0: Vec<Interaction>,
    pub dgt: Vec<Interaction>,
}

pub fn temporal_split(
    dataset: &Dataset,
    cutoff_fraction: f64,
    mode: SplitMode,
) -> Result<TemporalSplit, TimelineError> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
        return Err(TimelineError::Config(format!(
            "cutoff_fraction must lie in (0, 1), got {cutoff_fraction}"
        )));
    }
    let rows = &dataset.interactions;
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => (a.timestamp, b.timestamp),
        _ => return Err(TimelineError::Degenerate("dataset is empty".into())),
    };
    if first == last {
        return Err(TimelineError::Degenerate(format!(
            "all interactions share timestamp {first}"
        )));
    }
    let cutoff_time = match mode {
        SplitMode::Timeline => {
            first + (cutoff_fraction * (last - first) as f64).floor() as u64
        }
        SplitMode::InteractionCount => count_cutoff(rows, cutoff_fraction),
    };
    // rows are sorted by timestamp, so D^(0) is a prefix
    let boundary = rows.partition_point(|x| x.timestamp <= cutoff_time);
    Ok(TemporalSplit {
        cutoff_time,
        d0: rows[..boundary].to_vec(),
        dgt: rows[boundary..].to_vec(),
    })
}

fn count_cutoff(rows: &[Interaction], fraction: f64) -> u64 {
    let n = rows.len();
    let target = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let last = rows[n - 1].timestamp;
    let count_at = |t: u64| rows.partition_point(|x| x.timestamp <= t);

    let upper = rows[target - 1].timestamp;
    let mut candidates = Vec::with_capacity(2);
    if upper < last {
        candidates.push((upper, count_at(upper)));
    }
    // the last timestamp strictly before `upper`, if any
    let below = rows.partition_point(|x| x.timestamp < upper);
    if below > 0 {
        let t = rows[below - 1].timestamp;
        candidates.push((t, count_at(t)));
    }
    if candidates.is_empty() {
        // every row but the tail shares the last timestamp; fall back to the first one
        return rows[0].timestamp;
    }
    candidates
        .into_iter()
        .min_by_key(|&(t, count)| (count.abs_diff(target), std::cmp::Reverse(t)))
        .map(|(t, _)| t)
        .expect("non-empty candidates")
}

/// Users with at least one interaction on each side of the cutoff.
pub fn common_users(split: &TemporalSplit) -> BTreeSet<String> {
    let before: BTreeSet<&str> = split.d0.iter().map(|x| x.user.as_str()).collect();
    split
        .dgt
        .iter()
        .filter(|x| before.contains(x.user.as_str()))
        .map(|x| x.user.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveUser {
    pub user: String,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub index: usize,
    pub tau: u64,
    pub active: Vec<ActiveUser>,
    /// The items each active user actually consumed in this period, in log order.
    #[serde(skip)]
    pub ground_truth: BTreeMap<String, Vec<String>>,
}

impl Period {
    pub fn start(&self, schedule: &PeriodSchedule) -> u64 {
        schedule.boundaries[self.index - 1]
    }

    pub fn total_quota(&self) -> usize {
        self.active.iter().map(|a| a.quota).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSchedule {
    pub cutoff_time: u64,
    /// `N + 1` boundaries; period `n` covers `(boundaries[n-1], boundaries[n]]`.
    pub boundaries: Vec<u64>,
    pub periods: Vec<Period>,
}

impl PeriodSchedule {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn period_of(&self, timestamp: u64) -> Option<usize> {
        let last = *self.boundaries.last()?;
        if timestamp <= self.boundaries[0] || timestamp > last {
            return None;
        }
        Some(self.boundaries.partition_point(|&b| b < timestamp))
    }
}

/// Splits `(cutoff, max]` into equal-duration periods (the last absorbs the
/// remainder) and derives per-period active users, quotas and injection time.
pub fn build_period_schedule(
    split: &TemporalSplit,
    num_periods: usize,
) -> Result<PeriodSchedule, TimelineError> {
    if num_periods == 0 {
        return Err(TimelineError::Config("num_periods must be at least 1".into()));
    }
    let Some(last) = split.dgt.iter().map(|x| x.timestamp).max() else {
        return Err(TimelineError::Schedule("no interactions after the cutoff".into()));
    };
    let distinct: BTreeSet<u64> = split.dgt.iter().map(|x| x.timestamp).collect();
    if num_periods > distinct.len() {
        return Err(TimelineError::Schedule(format!(
            "{num_periods} periods requested but only {} distinct post-cutoff timestamps",
            distinct.len()
        )));
    }
    let cutoff = split.cutoff_time;
    let duration = (last - cutoff) / num_periods as u64;
    let mut boundaries: Vec<u64> = (0..num_periods as u64).map(|n| cutoff + n * duration).collect();
    boundaries.push(last);

    let mut periods: Vec<Period> = (1..=num_periods)
        .map(|index| {
            let (lo, hi) = (boundaries[index - 1], boundaries[index]);
            // floor of the midpoint, nudged into the half-open interval for unit-length periods
            let tau = (lo + (hi - lo) / 2).max(lo + 1);
            Period {
                index,
                tau,
                active: Vec::new(),
                ground_truth: BTreeMap::new(),
            }
        })
        .collect();

    let common = common_users(split);
    let mut schedule = PeriodSchedule {
        cutoff_time: cutoff,
        boundaries,
        periods: Vec::new(),
    };
    for x in split.dgt.iter().filter(|x| common.contains(&x.user)) {
        let n = schedule
            .period_of(x.timestamp)
            .expect("post-cutoff interaction falls inside the schedule");
        periods[n - 1]
            .ground_truth
            .entry(x.user.clone())
            .or_default()
            .push(x.item.clone());
    }
    for period in &mut periods {
        period.active = period
            .ground_truth
            .iter()
            .map(|(user, items)| ActiveUser {
                user: user.clone(),
                quota: items.len(),
            })
            .collect();
    }
    schedule.periods = periods;
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_dataset, AttributeTable, SubjectKind};
    use proptest::prelude::*;

    fn dataset(rows: Vec<Interaction>) -> Dataset {
        build_dataset(
            rows,
            AttributeTable::empty(SubjectKind::User),
            AttributeTable::empty(SubjectKind::Item),
        )
        .unwrap()
    }

    #[test]
    fn timeline_cutoff_on_unit_steps() {
        let ds = dataset((1..=10).map(|t| Interaction::new("u", format!("i{t}"), t)).collect());
        let split = temporal_split(&ds, 0.8, SplitMode::Timeline).unwrap();
        assert_eq!(split.cutoff_time, 8);
        assert_eq!((split.d0.len(), split.dgt.len()), (8, 2));
    }

    #[test]
    fn single_timestamp_is_degenerate() {
        let ds = dataset(vec![Interaction::new("a", "x", 3), Interaction::new("b", "x", 3)]);
        assert!(matches!(
            temporal_split(&ds, 0.5, SplitMode::Timeline),
            Err(TimelineError::Degenerate(_))
        ));
    }

    #[test]
    fn fraction_out_of_range_is_config_error() {
        let ds = dataset((1..=3).map(|t| Interaction::new("u", "i", t)).collect());
        for f in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            assert!(matches!(temporal_split(&ds, f, SplitMode::Timeline), Err(TimelineError::Config(_))));
        }
    }

    #[test]
    fn count_mode_rounds_to_nearest() {
        // 0.5 * 7 = 3.5 rounds up to 4
        let ds = dataset((1..=7).map(|t| Interaction::new("u", "i", t)).collect());
        let split = temporal_split(&ds, 0.5, SplitMode::InteractionCount).unwrap();
        assert_eq!(split.d0.len(), 4);
    }

    #[test]
    fn count_mode_respects_ties() {
        // timestamps 1,2,2,2,3: target 2 interactions; boundaries give 1 or 4
        let rows = vec![
            Interaction::new("a", "i", 1),
            Interaction::new("a", "j", 2),
            Interaction::new("b", "j", 2),
            Interaction::new("c", "j", 2),
            Interaction::new("a", "k", 3),
        ];
        let split = temporal_split(&dataset(rows), 0.4, SplitMode::InteractionCount).unwrap();
        assert_eq!(split.d0.len(), 1);
        assert_eq!(split.cutoff_time, 1);
    }

    #[test]
    fn common_users_is_the_intersection() {
        let ds = dataset(vec![
            Interaction::new("u1", "a", 1),
            Interaction::new("u2", "a", 2),
            Interaction::new("u2", "b", 9),
            Interaction::new("u3", "b", 10),
        ]);
        let split = temporal_split(&ds, 0.5, SplitMode::Timeline).unwrap();
        assert_eq!(common_users(&split).into_iter().collect::<Vec<_>>(), ["u2"]);
    }

    #[test]
    fn schedule_hand_enumeration() {
        let split = TemporalSplit {
            cutoff_time: 8,
            d0: vec![Interaction::new("u1", "i1", 1), Interaction::new("u2", "i2", 2)],
            dgt: vec![
                Interaction::new("u1", "i3", 9),
                Interaction::new("u1", "i4", 9),
                Interaction::new("u2", "i3", 10),
            ],
        };
        let s = build_period_schedule(&split, 2).unwrap();
        assert_eq!(s.boundaries, [8, 9, 10]);
        assert_eq!(s.periods[0].active, [ActiveUser { user: "u1".into(), quota: 2 }]);
        assert_eq!(s.periods[1].active, [ActiveUser { user: "u2".into(), quota: 1 }]);
        assert_eq!(s.periods[0].tau, 9);
        assert_eq!(s.periods[1].tau, 10);
        assert_eq!(s.periods[0].ground_truth["u1"], ["i3", "i4"]);
    }

    #[test]
    fn schedule_json_shape() {
        let split = TemporalSplit {
            cutoff_time: 0,
            d0: vec![Interaction::new("u", "a", 0)],
            dgt: vec![Interaction::new("u", "b", 4)],
        };
        let s = build_period_schedule(&split, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["cutoff_time"], 0);
        assert_eq!(v["boundaries"], serde_json::json!([0, 4]));
        assert_eq!(v["periods"][0]["tau"], 2);
        assert_eq!(v["periods"][0]["active"][0], serde_json::json!({"user": "u", "quota": 1}));
    }

    #[test]
    fn too_many_periods_is_schedule_error() {
        let split = TemporalSplit {
            cutoff_time: 0,
            d0: vec![Interaction::new("u", "a", 0)],
            dgt: vec![Interaction::new("u", "b", 4), Interaction::new("u", "c", 4)],
        };
        assert!(matches!(build_period_schedule(&split, 2), Err(TimelineError::Schedule(_))));
        let empty = TemporalSplit { cutoff_time: 0, d0: vec![], dgt: vec![] };
        assert!(matches!(build_period_schedule(&empty, 1), Err(TimelineError::Schedule(_))));
    }

    #[test]
    fn user_without_period_activity_is_not_active() {
        let split = TemporalSplit {
            cutoff_time: 0,
            d0: vec![Interaction::new("u", "a", 0), Interaction::new("v", "a", 0)],
            dgt: vec![Interaction::new("u", "b", 1), Interaction::new("v", "b", 10)],
        };
        let s = build_period_schedule(&split, 2).unwrap();
        assert!(s.periods[0].active.iter().all(|a| a.user != "v"));
        assert!(s.periods[1].active.iter().all(|a| a.user != "u"));
    }

    fn arb_rows() -> impl Strategy<Value = Vec<Interaction>> {
        proptest::collection::btree_set((0u8..8, 0u8..5, 0u64..60), 2..80).prop_map(|s| {
            s.into_iter()
                .map(|(u, i, t)| Interaction::new(format!("u{u}"), format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn partition_and_quota_conservation(rows in arb_rows(), f in 0.05f64..0.95, n in 1usize..6, by_count: bool) {
            let ds = dataset(rows);
            let mode = if by_count { SplitMode::InteractionCount } else { SplitMode::Timeline };
            let Ok(split) = temporal_split(&ds, f, mode) else { return Ok(()) };
            prop_assert_eq!(split.d0.len() + split.dgt.len(), ds.len());
            prop_assert!(split.d0.iter().all(|x| x.timestamp <= split.cutoff_time));
            prop_assert!(split.dgt.iter().all(|x| x.timestamp > split.cutoff_time));
            let mut joined = split.d0.clone();
            joined.extend(split.dgt.iter().cloned());
            prop_assert_eq!(&joined, &ds.interactions);

            let Ok(schedule) = build_period_schedule(&split, n) else { return Ok(()) };
            prop_assert!(schedule.boundaries.windows(2).all(|w| w[0] < w[1]));
            let common = common_users(&split);
            let expected = split.dgt.iter().filter(|x| common.contains(&x.user)).count();
            let total: usize = schedule.periods.iter().map(Period::total_quota).sum();
            prop_assert_eq!(total, expected);
            for p in &schedule.periods {
                prop_assert!(p.tau > p.start(&schedule) && p.tau <= schedule.boundaries[p.index]);
                for a in &p.active {
                    prop_assert!(a.quota >= 1 && common.contains(&a.user));
                }
            }
            prop_assert_eq!(schedule.to_json(), build_period_schedule(&split, n).unwrap().to_json());
        }
    }
}
