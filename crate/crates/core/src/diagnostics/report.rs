//! Assembles the phase-wise [`RiskReport`] from a loop trace.
//!
//! Phase 1 looks at generated content on its own (profiles from the first
//! period against ground-truth attributes). Phase 2 looks at the first
//! period's ranked lists. Phase 3 tracks everything across periods, including
//! embedding polarization.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::*;
use super::polarization::{polarization_trace, PolarizationTrace};
use crate::loop_engine::{LoopTrace, PeriodTrace};
use crate::recommenders::RankedList;
use crate::riskgen::{GeneratedOutput, GeneratedRecord, GeneratorRole};

/// Which snapshot popularity is counted on for a period's gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityIndexMode {
    /// `D^(n-1)`: the data the period's model was trained on.
    #[default]
    PreviousPeriod,
    /// `D^(0)` for every period.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub phases: Vec<u8>,
    pub popularity_index: PopularityIndexMode,
    pub clusters: usize,
    pub kmeans_seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            phases: vec![1, 2, 3],
            popularity_index: PopularityIndexMode::PreviousPeriod,
            clusters: 2,
            kmeans_seed: 0,
        }
    }
}

impl DiagnosticsConfig {
    fn wants(&self, phase: u8) -> bool {
        self.phases.contains(&phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionPair {
    pub generated: Histogram,
    pub reference: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1 {
    pub distributions: BTreeMap<String, DistributionPair>,
    pub divergences: BTreeMap<String, Divergence>,
    pub fef: Option<f64>,
    pub lc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2 {
    pub gap_stats: Option<GapStats>,
    pub catalog_fef: Option<f64>,
    pub lc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistance {
    pub user: f64,
    pub item: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetrics {
    pub period: usize,
    pub gap_stats: Option<GapStats>,
    /// Share of ranked-list entries outside the catalog.
    pub fef: Option<f64>,
    pub lc: Option<f64>,
    pub profile_fef: Option<f64>,
    pub profile_lc: Option<f64>,
    pub centroid_distance: Option<CentroidDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Projections {
    Available { user: PolarizationTrace, item: PolarizationTrace },
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3 {
    pub per_period: Vec<PeriodMetrics>,
    pub projections: Projections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub phase1: Option<Phase1>,
    pub phase2: Option<Phase2>,
    pub phase3: Option<Phase3>,
}

impl RiskReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn records<'a>(period: &'a PeriodTrace, role: GeneratorRole, trial: u32) -> impl Iterator<Item = &'a GeneratedRecord> {
    period
        .generated
        .iter()
        .filter(move |r| r.role == role && r.trial == trial)
}

fn attributes(r: &GeneratedRecord) -> Option<&BTreeMap<String, Vec<String>>> {
    match &r.output {
        GeneratedOutput::Attributes(a) => Some(a),
        GeneratedOutput::Items(_) => None,
    }
}

fn items(r: &GeneratedRecord) -> Option<&[String]> {
    match &r.output {
        GeneratedOutput::Items(i) => Some(i),
        GeneratedOutput::Attributes(_) => None,
    }
}

fn profile_tokens(attrs: &BTreeMap<String, Vec<String>>) -> BTreeSet<String> {
    attrs
        .iter()
        .flat_map(|(k, vs)| vs.iter().map(move |v| format!("{k}={v}")))
        .collect()
}

/// Trial-1 versus trial-2 comparison for one role.
fn role_lc(period: &PeriodTrace, role: GeneratorRole) -> Option<f64> {
    let second: BTreeMap<&str, &GeneratedRecord> =
        records(period, role, 2).map(|r| (r.subject.as_str(), r)).collect();
    let trials: Vec<(Observation, Observation)> = records(period, role, 1)
        .filter_map(|a| {
            let b = second.get(a.subject.as_str())?;
            match role {
                GeneratorRole::Representer => Some((
                    Observation::Set(profile_tokens(attributes(a)?)),
                    Observation::Set(profile_tokens(attributes(b)?)),
                )),
                _ => Some((
                    Observation::Ranked(RankedList(items(a)?.to_vec())),
                    Observation::Ranked(RankedList(items(b)?.to_vec())),
                )),
            }
        })
        .collect();
    lc_rate(&trials).ok()
}

fn profile_fef(trace: &LoopTrace, period: &PeriodTrace) -> Option<f64> {
    let pairs: Vec<(ObservationSet, ObservationSet)> = records(period, GeneratorRole::Representer, 1)
        .filter_map(|r| Some((r, attributes(r)?)))
        .flat_map(|(r, attrs)| {
            attrs.iter().filter_map(move |(name, values)| {
                let truth = trace.user_attributes.values(&r.subject, name);
                (!truth.is_empty()).then(|| {
                    (
                        ObservationSet::new(r.subject.clone(), values.iter().cloned()),
                        ObservationSet::new(r.subject.clone(), truth.iter().cloned()),
                    )
                })
            })
        })
        .collect();
    fef_rate(&pairs).ok()
}

fn phase1(trace: &LoopTrace) -> Option<Phase1> {
    let first = trace.periods.first()?;
    let generated: Vec<(&str, &BTreeMap<String, Vec<String>>)> = records(first, GeneratorRole::Representer, 1)
        .filter_map(|r| Some((r.subject.as_str(), attributes(r)?)))
        .collect();
    let mut distributions = BTreeMap::new();
    let mut divergences = BTreeMap::new();
    let names: BTreeSet<&String> = generated.iter().flat_map(|(_, a)| a.keys()).collect();
    for name in names {
        let Ok(gen_hist) = attribute_distribution(generated.iter().map(|(_, a)| *a), name) else {
            continue;
        };
        // ground truth restricted to the profiled users
        let truth: Vec<&BTreeMap<String, Vec<String>>> = generated
            .iter()
            .filter_map(|(u, _)| trace.user_attributes.records.get(*u))
            .collect();
        let reference = attribute_distribution(truth.iter().copied(), name).ok();
        if let Some(reference) = &reference {
            if let Ok(d) = distribution_divergence(&gen_hist, reference) {
                divergences.insert(name.clone(), d);
            }
        }
        distributions.insert(name.clone(), DistributionPair { generated: gen_hist, reference });
    }
    Some(Phase1 {
        distributions,
        divergences,
        fef: profile_fef(trace, first),
        lc: role_lc(first, GeneratorRole::Representer),
    })
}

fn gap_for(period: &PeriodTrace, index: &PopularityIndex) -> Option<GapStats> {
    let lists: BTreeMap<String, RankedList> = period
        .ranked_lists
        .iter()
        .filter(|(_, l)| !l.is_empty())
        .map(|(u, l)| (u.clone(), l.clone()))
        .collect();
    let reference: BTreeMap<String, Vec<String>> = lists
        .keys()
        .filter_map(|u| Some((u.clone(), period.ground_truth.get(u)?.clone())))
        .collect();
    if reference.len() != lists.len() {
        return None;
    }
    popularity_gap(&lists, &reference, index).ok()
}

fn list_fef(trace: &LoopTrace, period: &PeriodTrace) -> Option<f64> {
    catalog_fef_rate(period.ranked_lists.values(), &trace.catalog).ok()
}

fn initial_index(trace: &LoopTrace) -> PopularityIndex {
    PopularityIndex {
        counts: trace.initial_popularity.clone(),
    }
}

fn phase2(trace: &LoopTrace) -> Option<Phase2> {
    let first = trace.periods.first()?;
    Some(Phase2 {
        gap_stats: gap_for(first, &initial_index(trace)),
        catalog_fef: list_fef(trace, first),
        lc: role_lc(first, GeneratorRole::Decision),
    })
}

fn polarization(trace: &LoopTrace, config: &DiagnosticsConfig) -> Option<(PolarizationTrace, PolarizationTrace)> {
    let snapshots: Vec<_> = trace
        .periods
        .iter()
        .map(|p| p.embeddings.as_ref().map(|e| (p.index, e)))
        .collect::<Option<_>>()?;
    let users: Vec<_> = snapshots.iter().map(|(n, (u, _))| (*n, u)).collect();
    let items: Vec<_> = snapshots.iter().map(|(n, (_, i))| (*n, i)).collect();
    let user = polarization_trace(&users, config.clusters, config.kmeans_seed);
    let item = polarization_trace(&items, config.clusters, config.kmeans_seed);
    match (user, item) {
        (Ok(u), Ok(i)) => Some((u, i)),
        (u, i) => {
            tracing::warn!(user = ?u.err(), item = ?i.err(), "polarization unavailable");
            None
        }
    }
}

fn phase3(trace: &LoopTrace, config: &DiagnosticsConfig) -> Phase3 {
    let polar = polarization(trace, config);
    let mut index = initial_index(trace);
    let mut per_period = Vec::with_capacity(trace.periods.len());
    for (pos, period) in trace.periods.iter().enumerate() {
        per_period.push(PeriodMetrics {
            period: period.index,
            gap_stats: gap_for(period, &index),
            fef: list_fef(trace, period),
            lc: role_lc(period, GeneratorRole::Decision),
            profile_fef: profile_fef(trace, period),
            profile_lc: role_lc(period, GeneratorRole::Representer),
            centroid_distance: polar.as_ref().map(|(u, i)| CentroidDistance {
                user: u.periods[pos].centroid_distance,
                item: i.periods[pos].centroid_distance,
            }),
        });
        if config.popularity_index == PopularityIndexMode::PreviousPeriod {
            index.add(&period.injected);
        }
    }
    Phase3 {
        per_period,
        projections: match polar {
            Some((user, item)) => Projections::Available { user, item },
            None => Projections::Unavailable("unavailable".into()),
        },
    }
}

pub fn build_report(trace: &LoopTrace, config: &DiagnosticsConfig) -> RiskReport {
    RiskReport {
        phase1: if config.wants(1) { phase1(trace) } else { None },
        phase2: if config.wants(2) { phase2(trace) } else { None },
        phase3: config.wants(3).then(|| phase3(trace, config)),
    }
}

/// Tidy `metric,period,subject,value` rows for external plotting.
pub fn write_plot_data<W: Write>(sink: W, report: &RiskReport) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    w.write_record(["metric", "period", "subject", "value"])?;
    let mut row = |metric: &str, period: usize, subject: &str, value: f64| {
        w.write_record([metric, &period.to_string(), subject, &value.to_string()])
    };
    if let Some(p1) = &report.phase1 {
        for (name, pair) in &p1.distributions {
            for (value, count) in &pair.generated.counts {
                row(&format!("generated_share:{name}"), 1, value, pair.generated.share(value))?;
                let _ = count;
            }
            if let Some(reference) = &pair.reference {
                for value in reference.counts.keys() {
                    row(&format!("reference_share:{name}"), 1, value, reference.share(value))?;
                }
            }
        }
    }
    if let Some(p3) = &report.phase3 {
        for m in &p3.per_period {
            if let Some(g) = &m.gap_stats {
                for (user, gap) in &g.per_user {
                    row("popularity_gap", m.period, user, *gap)?;
                }
                row("popularity_gap_mean", m.period, "all", g.summary.mean)?;
            }
            for (metric, value) in [
                ("catalog_fef", m.fef),
                ("lc", m.lc),
                ("profile_fef", m.profile_fef),
                ("profile_lc", m.profile_lc),
                ("centroid_distance_user", m.centroid_distance.map(|c| c.user)),
                ("centroid_distance_item", m.centroid_distance.map(|c| c.item)),
            ] {
                if let Some(v) = value {
                    row(metric, m.period, "all", v)?;
                }
            }
        }
        if let Projections::Available { user, item } = &p3.projections {
            for (kind, trace) in [("user", user), ("item", item)] {
                for p in &trace.periods {
                    for point in &p.projection {
                        row(&format!("projection_{kind}_x"), p.period, &point.subject, point.x)?;
                        row(&format!("projection_{kind}_y"), p.period, &point.subject, point.y)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
