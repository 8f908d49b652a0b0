//! The closed recommend → inject → retrain cycle.
//!
//! At the head of period `n` the backbone is trained on `D^(n-1)` (plus any
//! synthetic augmentation), every active user receives exactly `K_u`
//! recommendations, and the in-catalog ones are appended to the log at the
//! period's canonical timestamp to form `D^(n)`. Real post-cutoff consumption
//! only supplies the schedule and quotas; it never enters training.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AttributeTable, Dataset, Interaction};
use crate::recommenders::{self, EmbeddingMatrix, RankedList, RecommendError, RecommenderConfig, Snapshot, TrainedModel};
use crate::riskgen::{
    self, augment_interactions, infer_profile, repeat_invocation, GeneratedRecord, GenerationError,
    GeneratorConfig, GeneratorRole, ItemPool,
};
use crate::seeding::derive_seed;
use crate::timeline::{build_period_schedule, common_users, temporal_split, SplitConfig, TimelineError};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("loop error: {0}")]
    Loop(String),
    #[error("temporal order violated: injection at {tau} after earlier injection at {previous}")]
    TemporalOrder { tau: u64, previous: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// The backbone's own top-K.
    #[default]
    BackboneOnly,
    /// The decision generator reorders a backbone candidate pool.
    Rerank,
    /// The decision generator samples identifiers without a candidate pool.
    OpenGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub recommender: RecommenderConfig,
    pub augmenter: Option<GeneratorConfig>,
    pub representer: Option<GeneratorConfig>,
    pub decision: Option<GeneratorConfig>,
    pub decision_mode: DecisionMode,
    /// Regenerate profiles and augmentations every period; otherwise period 1's are reused.
    pub augment_each_period: bool,
    pub augment_pairs_per_user: usize,
    /// Exclude items already in the user's accumulated history.
    pub exclude_seen: bool,
    /// Start each period's training from the previous period's embeddings.
    pub warm_start: bool,
    /// Backbone candidates handed to the reranker (at least `K_u`).
    pub candidate_pool: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            recommender: RecommenderConfig::default(),
            augmenter: None,
            representer: None,
            decision: None,
            decision_mode: DecisionMode::BackboneOnly,
            augment_each_period: true,
            augment_pairs_per_user: 1,
            exclude_seen: true,
            warm_start: false,
            candidate_pool: 20,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        self.recommender.validate()?;
        for g in [&self.augmenter, &self.representer, &self.decision].into_iter().flatten() {
            g.validate()?;
        }
        if self.decision_mode != DecisionMode::BackboneOnly && self.decision.is_none() {
            return Err(LoopError::Config(format!(
                "decision_mode {:?} requires a decision generator",
                self.decision_mode
            )));
        }
        if self.augment_pairs_per_user == 0 || self.candidate_pool == 0 {
            return Err(LoopError::Config(
                "augment_pairs_per_user and candidate_pool must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn generator(&self, role: GeneratorRole, period: usize) -> Option<GeneratorConfig> {
        let base = match role {
            GeneratorRole::Augmenter => self.augmenter.as_ref(),
            GeneratorRole::Representer => self.representer.as_ref(),
            GeneratorRole::Decision => self.decision.as_ref(),
        }?;
        let mut g = base.for_period(period);
        g.seed = derive_seed(self.seed, &[role.as_str().into(), g.seed.into()]);
        Some(g)
    }

    fn training_config(&self, period: usize) -> RecommenderConfig {
        RecommenderConfig {
            seed: derive_seed(self.seed, &["train".into(), self.recommender.seed.into(), period.into()]),
            ..self.recommender.clone()
        }
    }
}

/// Everything that happened in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodTrace {
    pub index: usize,
    pub tau: u64,
    /// `|D^(n)|` after injection.
    pub dataset_size: usize,
    /// Post-clamp list length per active user.
    pub quotas: BTreeMap<String, usize>,
    /// What each active user really consumed in the period.
    pub ground_truth: BTreeMap<String, Vec<String>>,
    /// Trial-1 lists, including fabricated entries.
    pub ranked_lists: BTreeMap<String, RankedList>,
    pub injected: Vec<Interaction>,
    pub generated: Vec<GeneratedRecord>,
    /// `(users, items)` from the model that produced this period's lists.
    pub embeddings: Option<(EmbeddingMatrix, EmbeddingMatrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopTrace {
    pub split: SplitConfig,
    pub pipeline: PipelineConfig,
    pub cutoff_time: u64,
    pub initial_size: usize,
    pub common_users: usize,
    pub catalog: BTreeSet<String>,
    /// Per catalog item, interaction count in `D^(0)`.
    pub initial_popularity: BTreeMap<String, u64>,
    pub user_attributes: AttributeTable,
    pub warnings: Vec<String>,
    pub periods: Vec<PeriodTrace>,
}

impl LoopTrace {
    pub fn total_injected(&self) -> usize {
        self.periods.iter().map(|p| p.injected.len()).sum()
    }
}

/// The growing `D^(n)`, with the timestamp of the latest injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    pub interactions: Vec<Interaction>,
    last_injection: Option<u64>,
}

impl Accumulated {
    pub fn new(initial: Vec<Interaction>) -> Self {
        Self {
            interactions: initial,
            last_injection: None,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Appends one `(user, item, tau)` per list entry and returns the new rows.
    /// Lists must already be filtered to catalog members.
    pub fn inject(
        &mut self,
        ranked_lists: &BTreeMap<String, RankedList>,
        tau: u64,
    ) -> Result<Vec<Interaction>, LoopError> {
        if let Some(previous) = self.last_injection {
            if tau <= previous {
                return Err(LoopError::TemporalOrder { tau, previous });
            }
        }
        let injected: Vec<Interaction> = ranked_lists
            .iter()
            .flat_map(|(user, list)| list.iter().map(move |item| Interaction::new(user.clone(), item.clone(), tau)))
            .collect();
        if !injected.is_empty() {
            self.last_injection = Some(tau);
        }
        self.interactions.extend(injected.iter().cloned());
        Ok(injected)
    }
}

struct UserOutcome {
    user: String,
    quota: usize,
    list: RankedList,
    generated: Vec<GeneratedRecord>,
    warning: Option<String>,
}

struct PeriodContext<'a> {
    period: usize,
    model: &'a dyn TrainedModel,
    config: &'a PipelineConfig,
    decision: Option<GeneratorConfig>,
    pool: &'a ItemPool,
    catalog: &'a BTreeSet<String>,
    seen: &'a HashMap<&'a str, BTreeSet<String>>,
}

impl PeriodContext<'_> {
    fn recommend_for(&self, user: &str, quota: usize) -> Result<UserOutcome, LoopError> {
        let empty = BTreeSet::new();
        let exclusions = if self.config.exclude_seen {
            self.seen.get(user).unwrap_or(&empty)
        } else {
            &empty
        };
        let eligible = self.catalog.len() - exclusions.len();
        let k = quota.min(eligible);
        let warning = (k < quota).then(|| {
            format!("period {}: quota for {user} clamped from {quota} to {k}", self.period)
        });
        if k == 0 {
            return Ok(UserOutcome {
                user: user.to_owned(),
                quota: 0,
                list: RankedList::default(),
                generated: Vec::new(),
                warning,
            });
        }

        let mut generated = Vec::new();
        let list = match (&self.decision, self.config.decision_mode) {
            (None, _) | (_, DecisionMode::BackboneOnly) => self.model.recommend(user, k, exclusions)?,
            (Some(gen), mode) => {
                let user_pool;
                let candidates = match mode {
                    DecisionMode::Rerank => {
                        Some(self.model.recommend(user, k.max(self.config.candidate_pool), exclusions)?)
                    }
                    _ => None,
                };
                let pool = if candidates.is_none() && !exclusions.is_empty() {
                    user_pool = self.pool.without(exclusions);
                    &user_pool
                } else {
                    self.pool
                };
                let mut trials = Vec::with_capacity(2);
                for trial in 1..=2u64 {
                    let out = repeat_invocation(gen, GeneratorRole::Decision, user, trial, |inv| {
                        riskgen::rerank_or_generate(gen, user, candidates.as_ref(), k, pool, inv)
                    })?;
                    generated.push(GeneratedRecord::items(
                        self.period,
                        GeneratorRole::Decision,
                        trial as u32,
                        user,
                        &out,
                        |i| self.catalog.contains(i),
                    ));
                    trials.push(out);
                }
                trials.swap_remove(0)
            }
        };
        Ok(UserOutcome {
            user: user.to_owned(),
            quota: k,
            list,
            generated,
            warning,
        })
    }
}

fn history_by_user(rows: &[Interaction]) -> HashMap<&str, BTreeSet<String>> {
    let mut seen: HashMap<&str, BTreeSet<String>> = HashMap::new();
    for x in rows {
        seen.entry(x.user.as_str()).or_default().insert(x.item.clone());
    }
    seen
}

/// Profiles for the active users plus augmentation for the training snapshot.
struct Generated {
    records: Vec<GeneratedRecord>,
    augmentation: Vec<Interaction>,
}

fn generate_content(
    dataset: &Dataset,
    config: &PipelineConfig,
    period: usize,
    current: &[Interaction],
    active: &[&str],
    warnings: &mut Vec<String>,
) -> Result<Generated, LoopError> {
    let mut records = Vec::new();
    let mut augmentation = Vec::new();

    if let Some(gen) = config.generator(GeneratorRole::Representer, period) {
        let schema = &dataset.user_attributes.vocab;
        if schema.is_empty() {
            warnings.push(format!("period {period}: representer skipped, no user attributes"));
        } else {
            let seen = history_by_user(current);
            let profiles: Vec<Vec<GeneratedRecord>> = active
                .par_iter()
                .map(|user| {
                    let history: Vec<&BTreeMap<String, Vec<String>>> = seen
                        .get(user)
                        .into_iter()
                        .flatten()
                        .filter_map(|i| dataset.item_attributes.records.get(i))
                        .collect();
                    (1..=2u64)
                        .map(|trial| {
                            repeat_invocation(&gen, GeneratorRole::Representer, user, trial, |inv| {
                                infer_profile(&gen, user, &history, schema, inv)
                            })
                            .map(|p| GeneratedRecord::profile(period, trial as u32, &p))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?;
            records.extend(profiles.into_iter().flatten());
        }
    }

    if let Some(gen) = config.generator(GeneratorRole::Augmenter, period) {
        let warm: BTreeSet<&str> = current.iter().map(|x| x.item.as_str()).collect();
        let cold: Vec<String> = dataset.items.iter().filter(|i| !warm.contains(i.as_str())).cloned().collect();
        if cold.len() < 2 {
            warnings.push(format!("period {period}: augmentation skipped, {} cold items", cold.len()));
        } else {
            let at = current.iter().map(|x| x.timestamp).max().unwrap_or(0);
            augmentation = augment_interactions(
                &gen,
                current,
                &dataset.item_attributes,
                &cold,
                config.augment_pairs_per_user,
                at,
            )?;
            let mut per_user: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for x in &augmentation {
                per_user.entry(x.user.as_str()).or_default().push(x.item.clone());
            }
            records.extend(per_user.into_iter().map(|(user, items)| {
                GeneratedRecord::items(period, GeneratorRole::Augmenter, 1, user, &items, |_| true)
            }));
        }
    }
    Ok(Generated { records, augmentation })
}

fn trace_embeddings(periods: &[PeriodTrace]) -> Option<(EmbeddingMatrix, EmbeddingMatrix)> {
    periods.last().and_then(|p| p.embeddings.clone())
}

pub fn run_feedback_loop(
    dataset: &Dataset,
    split_config: &SplitConfig,
    config: &PipelineConfig,
) -> Result<LoopTrace, LoopError> {
    split_config.validate()?;
    config.validate()?;
    let split = temporal_split(dataset, split_config.cutoff_fraction, split_config.mode)?;
    let common = common_users(&split);
    if common.is_empty() {
        return Err(LoopError::Loop("no common users across the cutoff".into()));
    }
    let schedule = build_period_schedule(&split, split_config.num_periods)?;
    if schedule.periods.iter().all(|p| p.active.is_empty()) {
        return Err(LoopError::Loop("no active users in any period".into()));
    }
    let catalog = &dataset.items;
    let mut initial_popularity: BTreeMap<String, u64> = catalog.iter().map(|i| (i.clone(), 0)).collect();
    for x in &split.d0 {
        *initial_popularity.get_mut(&x.item).expect("catalog item") += 1;
    }

    let mut accumulated = Accumulated::new(split.d0.clone());
    let mut warnings = Vec::new();
    let mut periods = Vec::with_capacity(schedule.periods.len());
    let mut reused: Option<Generated> = None;
    let mut previous: Option<(EmbeddingMatrix, EmbeddingMatrix)> = None;

    for period in &schedule.periods {
        let n = period.index;
        let active: Vec<&str> = period.active.iter().map(|a| a.user.as_str()).collect();

        // (a) generated content on D^(n-1)
        let generated = match reused.take() {
            Some(g) if !config.augment_each_period => g,
            _ => generate_content(dataset, config, n, &accumulated.interactions, &active, &mut warnings)?,
        };

        // (b) train on D^(n-1) plus augmentation
        let model = {
            let mut training = accumulated.interactions.clone();
            training.extend(generated.augmentation.iter().cloned());
            let init = if config.warm_start { previous.as_ref() } else { None };
            recommenders::train_from(
                &config.training_config(n),
                Snapshot { interactions: &training, catalog },
                init,
            )?
        };

        // (c) recommend K_u items per active user
        let seen = history_by_user(&accumulated.interactions);
        let pool = ItemPool::from_interactions(catalog, &accumulated.interactions);
        let ctx = PeriodContext {
            period: n,
            model: model.as_ref(),
            config,
            decision: config.generator(GeneratorRole::Decision, n),
            pool: &pool,
            catalog,
            seen: &seen,
        };
        let outcomes: Vec<UserOutcome> = period
            .active
            .par_iter()
            .map(|a| ctx.recommend_for(&a.user, a.quota))
            .collect::<Result<_, _>>()?;

        let mut quotas = BTreeMap::new();
        let mut ranked_lists = BTreeMap::new();
        let mut records = generated.records.clone();
        for o in outcomes {
            warnings.extend(o.warning);
            records.extend(o.generated);
            quotas.insert(o.user.clone(), o.quota);
            ranked_lists.insert(o.user, o.list);
        }

        // (d) inject in-catalog entries at tau_n
        let in_catalog: BTreeMap<String, RankedList> = ranked_lists
            .iter()
            .map(|(u, l)| (u.clone(), l.iter().filter(|i| catalog.contains(*i)).cloned().collect()))
            .collect();
        let injected = accumulated.inject(&in_catalog, period.tau)?;
        tracing::info!(period = n, active = active.len(), injected = injected.len(), "period complete");

        // (e) record
        periods.push(PeriodTrace {
            index: n,
            tau: period.tau,
            dataset_size: accumulated.len(),
            quotas,
            ground_truth: period.ground_truth.clone(),
            ranked_lists,
            injected,
            generated: records,
            embeddings: model.embeddings(),
        });
        previous = trace_embeddings(&periods);
        reused = Some(generated);
    }

    Ok(LoopTrace {
        split: *split_config,
        pipeline: config.clone(),
        cutoff_time: split.cutoff_time,
        initial_size: split.d0.len(),
        common_users: common.len(),
        catalog: catalog.clone(),
        initial_popularity,
        user_attributes: dataset.user_attributes.clone(),
        warnings,
        periods,
    })
}
