//! Planted-partition fixture generator.
//!
//! Users and items are dealt round-robin into `communities`. Each draw picks a
//! foreign-community item with probability `inter_prob` and an own-community
//! item otherwise, uniformly and without repeating an item for the same user.
//! Timestamps are uniform over `[0, time_span)`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::ingest::{write_attribute_table, write_interaction_log, AttributeTable, Interaction, IngestError, SubjectKind};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    pub inter_prob: f64,
    pub interactions_per_user: usize,
    pub time_span: u64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 200,
            communities: 2,
            inter_prob: 0.05,
            interactions_per_user: 10,
            time_span: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub user_attributes: AttributeTable,
    pub item_attributes: AttributeTable,
}

pub fn user_id(i: usize) -> String {
    format!("u{i:05}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

/// Community of the `i`-th user or item.
pub fn community_of(i: usize, communities: usize) -> usize {
    i % communities
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), IngestError> {
        let usage = |m: String| Err(IngestError::Usage(m));
        if self.communities == 0 {
            return usage("communities must be at least 1".into());
        }
        if self.communities > self.users {
            return usage(format!("communities ({}) exceeds users ({})", self.communities, self.users));
        }
        if self.communities > self.items {
            return usage(format!("communities ({}) exceeds items ({})", self.communities, self.items));
        }
        if !(0.0..=1.0).contains(&self.inter_prob) {
            return usage(format!("inter_prob must lie in [0, 1], got {}", self.inter_prob));
        }
        if self.interactions_per_user > self.items {
            return usage(format!(
                "interactions_per_user ({}) exceeds items ({})",
                self.interactions_per_user, self.items
            ));
        }
        if self.time_span == 0 {
            return usage("time_span must be positive".into());
        }
        Ok(())
    }
}

pub fn generate(params: &SyntheticParams) -> Result<SyntheticData, IngestError> {
    params.validate()?;
    let k = params.communities;
    let by_community: Vec<Vec<usize>> =
        (0..k).map(|c| (0..params.items).filter(|&i| community_of(i, k) == c).collect()).collect();

    let mut interactions = Vec::with_capacity(params.users * params.interactions_per_user);
    let mut user_attributes = AttributeTable::empty(SubjectKind::User);
    for u in 0..params.users {
        let mut rng = rng_for(params.seed, &["synthetic".into(), u.into()]);
        let own = community_of(u, k);
        let uid = user_id(u);
        user_attributes.insert(&uid, "community", &format!("c{own}"))?;
        let gender = if rng.random_bool(0.7) { "M" } else { "F" };
        user_attributes.insert(&uid, "gender", gender)?;

        let mut taken = HashSet::with_capacity(params.interactions_per_user);
        while taken.len() < params.interactions_per_user {
            let foreign = k > 1 && rng.random_bool(params.inter_prob);
            let pool: Vec<usize> = if foreign {
                by_community
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| *c != own)
                    .flat_map(|(_, items)| items.iter().copied())
                    .filter(|i| !taken.contains(i))
                    .collect()
            } else {
                by_community[own].iter().copied().filter(|i| !taken.contains(i)).collect()
            };
            let Some(&item) = pool.choose(&mut rng) else {
                // side exhausted; the other side is guaranteed non-empty
                let rest: Vec<usize> = (0..params.items).filter(|i| !taken.contains(i)).collect();
                taken.insert(*rest.choose(&mut rng).expect("enough items"));
                continue;
            };
            taken.insert(item);
        }
        let mut chosen: Vec<usize> = taken.into_iter().collect();
        chosen.sort_unstable();
        for item in chosen {
            interactions.push(Interaction::new(uid.clone(), item_id(item), rng.random_range(0..params.time_span)));
        }
    }

    let mut item_attributes = AttributeTable::empty(SubjectKind::Item);
    for i in 0..params.items {
        item_attributes.insert(&item_id(i), "genre", &format!("c{}", community_of(i, k)))?;
    }
    interactions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(SyntheticData { interactions, user_attributes, item_attributes })
}

/// Writes `interactions.csv`, `user_attributes.csv` and `item_attributes.csv` under `out`.
pub fn write(out: &Path, data: &SyntheticData) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let create = |name: &str| File::create(out.join(name)).map(BufWriter::new);
    write_interaction_log(create("interactions.csv")?, &data.interactions)?;
    write_attribute_table(create("user_attributes.csv")?, &data.user_attributes)?;
    write_attribute_table(create("item_attributes.csv")?, &data.item_attributes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(users: usize, items: usize, communities: usize, inter_prob: f64) -> SyntheticParams {
        SyntheticParams { users, items, communities, inter_prob, seed: 3, ..Default::default() }
    }

    fn community(id: &str, k: usize) -> usize {
        community_of(id[1..].parse().unwrap(), k)
    }

    #[test]
    fn no_cross_community_edges_at_zero_inter_prob() {
        let data = generate(&params(100, 40, 2, 0.0)).unwrap();
        assert!(data.interactions.iter().all(|x| community(&x.user, 2) == community(&x.item, 2)));
    }

    #[test]
    fn row_count_and_no_repeats() {
        let data = generate(&params(1000, 50, 2, 0.3)).unwrap();
        assert_eq!(data.interactions.len(), 10_000);
        let pairs: HashSet<(&str, &str)> =
            data.interactions.iter().map(|x| (x.user.as_str(), x.item.as_str())).collect();
        assert_eq!(pairs.len(), 10_000);
    }

    #[test]
    fn cross_share_tracks_inter_prob() {
        let data = generate(&params(2000, 100, 2, 0.25)).unwrap();
        let cross = data.interactions.iter().filter(|x| community(&x.user, 2) != community(&x.item, 2)).count();
        let share = cross as f64 / data.interactions.len() as f64;
        assert!((share - 0.25).abs() < 0.02, "{share}");
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let p = params(50, 30, 3, 0.1);
        assert_eq!(generate(&p).unwrap(), generate(&p).unwrap());
        let other = SyntheticParams { seed: 4, ..p.clone() };
        assert_ne!(generate(&p).unwrap().interactions, generate(&other).unwrap().interactions);
    }

    #[test]
    fn too_many_communities_is_usage_error() {
        assert!(matches!(generate(&params(2, 10, 3, 0.0)), Err(IngestError::Usage(_))));
    }
}
