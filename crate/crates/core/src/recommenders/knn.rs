use std::collections::HashMap;

use super::{Index, RecommenderKind, TrainedModel};

/// Item-based nearest neighbours over the binary user-item matrix.
///
/// `score(u, i)` sums the cosine similarity between `i` and every item in
/// `u`'s history that is among `i`'s top `neighbors` most similar items.
#[derive(Debug, Clone)]
pub struct ItemKnn {
    index: Index,
    /// Per item: `(neighbor, similarity)` sorted by descending similarity.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl ItemKnn {
    pub(crate) fn fit(index: Index, k: usize) -> Self {
        let n_items = index.items.len();
        let mut degree = vec![0u32; n_items];
        let mut cooc: Vec<HashMap<usize, u32>> = vec![HashMap::new(); n_items];
        for hist in &index.history {
            for (a, &i) in hist.iter().enumerate() {
                degree[i] += 1;
                for &j in &hist[a + 1..] {
                    *cooc[i].entry(j).or_default() += 1;
                    *cooc[j].entry(i).or_default() += 1;
                }
            }
        }
        let neighbors = cooc
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let mut sims: Vec<(usize, f64)> = row
                    .into_iter()
                    .map(|(j, c)| (j, c as f64 / (degree[i] as f64 * degree[j] as f64).sqrt()))
                    .collect();
                sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                sims.truncate(k);
                sims
            })
            .collect();
        Self { index, neighbors }
    }
}

impl TrainedModel for ItemKnn {
    fn kind(&self) -> RecommenderKind {
        RecommenderKind::ItemKnn
    }

    fn items(&self) -> &[String] {
        &self.index.items
    }

    fn item_index(&self, item: &str) -> Option<usize> {
        self.index.item_pos.get(item).copied()
    }

    fn popularity(&self) -> &[f64] {
        &self.index.popularity
    }

    fn user_scores(&self, user: &str) -> Option<Vec<f64>> {
        let u = *self.index.user_pos.get(user)?;
        let hist = &self.index.history[u];
        Some(
            self.neighbors
                .iter()
                .map(|nbrs| {
                    nbrs.iter()
                        .filter(|(j, _)| hist.binary_search(j).is_ok())
                        .map(|(_, s)| s)
                        .sum()
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use crate::ingest::Interaction;
    use crate::recommenders::{train, RecommenderConfig, RecommenderKind, Snapshot};

    #[test]
    fn cosine_scores_by_hand() {
        // A and B co-occur for u1,u2; C only with A for u3
        let rows = vec![
            Interaction::new("u1", "A", 1),
            Interaction::new("u1", "B", 2),
            Interaction::new("u2", "A", 3),
            Interaction::new("u2", "B", 4),
            Interaction::new("u3", "A", 5),
            Interaction::new("u3", "C", 6),
            Interaction::new("u4", "A", 7),
        ];
        let catalog: BTreeSet<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let cfg = RecommenderConfig { kind: RecommenderKind::ItemKnn, ..Default::default() };
        let model = train(&cfg, Snapshot { interactions: &rows, catalog: &catalog }).unwrap();
        // deg(A)=4, deg(B)=2, deg(C)=1; sim(A,B)=2/sqrt(8), sim(A,C)=1/2
        let sab = 2.0 / 8f64.sqrt();
        assert!((model.score("u4", "B").unwrap() - sab).abs() < 1e-12);
        assert!((model.score("u4", "C").unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(model.recommend("u4", 1, &["A".to_string()].into()).unwrap().0, ["B"]);
        assert!(model.embeddings().is_none());
    }
}
