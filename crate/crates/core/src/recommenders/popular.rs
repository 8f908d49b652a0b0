use super::{Index, RecommenderKind, TrainedModel};

/// Scores every item by its interaction count, identically for all users.
#[derive(Debug, Clone)]
pub struct MostPopular {
    index: Index,
}

impl MostPopular {
    pub(crate) fn fit(index: Index) -> Self {
        Self { index }
    }
}

impl TrainedModel for MostPopular {
    fn kind(&self) -> RecommenderKind {
        RecommenderKind::MostPopular
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

    fn user_scores(&self, _user: &str) -> Option<Vec<f64>> {
        Some(self.index.popularity.clone())
    }
}
