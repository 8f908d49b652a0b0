use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EmbeddingMatrix, Index, RecommenderConfig, RecommenderKind, TrainedModel};

const INIT_STD: f64 = 0.1;

/// Dot-product factorization trained with pointwise logistic loss over
/// observed positives and uniformly sampled negatives.
#[derive(Debug, Clone)]
pub struct MatrixFactorization {
    index: Index,
    dim: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn copy_rows(from: &EmbeddingMatrix, pos: &HashMap<String, usize>, dim: usize, into: &mut [f64]) {
    for (r, id) in from.subject_ids.iter().enumerate() {
        if let Some(&p) = pos.get(id) {
            into[p * dim..(p + 1) * dim].copy_from_slice(from.row(r));
        }
    }
}

impl MatrixFactorization {
    /// `init` rows (matched by subject id, same dimension) replace the random
    /// initialization, so training continues from an earlier model.
    pub(crate) fn fit(index: Index, config: &RecommenderConfig, init: Option<&(EmbeddingMatrix, EmbeddingMatrix)>) -> Self {
        let dim = config.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut user_factors: Vec<f64> =
            (0..index.users.len() * dim).map(|_| normal.sample(&mut rng)).collect();
        let mut item_factors: Vec<f64> =
            (0..index.items.len() * dim).map(|_| normal.sample(&mut rng)).collect();
        if let Some((users, items)) = init.filter(|(u, i)| u.dim == dim && i.dim == dim) {
            copy_rows(users, &index.user_pos, dim, &mut user_factors);
            copy_rows(items, &index.item_pos, dim, &mut item_factors);
        }

        let n_items = index.items.len();
        let lr = config.learning_rate;
        let reg = config.regularization;
        let mut order = index.positives.clone();
        let step = |u: usize, i: usize, label: f64, uf: &mut [f64], itf: &mut [f64]| {
            let pu = &mut uf[u * dim..(u + 1) * dim];
            let qi = &mut itf[i * dim..(i + 1) * dim];
            let g = sigmoid(dot(pu, qi)) - label;
            for d in 0..dim {
                let (p, q) = (pu[d], qi[d]);
                pu[d] -= lr * (g * q + reg * p);
                qi[d] -= lr * (g * p + reg * q);
            }
        };
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &(u, i) in &order {
                step(u, i, 1.0, &mut user_factors, &mut item_factors);
                for _ in 0..config.negatives_per_positive {
                    let j = rng.random_range(0..n_items);
                    step(u, j, 0.0, &mut user_factors, &mut item_factors);
                }
            }
        }
        Self {
            index,
            dim,
            user_factors,
            item_factors,
        }
    }

    fn user_row(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.dim..(u + 1) * self.dim]
    }

    fn item_row(&self, i: usize) -> &[f64] {
        &self.item_factors[i * self.dim..(i + 1) * self.dim]
    }
}

impl TrainedModel for MatrixFactorization {
    fn kind(&self) -> RecommenderKind {
        RecommenderKind::MatrixFactorization
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
        let pu = self.user_row(u);
        Some((0..self.index.items.len()).map(|i| dot(pu, self.item_row(i))).collect())
    }

    fn embeddings(&self) -> Option<(EmbeddingMatrix, EmbeddingMatrix)> {
        Some((
            EmbeddingMatrix::new(self.index.users.clone(), self.dim, self.user_factors.clone()),
            EmbeddingMatrix::new(self.index.items.clone(), self.dim, self.item_factors.clone()),
        ))
    }
}
