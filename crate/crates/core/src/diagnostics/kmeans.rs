//! Lloyd's k-means with k-means++ seeding, restarts, and a final
//! single-point transfer pass.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::DiagnosticsError;
use crate::recommenders::EmbeddingMatrix;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ initializations; the lowest-SSE run wins.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 300,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    pub iterations: usize,
    /// Within-cluster SSE after every centroid update of the winning run.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sse(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a chosen center
            Err(_) => (0..points.len()).find(|i| !chosen.contains(i)).expect("points >= k"),
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn lloyd(points: &[&[f64]], dim: usize, k: usize, max_iters: usize, mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let mut next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();

        // re-seed empty clusters with the point farthest from its centroid
        let mut sizes = vec![0usize; k];
        for &l in &next {
            sizes[l] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| sizes[next[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .expect("points >= k leaves a cluster with two members");
            sizes[next[donor]] -= 1;
            sizes[c] = 1;
            next[donor] = c;
            dist[donor] = 0.0;
            centroids[c] = points[donor].to_vec();
        }

        if next == labels {
            break;
        }
        labels = next;

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            centroids[c] = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
        }
        history.push(sse(points, &labels, &centroids));
    }
    if !labels.is_empty() {
        iterations += hartigan(points, &mut labels, &mut centroids, k, max_iters, &mut history);
    }
    KMeansResult {
        sse: sse(points, &labels, &centroids),
        labels,
        centroids,
        iterations,
        sse_history: history,
    }
}

/// Single-point transfers that strictly lower SSE, applied after Lloyd
/// converges. Escapes Lloyd fixed points that are not local optima under
/// moving one point; returns the number of passes.
fn hartigan(
    points: &[&[f64]],
    labels: &mut [usize],
    centroids: &mut [Vec<f64>],
    k: usize,
    max_passes: usize,
    history: &mut Vec<f64>,
) -> usize {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut passes = 0;
    loop {
        passes += 1;
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let loss = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(p, &centroids[b]) - loss;
                if delta < best.1 - 1e-12 * (1.0 + loss) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let nb = sizes[b] as f64;
            for (d, x) in p.iter().enumerate() {
                centroids[a][d] = (centroids[a][d] * na - x) / (na - 1.0);
                centroids[b][d] = (centroids[b][d] * nb + x) / (nb + 1.0);
            }
            sizes[a] -= 1;
            sizes[b] += 1;
            labels[i] = b;
            moved = true;
            history.push(sse(points, labels, centroids));
        }
        if !moved || passes >= max_passes {
            return passes;
        }
    }
}

const EXHAUSTIVE_PAIR_LIMIT: usize = 64;

pub fn kmeans_rows(points: &[&[f64]], params: KMeansParams) -> Result<KMeansResult, DiagnosticsError> {
    if params.k == 0 {
        return Err(DiagnosticsError::Usage("k must be at least 1".into()));
    }
    if points.len() < params.k {
        return Err(DiagnosticsError::Usage(format!(
            "{} points cannot form {} clusters",
            points.len(),
            params.k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(DiagnosticsError::Usage("points have differing dimensions".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..params.restarts.max(1) {
        let mut rng = rng_for(params.seed, &["kmeans".into(), restart.into()]);
        let init = plus_plus_init(points, params.k, &mut rng);
        let run = lloyd(points, dim, params.k, params.max_iters, init);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    // small two-cluster inputs: also start from every pair of points
    if params.k == 2 && points.len() <= EXHAUSTIVE_PAIR_LIMIT {
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                if points[i] == points[j] {
                    continue;
                }
                let run = lloyd(points, dim, 2, params.max_iters, vec![points[i].to_vec(), points[j].to_vec()]);
                if best.as_ref().is_none_or(|b| run.sse < b.sse) {
                    best = Some(run);
                }
            }
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(points: &EmbeddingMatrix, k: usize, seed: u64) -> Result<KMeansResult, DiagnosticsError> {
    let rows: Vec<&[f64]> = points.rows().collect();
    kmeans_rows(&rows, KMeansParams::new(k, seed))
}
