//! Centroid-distance tracking over embedding snapshots.
//!
//! Reference groups come from k-means on the final snapshot. Earlier
//! snapshots are grouped by those same labels, so the trace measures how far
//! apart the end-state groups were at each point in time.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::DiagnosticsError;
use crate::recommenders::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub subject: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodPolarization {
    pub period: usize,
    pub centroids: Vec<Vec<f64>>,
    pub centroid_distance: f64,
    pub projection: Vec<ProjectedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationTrace {
    pub reference_labels: BTreeMap<String, usize>,
    pub periods: Vec<PeriodPolarization>,
}

impl PolarizationTrace {
    pub fn distances(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.centroid_distance).collect()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Re-orders `m`'s rows to follow `order`, failing if the subject sets differ.
fn align<'a>(m: &'a EmbeddingMatrix, order: &[String], period: usize) -> Result<Vec<&'a [f64]>, DiagnosticsError> {
    if m.len() != order.len() {
        return Err(DiagnosticsError::Alignment(format!(
            "period {period} has {} subjects, final period has {}",
            m.len(),
            order.len()
        )));
    }
    let pos: HashMap<&str, usize> = m.subject_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    order
        .iter()
        .map(|s| {
            pos.get(s.as_str())
                .map(|&i| m.row(i))
                .ok_or_else(|| DiagnosticsError::Alignment(format!("subject `{s}` missing from period {period}")))
        })
        .collect()
}

/// Top-two principal axes of `rows` and their mean. Each axis is signed so
/// that its largest-magnitude coordinate is positive.
fn principal_axes(rows: &[&[f64]], dim: usize) -> (Vec<f64>, [Vec<f64>; 2]) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in rows {
        for a in 0..dim {
            let da = r[a] - mean[a];
            for b in a..dim {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else { return vec![0.0; dim] };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    (mean, [axis(0), axis(1)])
}

fn group_means(rows: &[&[f64]], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (r, &l) in rows.iter().zip(labels) {
        sizes[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(r.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(sizes)
        .map(|(s, n)| s.into_iter().map(|x| x / n.max(1) as f64).collect())
        .collect()
}

/// Mean pairwise distance between group centroids (the plain distance for k = 2).
fn centroid_spread(centroids: &[Vec<f64>]) -> f64 {
    let k = centroids.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            total += euclidean(&centroids[a], &centroids[b]);
        }
    }
    total / (k * (k - 1) / 2) as f64
}

/// `snapshots` pairs each period index with its embedding matrix, in period order.
pub fn polarization_trace(
    snapshots: &[(usize, &EmbeddingMatrix)],
    k: usize,
    seed: u64,
) -> Result<PolarizationTrace, DiagnosticsError> {
    let Some(&(_, last)) = snapshots.last() else {
        return Err(DiagnosticsError::Usage("no embedding snapshots".into()));
    };
    if snapshots.iter().any(|(_, m)| m.dim != last.dim) {
        return Err(DiagnosticsError::Alignment("snapshots have differing dimensions".into()));
    }
    let order: Vec<String> = last.subject_ids.clone();
    let dim = last.dim;
    let clusters = kmeans(last, k, seed)?;
    let final_rows: Vec<&[f64]> = last.rows().collect();
    let (mean, [pc1, pc2]) = principal_axes(&final_rows, dim);
    let project = |r: &[f64]| {
        let centered: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let dot = |v: &[f64]| centered.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        (dot(&pc1), dot(&pc2))
    };

    let mut periods = Vec::with_capacity(snapshots.len());
    for &(period, matrix) in snapshots {
        let rows = align(matrix, &order, period)?;
        let centroids = group_means(&rows, &clusters.labels, k, dim);
        let projection = order
            .iter()
            .zip(&rows)
            .map(|(s, r)| {
                let (x, y) = project(r);
                ProjectedPoint { subject: s.clone(), x, y }
            })
            .collect();
        periods.push(PeriodPolarization {
            period,
            centroid_distance: centroid_spread(&centroids),
            centroids,
            projection,
        });
    }
    Ok(PolarizationTrace {
        reference_labels: order.into_iter().zip(clusters.labels).collect(),
        periods,
    })
}
