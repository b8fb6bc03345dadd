//! Seeded Lloyd k-means with k-means++ seeding, used to initialize the
//! labeling.

use rand::Rng as _;
use rayon::prelude::*;

use crate::cube::{LabelField, Rng};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// 1-based cluster id per point.
    pub labels: Vec<usize>,
    /// `k x dim` row-major centers.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KmeansResult {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and its squared distance; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Arithmetic mean of the points with 0-based label `c`, summed in point order.
pub(crate) fn cluster_means(points: &[f64], dim: usize, labels0: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &c) in labels0.iter().enumerate() {
        counts[c] += 1;
        let x = &points[p * dim..(p + 1) * dim];
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= n;
            }
        }
    }
    (sums, counts)
}

fn plus_plus_seeding(points: &[f64], dim: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|x| squared_distance(x, &centers[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (p, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = p;
                    break;
                }
            }
            chosen
        } else {
            // all remaining points coincide with a center
            rng.random_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        centers.extend_from_slice(c);
        for (x, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(squared_distance(x, c));
        }
    }
    centers
}

/// Clusters the `N x dim` row-major `points` into `k` groups.
///
/// Iterates assignment and mean updates until no assignment changes or
/// `max_iter` assignment steps have run. A cluster left empty is re-seeded
/// with the point farthest from its assigned center.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form points of dimension {dim}",
            points.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let n = points.len() / dim;
    if n < k {
        return Err(Error::InvalidParameter(format!(
            "{n} points cannot form {k} clusters"
        )));
    }

    let mut centers = plus_plus_seeding(points, dim, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = points
            .par_chunks(dim)
            .map(|x| nearest(x, &centers, dim))
            .collect();
        let mut changed = false;
        for (p, (c, d)) in assigned.into_iter().enumerate() {
            if labels[p] != c {
                labels[p] = c;
                changed = true;
            }
            dists[p] = d;
        }

        // re-seed empty clusters from the worst-fit points
        let mut counts = vec![0usize; k];
        for &c in &labels {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&p| counts[labels[p]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("n >= k leaves a cluster with two points");
            counts[labels[far]] -= 1;
            counts[c] = 1;
            labels[far] = c;
            dists[far] = 0.0;
            centers[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            changed = true;
        }

        history.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        centers = cluster_means(points, dim, &labels, k).0;
    }

    let inertia = points
        .chunks_exact(dim)
        .zip(&labels)
        .map(|(x, &c)| squared_distance(x, &centers[c * dim..(c + 1) * dim]))
        .sum();

    Ok(KmeansResult {
        labels: labels.into_iter().map(|c| c + 1).collect(),
        centers,
        dim,
        inertia,
        iterations,
        inertia_history: history,
        converged,
    })
}

/// One-hot labeling from 1-based k-means labels.
pub fn labels_to_field(labels: &[usize], height: usize, width: usize, k: usize) -> Result<LabelField> {
    LabelField::from_labels(labels, height, width, k)
}
