//! K-Means over embedding vectors.
//!
//! k-means++ seeding from a seeded ChaCha PRNG, Lloyd iterations until the
//! largest centroid movement drops below `tol`, farthest-point reseeding of
//! empty clusters, best of several starts. All ties resolve to the lowest
//! index.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Vector;

pub const CLUSTER_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Upper end of the automatic k scan.
pub const AUTO_K_MAX: usize = 12;
/// Independent k-means++ starts per fit; the lowest inertia wins.
pub const N_RESTARTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no vectors to cluster")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} exceeds the {distinct} distinct vectors")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub schema_version: u32,
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<Vector>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dims(vectors: &[Vector]) -> Result<usize, ClusterError> {
    let dim = vectors.first().ok_or(ClusterError::Empty)?.dim;
    for v in vectors {
        if v.dim != dim || v.values.len() != dim {
            return Err(ClusterError::DimensionMismatch { expected: dim, got: v.values.len() });
        }
    }
    Ok(dim)
}

fn distinct_count(vectors: &[Vector]) -> usize {
    vectors
        .iter()
        .map(|v| v.values.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            if acc > target {
                chosen = Some(i);
                break;
            }
        }
        // Rounding can leave `target` just past the final sum.
        let idx = chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("k <= distinct points"));
        let c = points[idx].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Assign every point to its nearest centroid, then give each empty cluster
/// the point farthest from its current centroid.
fn assign_with_repair(points: &[&[f64]], centroids: &mut [Vec<f64>]) -> (Vec<usize>, f64) {
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(centroids, p).0).collect();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assignments[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let p = far.expect("k <= n leaves a cluster with two members");
        centroids[empty] = points[p].to_vec();
        assignments = points.iter().map(|q| nearest(centroids, q).0).collect();
        // Guard against a duplicate of p sitting on a lower-id centroid.
        assignments[p] = empty;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    (assignments, inertia)
}

/// One Lloyd assignment step, as reported to a trace hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydStep {
    pub restart: usize,
    pub iteration: usize,
    pub inertia: f64,
}

/// K-Means with k-means++ initialization, best of [`N_RESTARTS`] seeded starts.
pub fn kmeans(
    vectors: &[Vector],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel, ClusterError> {
    kmeans_traced(vectors, k, seed, max_iter, tol, &mut |_| {})
}

/// As [`kmeans`], calling `trace` after each assignment step of every start.
pub fn kmeans_traced(
    vectors: &[Vector],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    trace: &mut dyn FnMut(LloydStep),
) -> Result<ClusterModel, ClusterError> {
    let dim = check_dims(vectors)?;
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(ClusterError::TooManyClusters { k, distinct });
    }
    if max_iter == 0 || !(tol > 0.0) {
        return Err(ClusterError::Invalid("max_iter and tol must be positive".into()));
    }
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // (centroids, assignments, inertia, iterations) of the best start so far
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64, usize)> = None;
    for restart in 0..N_RESTARTS {
        let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
        let mut iterations_run = 0;
        for iteration in 0..max_iter {
            let (assignments, inertia) = assign_with_repair(&points, &mut centroids);
            trace(LloydStep { restart, iteration, inertia });
            iterations_run = iteration + 1;

            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assignments) {
                counts[a] += 1;
                for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                    *s += x;
                }
            }
            let mut movement: f64 = 0.0;
            for c in 0..k {
                let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                movement = movement.max(sq_dist(&mean, &centroids[c]).sqrt());
                centroids[c] = mean;
            }
            if movement < tol {
                break;
            }
        }
        let (assignments, inertia) = assign_with_repair(&points, &mut centroids);
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((centroids, assignments, inertia, iterations_run));
        }
    }

    let (centroids, assignments, inertia, iterations_run) = best.expect("at least one start");
    let centroids = centroids
        .into_iter()
        .map(|c| Vector::new(c).map_err(|e| ClusterError::Invalid(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusterModel {
        schema_version: CLUSTER_SCHEMA_VERSION,
        k,
        dim,
        centroids,
        assignments,
        inertia,
        seed,
        iterations_run,
    })
}

/// Nearest centroid of `v`; ties go to the lowest cluster id.
pub fn assign(model: &ClusterModel, v: &Vector) -> Result<usize, ClusterError> {
    if v.dim != model.dim {
        return Err(ClusterError::DimensionMismatch { expected: model.dim, got: v.dim });
    }
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in model.centroids.iter().enumerate() {
        let d = sq_dist(&centroid.values, &v.values);
        if d < best.1 {
            best = (c, d);
        }
    }
    Ok(best.0)
}

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
pub fn silhouette_score(vectors: &[Vector], assignments: &[usize]) -> Result<f64, ClusterError> {
    check_dims(vectors)?;
    if vectors.len() != assignments.len() {
        return Err(ClusterError::Invalid("assignments length differs from vectors".into()));
    }
    let labels: Vec<usize> = {
        let mut l: Vec<usize> = assignments.to_vec();
        l.sort_unstable();
        l.dedup();
        l
    };
    if labels.len() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let n = vectors.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; labels.len()];
        let mut count = vec![0usize; labels.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let slot = labels.binary_search(&assignments[j]).expect("label present");
            sum[slot] += sq_dist(&vectors[i].values, &vectors[j].values).sqrt();
            count[slot] += 1;
        }
        let own = labels.binary_search(&assignments[i]).expect("label present");
        if count[own] == 0 {
            continue;
        }
        let a = sum[own] / count[own] as f64;
        let b = (0..labels.len())
            .filter(|&s| s != own && count[s] > 0)
            .map(|s| sum[s] / count[s] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Scan k in `[2, min(12, n - 1)]` (capped by the distinct count) and keep
/// the model with the highest silhouette; ties keep the smaller k. Inputs
/// too small to scan get a single cluster.
pub fn kmeans_auto(vectors: &[Vector], seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel, ClusterError> {
    check_dims(vectors)?;
    let upper = AUTO_K_MAX.min(vectors.len().saturating_sub(1)).min(distinct_count(vectors));
    if upper < 2 {
        return kmeans(vectors, 1, seed, max_iter, tol);
    }
    let mut best: Option<(f64, ClusterModel)> = None;
    for k in 2..=upper {
        let model = kmeans(vectors, k, seed, max_iter, tol)?;
        let score = silhouette_score(vectors, &model.assignments)?;
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, model));
        }
    }
    Ok(best.expect("at least one k scanned").1)
}
