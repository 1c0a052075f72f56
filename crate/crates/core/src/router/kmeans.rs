use rand::Rng;

use crate::error::{Error, Result};
use crate::model::substream;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on exact ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(vectors: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| sq_dist(v, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean metric, fully
/// deterministic for a given seed. Runs until the assignment fixpoint or
/// `max_iters`, whichever is first.
pub fn kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::TooFewVectors {
            what: "k-means",
            need: k,
            got: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidParam("k-means inputs have mixed dims".into()));
    }
    let mut rng = substream(seed, 2000);

    // k-means++: spread the initial centroids with D² weighting.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(vectors[rng.random_range(0..vectors.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = vectors
            .iter()
            .map(|v| {
                centroids
                    .iter()
                    .map(|c| sq_dist(v, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = vectors.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining points coincide with a centroid; any choice is
            // as good as another, so take the first.
            0
        };
        centroids.push(vectors[next].clone());
    }

    let mut assignments: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
    for _ in 0..max_iters {
        // Recompute means.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if count > 0 {
                *c = sum.iter().map(|s| s / count as f64).collect();
            }
        }
        // Re-seat any emptied cluster on the point farthest from its own
        // assigned centroid — deterministic and keeps k clusters populated.
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..vectors.len())
                .max_by(|&a, &b| {
                    sq_dist(&vectors[a], &centroids[assignments[a]])
                        .total_cmp(&sq_dist(&vectors[b], &centroids[assignments[b]]))
                })
                .unwrap_or(0);
            centroids[empty] = vectors[far].clone();
        }

        let next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok((assignments, centroids))
}
