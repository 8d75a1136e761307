//! Seeded k-means with k-means++ initialization and silhouette scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: f64,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Lloyd iterations until assignments stop changing or `iters` is reached.
/// An empty cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iters: usize) -> KMeansResult {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut inertia_history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .map(|i| (i, dist2(&points[i], &centroids[assignments[i]])))
                    .fold((0, -1.0), |b, (i, d)| if d > b.1 { (i, d) } else { b });
                centroids[j] = points[far.0].clone();
                assignments[far.0] = j;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let inertia: f64 = points.iter().zip(&next).map(|(p, &a)| dist2(p, &centroids[a])).sum();
        inertia_history.push(inertia);
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    let silhouette = silhouette(points, &assignments, k);
    KMeansResult { assignments, centroids, silhouette, inertia_history }
}

/// Mean silhouette coefficient; singleton clusters score 0, as does `k = 1`.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = points.len();
    if k < 2 || n < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += dist2(&points[i], &points[j]).sqrt();
            }
        }
        let own = assignments[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Best silhouette over `k` in `k_range`, with its k. All-identical points
/// form a single cluster.
pub fn best_kmeans(points: &[Vec<f64>], k_range: std::ops::RangeInclusive<usize>, seed: u64, iters: usize) -> (usize, KMeansResult) {
    let distinct = points.iter().any(|p| p != &points[0]);
    if !distinct {
        return (1, kmeans(points, 1, seed, iters));
    }
    let mut best: Option<(usize, KMeansResult)> = None;
    for k in k_range.filter(|&k| k <= points.len()) {
        let r = kmeans(points, k, seed, iters);
        if best.as_ref().is_none_or(|b| r.silhouette > b.1.silhouette) {
            best = Some((k, r));
        }
    }
    best.unwrap_or_else(|| (1, kmeans(points, 1, seed, iters)))
}
