//! Seeded Lloyd k-means over small-dimensional points.
//!
//! Used per sub-quantizer: every call clusters one contiguous `n x dim`
//! buffer of sub-vectors. Initialization is k-means++; empty clusters are
//! refilled with the point farthest from its current centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once `(prev - cur) / prev` drops below this.
    pub rel_tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 25,
            rel_tol: 1e-4,
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
#[inline]
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Clusters `points` (row-major, `n x dim`) into `k` centroids.
///
/// Requires `n >= k`. Returns `k x dim` centroids, row-major.
pub fn kmeans(points: &[f32], dim: usize, k: usize, seed: u64, params: &KMeansParams) -> Vec<f32> {
    assert!(dim > 0 && k > 0);
    assert_eq!(points.len() % dim, 0);
    let n = points.len() / dim;
    assert!(n >= k, "k-means needs at least k points");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, dim, k, &mut rng);

    let mut assign = vec![0usize; n];
    let mut dist = vec![0f64; n];
    let mut counts = vec![0usize; k];
    let mut sums = vec![0f64; k * dim];
    let mut prev = f64::INFINITY;

    for _ in 0..params.max_iters {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut distortion = 0.0;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (c, d) = nearest(p, &centroids, dim);
            assign[i] = c;
            dist[i] = d;
            counts[c] += 1;
            distortion += d;
        }

        refill_empty(
            points,
            dim,
            &mut centroids,
            &mut assign,
            &mut dist,
            &mut counts,
        );

        sums.iter_mut().for_each(|s| *s = 0.0);
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let row = &mut sums[assign[i] * dim..(assign[i] + 1) * dim];
            for (s, &x) in row.iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            // counts[c] >= 1 after refill
            let inv = 1.0 / counts[c] as f64;
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] * inv) as f32;
            }
        }

        if prev.is_finite() {
            if prev <= 0.0 || (prev - distortion) < params.rel_tol * prev {
                break;
            }
        }
        prev = distortion;
    }
    centroids
}

fn init_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        let newest = &centroids[start..];
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            let nd = sq_dist(p, newest);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Moves, for each empty cluster in index order, the point farthest from its
/// centroid into that cluster. Donor clusters always keep at least one point.
fn refill_empty(
    points: &[f32],
    dim: usize,
    centroids: &mut [f32],
    assign: &mut [usize],
    dist: &mut [f64],
    counts: &mut [usize],
) {
    for c in 0..counts.len() {
        if counts[c] != 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for i in 0..assign.len() {
            if counts[assign[i]] <= 1 {
                continue;
            }
            if best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        let i = best.expect("n >= k guarantees a donor cluster");
        counts[assign[i]] -= 1;
        assign[i] = c;
        counts[c] = 1;
        dist[i] = 0.0;
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
}
