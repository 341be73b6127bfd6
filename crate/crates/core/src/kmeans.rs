//! Lloyd's k-means over (center, duration) pairs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Point>,
    pub inertia: f64,
    /// Inertia after every update step, non-increasing.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
    /// Jittered duplicates added because there were fewer than `k`
    /// distinct points. Non-zero means the caller should warn.
    pub padded: usize,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let (dc, dd) = (a[0] - b[0], a[1] - b[1]);
    dc * dc + dd * dd
}

fn nearest(p: &Point, centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn inertia(points: &[Point], centroids: &[Point], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum()
}

fn distinct(points: &[Point]) -> usize {
    let mut seen: Vec<Point> = Vec::new();
    for p in points {
        if !seen.iter().any(|q| q == p) {
            seen.push(*p);
        }
    }
    seen.len()
}

/// Seeded k-means++ initialisation followed by Lloyd iterations.
pub fn fit_kmeans(points: &[Point], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if points.is_empty() {
        return Err(Error::Input("k-means needs at least one point".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("k-means point is not finite".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut pts = points.to_vec();
    let mut padded = 0;
    while distinct(&pts) < k {
        let base = pts[padded % points.len()];
        let jitter = [
            rng::normal(&mut rng, 0.0, 1e-3),
            rng::normal(&mut rng, 0.0, 1e-3),
        ];
        pts.push([base[0] + jitter[0], base[1] + jitter[1]]);
        padded += 1;
    }

    let mut centroids = Vec::with_capacity(k);
    centroids.push(pts[rng.random_range(0..pts.len())]);
    while centroids.len() < k {
        let d: Vec<f64> = pts.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = pts.len() - 1;
        for (i, &w) in d.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        // Guard against float drift landing on an already chosen point.
        if d[pick] <= 0.0 {
            pick = d
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (i, &w)| if w > b.1 { (i, w) } else { b })
                .0;
        }
        centroids.push(pts[pick]);
    }

    let mut assign: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut prev = inertia(&pts, &centroids, &assign);
    for _ in 0..max_iter.max(1) {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assign) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = [sums[c][0] / n, sums[c][1] / n];
            }
        }
        let cur = inertia(&pts, &centroids, &assign);
        let next: Vec<usize> = pts
            .iter()
            .zip(&assign)
            .map(|(p, &a)| {
                let (b, d) = nearest(p, &centroids);
                // Keep the current cluster unless strictly better.
                if d < dist2(p, &centroids[a]) {
                    b
                } else {
                    a
                }
            })
            .collect();
        let after = inertia(&pts, &centroids, &next);
        if cur > prev * (1.0 + 1e-12) + 1e-15 || after > cur * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::Generation("k-means inertia increased".into()));
        }
        history.push(after);
        prev = after;
        let changed = next != assign;
        assign = next;
        if !changed {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        inertia: prev,
        inertia_history: history,
        seed,
        padded,
    })
}

/// The sorted-by-center order makes slot `i` refer to the same region of
/// the video for every seed that lands on the same clusters.
pub fn sort_by_center(centroids: &mut [Point]) {
    centroids.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_pairs() {
        let pts = [[0.2, 0.1], [0.2, 0.1], [0.7, 0.3], [0.7, 0.3]];
        for seed in 0..10 {
            let mut m = fit_kmeans(&pts, 2, seed, 50).unwrap();
            sort_by_center(&mut m.centroids);
            assert_eq!(m.centroids, vec![[0.2, 0.1], [0.7, 0.3]]);
            assert_eq!(m.inertia, 0.0);
        }
    }

    #[test]
    fn k_equals_distinct() {
        let pts = [[0.1, 0.1], [0.5, 0.2], [0.9, 0.05]];
        let mut m = fit_kmeans(&pts, 3, 4, 50).unwrap();
        sort_by_center(&mut m.centroids);
        assert_eq!(m.centroids, pts.to_vec());
        assert_eq!(m.inertia, 0.0);
        assert_eq!(m.padded, 0);
    }

    #[test]
    fn pads_when_too_few() {
        let pts = [[0.5, 0.5], [0.5, 0.5]];
        let m = fit_kmeans(&pts, 3, 1, 20).unwrap();
        assert_eq!(m.padded, 2);
        assert_eq!(m.centroids.len(), 3);
        assert!(m.centroids.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic() {
        let pts: Vec<Point> = (0..30)
            .map(|i| [(i as f64 * 0.37) % 1.0, (i as f64 * 0.11) % 0.5])
            .collect();
        assert_eq!(
            fit_kmeans(&pts, 4, 9, 100).unwrap(),
            fit_kmeans(&pts, 4, 9, 100).unwrap()
        );
    }
}
