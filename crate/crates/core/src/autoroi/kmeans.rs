//! Weighted Lloyd k-means over pixel coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPoint {
    pub x: usize,
    pub y: usize,
    pub w: f64,
}

impl WeightedPoint {
    fn coords(&self) -> [f64; 2] {
        [self.x as f64, self.y as f64]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index for each input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Weighted objective after initialization and after every Lloyd step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }

    pub fn members<'a>(
        &'a self,
        points: &'a [WeightedPoint],
        cluster: usize,
    ) -> impl Iterator<Item = &'a WeightedPoint> + 'a {
        points
            .iter()
            .zip(&self.assignments)
            .filter(move |(_, &a)| a == cluster)
            .map(|(p, _)| p)
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn objective(points: &[WeightedPoint], assignments: &[usize], centroids: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| p.w * dist2(p.coords(), centroids[a]))
        .sum()
}

/// Draws an index with probability proportional to `weights`.
fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Weighted k-means++ seeding: the first centre is drawn proportionally to
/// weight, later ones proportionally to `w * D^2`.
fn seed_centroids(points: &[WeightedPoint], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let weights: Vec<f64> = points.iter().map(|p| p.w).collect();
    let mut centroids = vec![points[draw(rng, &weights)].coords()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p.coords(), centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = points.iter().zip(&d2).map(|(p, d)| p.w * d).collect();
        let next = points[draw(rng, &scores)].coords();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p.coords(), next));
        }
        centroids.push(next);
    }
    centroids
}

/// One seeded run of weighted Lloyd iterations. Weights enter both the
/// centroid update and the objective `sum(w * dist^2)`.
pub fn weighted_kmeans(points: &[WeightedPoint], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidClusterCount {
            k,
            points: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p.coords(), &centroids).0).collect();
    let mut history = vec![objective(points, &assignments, &centroids)];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;

        let mut sums = vec![[0.0f64; 3]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p.w * p.x as f64;
            sums[a][1] += p.w * p.y as f64;
            sums[a][2] += p.w;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            // An emptied cluster keeps its previous centre.
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }

        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (best, best_d) = nearest(p.coords(), &centroids);
            // Ties keep the current cluster so the loop terminates.
            if best != *a && best_d < dist2(p.coords(), centroids[*a]) {
                *a = best;
                changed = true;
            }
        }
        history.push(objective(points, &assignments, &centroids));
        if !changed {
            break;
        }
    }

    Ok(Clustering {
        assignments,
        centroids,
        objective_history: history,
        iterations,
    })
}

/// Best of `restarts` seeded runs by final objective; run `i` uses a seed
/// derived from `seed` and `i`, so the result is reproducible.
pub fn weighted_kmeans_restarts(points: &[WeightedPoint], k: usize, seed: u64, restarts: usize) -> Result<Clustering> {
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut best = weighted_kmeans(points, k, seed)?;
    for _ in 1..restarts.max(1) {
        let run = weighted_kmeans(points, k, seeder.gen())?;
        if run.objective() < best.objective() {
            best = run;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: usize, y: usize, w: f64) -> WeightedPoint {
        WeightedPoint { x, y, w }
    }

    fn blob(cx: usize, cy: usize, r: usize, w: f64) -> Vec<WeightedPoint> {
        let mut out = Vec::new();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                out.push(pt(x, y, w));
            }
        }
        out
    }

    #[test]
    fn single_cluster_is_the_weighted_mean() {
        let points = vec![pt(0, 0, 1.0), pt(10, 0, 3.0)];
        let c = weighted_kmeans(&points, 1, 3).unwrap();
        assert!((c.centroids[0][0] - 7.5).abs() < 1e-12);
        assert!(c.centroids[0][1].abs() < 1e-12);
    }

    #[test]
    fn k_one_matches_closed_form_on_blob() {
        let points = blob(20, 30, 4, 0.5);
        let c = weighted_kmeans(&points, 1, 0).unwrap();
        assert!((c.centroids[0][0] - 20.0).abs() < 1e-9);
        assert!((c.centroids[0][1] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn two_separated_blobs_split_exactly() {
        let mut points = blob(10, 10, 3, 0.8);
        let first = points.len();
        points.extend(blob(60, 40, 3, 0.3));
        let c = weighted_kmeans(&points, 2, 11).unwrap();
        // Brute-force check: every point sits with its nearest final centre
        // and each blob maps to a single cluster.
        for (p, &a) in points.iter().zip(&c.assignments) {
            assert_eq!(nearest(p.coords(), &c.centroids).0, a);
        }
        let left = c.assignments[0];
        assert!(c.assignments[..first].iter().all(|&a| a == left));
        assert!(c.assignments[first..].iter().all(|&a| a != left));
    }

    #[test]
    fn too_many_clusters_rejected() {
        let points = vec![pt(0, 0, 1.0)];
        assert!(matches!(
            weighted_kmeans(&points, 2, 0),
            Err(Error::InvalidClusterCount { k: 2, points: 1 })
        ));
        assert!(weighted_kmeans(&points, 0, 0).is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut points = blob(10, 10, 5, 0.4);
        points.extend(blob(30, 12, 5, 0.6));
        points.extend(blob(20, 40, 5, 0.2));
        let a = weighted_kmeans_restarts(&points, 3, 7, 5).unwrap();
        let b = weighted_kmeans_restarts(&points, 3, 7, 5).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn objective_never_increases(
            raw in prop::collection::vec((0usize..50, 0usize..50, 0.15f64..1.0), 5..60),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let points: Vec<_> = raw.into_iter().map(|(x, y, w)| pt(x, y, w)).collect();
            prop_assume!(k <= points.len());
            let c = weighted_kmeans(&points, k, seed).unwrap();
            for w in c.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
            prop_assert!(c.iterations <= MAX_ITERATIONS);
        }
    }
}
