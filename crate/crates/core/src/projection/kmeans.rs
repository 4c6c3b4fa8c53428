use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sq_dist, Embeddings, ProjectionError};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// Result of [`kmeans_cluster`]. `assignment[i]` is the cluster of row `i`
/// of the clustered embeddings (same order as `ids`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    pub assignment: Vec<usize>,
    /// Lloyd iterations run before the assignment stopped changing.
    pub iterations: usize,
    /// Within-cluster sum of squares after each centroid update.
    pub sse_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.assignment[i])
    }

    /// Row indices belonging to cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.assignment[i] == c).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Stops at an assignment fixpoint or after [`MAX_LLOYD_ITERATIONS`]. A
/// cluster that empties out is re-seeded with the point lying farthest from
/// its current centroid.
pub fn kmeans_cluster(embeddings: &Embeddings, k: usize, seed: u64) -> Result<ClusterModel, ProjectionError> {
    let n = embeddings.len();
    if k == 0 {
        return Err(ProjectionError::ZeroClusters);
    }
    if n == 0 {
        return Err(ProjectionError::TooFewPoints { needed: 1, got: 0 });
    }
    if k > n {
        return Err(ProjectionError::KTooLarge { k, n });
    }
    let dim = embeddings.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(embeddings, k, &mut rng);

    let mut assignment = vec![usize::MAX; n];
    let mut sse_trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = assign(embeddings, &centroids, &mut assignment);
        changed |= reseed_empty(embeddings, &mut centroids, &mut assignment);
        if !changed && iter > 0 {
            break;
        }
        iterations = iter + 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            // reseed_empty guarantees counts[c] > 0
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroid.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = s * inv;
            }
        }
        sse_trace.push(sse(embeddings, &centroids, &assignment));
    }

    Ok(ClusterModel {
        k,
        centroids,
        ids: embeddings.ids().to_vec(),
        assignment,
        iterations,
        sse_trace,
    })
}

fn plus_plus_init(embeddings: &Embeddings, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let first = rng.gen_range(0..n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(embeddings.row(i), embeddings.row(first)))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a chosen centroid.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.gen_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(embeddings.row(i), embeddings.row(next)));
        }
    }
    chosen.into_iter().map(|i| embeddings.row(i).to_vec()).collect()
}

/// Nearest-centroid assignment. On ties a point keeps its current cluster,
/// otherwise the lowest index wins.
fn assign(embeddings: &Embeddings, centroids: &[Vec<f64>], assignment: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, slot) in assignment.iter_mut().enumerate() {
        let x = embeddings.row(i);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(x, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if *slot < centroids.len() && sq_dist(x, &centroids[*slot]) <= best_d {
            best = *slot;
        }
        if best != *slot {
            *slot = best;
            changed = true;
        }
    }
    changed
}

fn reseed_empty(embeddings: &Embeddings, centroids: &mut [Vec<f64>], assignment: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let mut changed = false;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .map(|i| (i, sq_dist(embeddings.row(i), &centroids[assignment[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        // k <= n, so some cluster holds at least two points.
        let Some((i, _)) = far else { break };
        counts[assignment[i]] -= 1;
        counts[empty] = 1;
        assignment[i] = empty;
        centroids[empty] = embeddings.row(i).to_vec();
        changed = true;
    }
    changed
}

fn sse(embeddings: &Embeddings, centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(embeddings.row(i), &centroids[c]))
        .sum()
}

/// Diversity seeding: cluster, then take the `per_centroid` images nearest
/// each centroid. Output is centroid-major and always has exactly
/// `k * per_centroid` distinct ids.
pub fn select_seed_pool(
    embeddings: &Embeddings,
    k: usize,
    per_centroid: usize,
    seed: u64,
) -> Result<Vec<String>, ProjectionError> {
    let n = embeddings.len();
    if k * per_centroid > n {
        return Err(ProjectionError::KTooLarge { k: k * per_centroid, n });
    }
    let model = kmeans_cluster(embeddings, k, seed)?;
    let mut taken = BTreeSet::new();
    let mut picks = Vec::with_capacity(k * per_centroid);

    for (c, centroid) in model.centroids.iter().enumerate() {
        let by_distance = |rows: Vec<usize>| {
            let mut ranked: Vec<(f64, usize)> = rows
                .into_iter()
                .map(|i| (sq_dist(embeddings.row(i), centroid), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked.into_iter().map(|(_, i)| i)
        };
        let mut need = per_centroid;
        for i in by_distance(model.members(c)) {
            if need == 0 {
                break;
            }
            if taken.insert(i) {
                picks.push(i);
                need -= 1;
            }
        }
        // Thin cluster: backfill with the globally nearest unselected points.
        if need > 0 {
            for i in by_distance((0..n).collect()) {
                if need == 0 {
                    break;
                }
                if taken.insert(i) {
                    picks.push(i);
                    need -= 1;
                }
            }
        }
    }
    Ok(picks.into_iter().map(|i| embeddings.id(i).to_owned()).collect())
}
