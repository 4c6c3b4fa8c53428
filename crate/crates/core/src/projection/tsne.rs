//! Exact t-SNE.
//!
//! Pairwise affinities are computed densely, so the cost is O(n²) per
//! iteration. That is fine for pools of a few thousand images and keeps the
//! result bit-reproducible.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sq_dist, Embeddings, ProjectionError, ProjectionPoint};

const ENTROPY_TOLERANCE_BITS: f64 = 1e-5;
const MAX_CALIBRATION_STEPS: usize = 64;
const DUPLICATE_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub init_std: f64,
    /// Per-coordinate adaptive gains (delta-bar-delta) on top of momentum.
    pub adaptive_gains: bool,
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 12.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-4,
            adaptive_gains: true,
            min_gain: 0.01,
            seed: 0,
        }
    }
}

/// Symmetric joint probabilities, stored densely row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectionPoint>,
    /// `kl_trace[t]` is KL(P‖Q) of the layout after `t` updates; the last
    /// entry is the returned layout.
    pub kl_trace: Vec<f64>,
    pub affinities: AffinityMatrix,
}

impl Projection {
    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

/// Squared Euclidean distances, dense `n × n`.
pub fn pairwise_sq_distances(embeddings: &Embeddings) -> Vec<f64> {
    let n = embeddings.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let xi = embeddings.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = sq_dist(xi, embeddings.row(j));
            }
        }
    });
    d
}

/// Gaussian conditional over one row of squared distances at precision
/// `beta`, and its Shannon entropy in bits.
pub fn conditional_distribution(sq_distances: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let d_min = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = sq_distances.iter().map(|d| (-beta * (d - d_min)).exp()).collect();
    let z: f64 = w.iter().sum();
    let weighted: f64 = w.iter().zip(sq_distances).map(|(wj, d)| wj * (d - d_min)).sum();
    let entropy_nats = z.ln() + beta * weighted / z;
    for wj in &mut w {
        *wj /= z;
    }
    (w, entropy_nats / std::f64::consts::LN_2)
}

/// Finds the kernel precision `beta = 1/(2σ²)` whose conditional has the
/// target perplexity, by bisection on `beta`.
pub fn calibrate_perplexity(sq_distances: &[f64], target_perplexity: f64) -> Result<f64, ProjectionError> {
    let m = sq_distances.len();
    if !(target_perplexity >= 1.0 && target_perplexity < m as f64) {
        return Err(ProjectionError::InvalidPerplexity {
            perplexity: target_perplexity,
            limit: m,
        });
    }
    if sq_distances.iter().all(|&d| d == 0.0) {
        return Err(ProjectionError::DegenerateRow);
    }
    let d_min = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_gap = sq_distances.iter().map(|d| d - d_min).sum::<f64>() / m as f64;
    let target_bits = target_perplexity.log2();

    let mut beta = if mean_gap > 0.0 { 1.0 / mean_gap } else { 1.0 };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..MAX_CALIBRATION_STEPS {
        let (_, h) = conditional_distribution(sq_distances, beta);
        let diff = h - target_bits;
        if diff.abs() <= ENTROPY_TOLERANCE_BITS {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    Ok(beta)
}

/// Symmetrized joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_affinities(sq_distances: &[f64], n: usize, perplexity: f64) -> Result<AffinityMatrix, ProjectionError> {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_distances[i * n + j]).collect();
            let beta = calibrate_perplexity(&row, perplexity)?;
            Ok(conditional_distribution(&row, beta).0)
        })
        .collect::<Result<_, ProjectionError>>()?;

    let mut cond = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        let mut it = row.iter();
        for j in 0..n {
            if j != i {
                cond[i * n + j] = *it.next().unwrap();
            }
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) * scale;
        }
    }
    Ok(AffinityMatrix { n, p })
}

/// KL(P‖Q) for a planar layout under the Student-t kernel.
pub fn kl_divergence(p: &AffinityMatrix, layout: &[[f64; 2]]) -> f64 {
    let n = p.n;
    let mut num = vec![0.0; n * n];
    let sum_q = student_kernel(layout, &mut num);
    kl_from_kernel(p, &num, sum_q)
}

fn student_kernel(layout: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = layout.len();
    let row_sums: Vec<f64> = num
        .par_chunks_mut(n.max(1))
        .enumerate()
        .map(|(i, row)| {
            let yi = layout[i];
            let mut s = 0.0;
            for (j, slot) in row.iter_mut().enumerate() {
                if j == i {
                    *slot = 0.0;
                    continue;
                }
                let dx = yi[0] - layout[j][0];
                let dy = yi[1] - layout[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                *slot = v;
                s += v;
            }
            s
        })
        .collect();
    row_sums.iter().sum()
}

fn kl_from_kernel(p: &AffinityMatrix, num: &[f64], sum_q: f64) -> f64 {
    let n = p.n;
    let log_z = sum_q.ln();
    let parts: Vec<f64> =
        p.p.par_chunks(n.max(1))
            .zip(num.par_chunks(n.max(1)))
            .map(|(prow, qrow)| {
                let mut s = 0.0;
                for (&pij, &nij) in prow.iter().zip(qrow) {
                    if pij > 0.0 {
                        s += pij * (pij.ln() - nij.ln() + log_z);
                    }
                }
                s
            })
            .collect();
    parts.iter().sum()
}

/// Perturbs exact duplicates so no two rows share a position. The first
/// occurrence of each vector is left untouched.
fn jitter_duplicates(embeddings: &Embeddings, seed: u64) -> Embeddings {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let mut out = Embeddings::new(embeddings.dim());
    for i in 0..embeddings.len() {
        let row = embeddings.row(i);
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let mut owned = row.to_vec();
        if seen.insert(key, i).is_some() {
            for v in &mut owned {
                *v += DUPLICATE_JITTER * rng.gen_range(-1.0..=1.0);
            }
        }
        out.push(embeddings.id(i), &owned)
            .expect("rows were validated on insertion");
    }
    out
}

/// Projects embeddings to 2D with exact t-SNE.
pub fn tsne_project(embeddings: &Embeddings, config: &TsneConfig) -> Result<Projection, ProjectionError> {
    let n = embeddings.len();
    if n < 4 {
        return Err(ProjectionError::TooFewPoints { needed: 4, got: n });
    }
    if config.perplexity >= (n - 1) as f64 / 3.0 {
        log::warn!(
            "perplexity {} is large for {} points; layouts may be poorly resolved",
            config.perplexity,
            n
        );
    }

    let jittered = jitter_duplicates(embeddings, config.seed);
    let dist = pairwise_sq_distances(&jittered);
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[i * n + j] == 0.0 {
                return Err(ProjectionError::DegenerateInput(
                    embeddings.id(i).to_owned(),
                    embeddings.id(j).to_owned(),
                ));
            }
        }
    }
    let p = joint_affinities(&dist, n, config.perplexity)?;
    drop(dist);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, config.init_std).expect("init_std must be positive");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(config.iterations + 1);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        let sum_q = student_kernel(&y, &mut num);
        kl_trace.push(kl_from_kernel(&p, &num, sum_q));

        let inv_z = 1.0 / sum_q;
        grad.par_iter_mut().enumerate().for_each(|(i, g)| {
            let prow = &p.p[i * n..(i + 1) * n];
            let qrow = &num[i * n..(i + 1) * n];
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                let nij = qrow[j];
                let coeff = (exaggeration * prow[j] - nij * inv_z) * nij;
                gx += coeff * (y[i][0] - y[j][0]);
                gy += coeff * (y[i][1] - y[j][1]);
            }
            *g = [4.0 * gx, 4.0 * gy];
        });

        for i in 0..n {
            for d in 0..2 {
                if config.adaptive_gains {
                    let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                    gains[i][d] = if same_sign {
                        (gains[i][d] * 0.8).max(config.min_gain)
                    } else {
                        gains[i][d] + 0.2
                    };
                }
                velocity[i][d] = momentum * velocity[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
    }
    let sum_q = student_kernel(&y, &mut num);
    kl_trace.push(kl_from_kernel(&p, &num, sum_q));

    let points = y
        .iter()
        .enumerate()
        .map(|(i, c)| ProjectionPoint {
            image_id: embeddings.id(i).to_owned(),
            x: c[0],
            y: c[1],
        })
        .collect();
    Ok(Projection {
        points,
        kl_trace,
        affinities: p,
    })
}

/// Writes `image_id,x,y` with a header row.
pub fn write_projection_csv(path: &Path, points: &[ProjectionPoint]) -> Result<(), ProjectionError> {
    let io = |e: csv::Error| ProjectionError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in points {
        w.serialize(p).map_err(io)?;
    }
    w.flush().map_err(|source| ProjectionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_projection_csv(path: &Path) -> Result<Vec<ProjectionPoint>, ProjectionError> {
    let io = |e: csv::Error| ProjectionError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_embeddings(n: usize, dim: usize, seed: u64) -> Embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Embeddings::new(dim);
        for i in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            e.push(format!("img{i}"), &row).unwrap();
        }
        e
    }

    #[test]
    fn equidistant_row_gives_uniform_conditional() {
        let row = vec![2.5; 13];
        let beta = calibrate_perplexity(&row, 12.0).unwrap();
        let (p, h) = conditional_distribution(&row, beta);
        for v in &p {
            assert!((v - 1.0 / 13.0).abs() < 1e-15);
        }
        // A uniform distribution over 13 neighbours is the only one reachable.
        assert!((h - 13f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn perplexity_must_be_below_row_length() {
        let row = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            calibrate_perplexity(&row, 3.0),
            Err(ProjectionError::InvalidPerplexity { .. })
        ));
        assert!(calibrate_perplexity(&row, 2.0).is_ok());
    }

    #[test]
    fn zero_row_is_degenerate() {
        assert!(matches!(
            calibrate_perplexity(&[0.0; 20], 5.0),
            Err(ProjectionError::DegenerateRow)
        ));
    }

    #[test]
    fn calibration_hits_target_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let row: Vec<f64> = (0..49).map(|_| rng.gen_range(0.0..100.0)).collect();
            let beta = calibrate_perplexity(&row, 12.0).unwrap();
            let (p, _) = conditional_distribution(&row, beta);
            // Entropy recomputed directly from the returned conditional.
            let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
            assert!((h - 12f64.log2()).abs() < 1e-4, "entropy {h}");
        }
    }

    #[test]
    fn affinities_are_a_symmetric_distribution() {
        let e = random_embeddings(40, 8, 1);
        let d = pairwise_sq_distances(&e);
        let p = joint_affinities(&d, 40, 5.0).unwrap();
        assert!((p.total() - 1.0).abs() < 1e-9);
        for i in 0..40 {
            assert_eq!(p.get(i, i), 0.0);
            for j in 0..40 {
                assert_eq!(p.get(i, j), p.get(j, i));
                assert!(p.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn shape_contract_and_determinism() {
        let e = random_embeddings(30, 6, 2);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 120,
            exaggeration_iterations: 50,
            momentum_switch: 50,
            seed: 9,
            ..TsneConfig::default()
        };
        let a = tsne_project(&e, &cfg).unwrap();
        let b = tsne_project(&e, &cfg).unwrap();
        assert_eq!(a.points.len(), 30);
        assert!(a.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
        assert_eq!(a.kl_trace.len(), 121);
        let bits =
            |p: &Projection| -> Vec<u64> { p.points.iter().flat_map(|q| [q.x.to_bits(), q.y.to_bits()]).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn duplicates_are_jittered_apart() {
        let mut e = random_embeddings(10, 4, 3);
        let dup = e.row(0).to_vec();
        e.push("copy", &dup).unwrap();
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 10,
            ..TsneConfig::default()
        };
        assert!(tsne_project(&e, &cfg).is_ok());
    }

    #[test]
    fn duplicates_too_large_for_jitter_fail() {
        let mut e = random_embeddings(10, 4, 3);
        e.push("big1", &[1e12; 4]).unwrap();
        e.push("big2", &[1e12; 4]).unwrap();
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 10,
            ..TsneConfig::default()
        };
        assert!(matches!(
            tsne_project(&e, &cfg),
            Err(ProjectionError::DegenerateInput(_, _))
        ));
    }

    #[test]
    fn too_few_points() {
        let e = random_embeddings(3, 2, 0);
        assert!(matches!(
            tsne_project(&e, &TsneConfig::default()),
            Err(ProjectionError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn projection_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.csv");
        let pts = vec![
            ProjectionPoint {
                image_id: "4 (286)".into(),
                x: 1.5,
                y: -2.25,
            },
            ProjectionPoint {
                image_id: "b".into(),
                x: 0.0,
                y: 3.0,
            },
        ];
        write_projection_csv(&path, &pts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_id,x,y\n"));
        assert_eq!(read_projection_csv(&path).unwrap(), pts);
    }
}
