//! Generated datasets for simulation runs and tests.
//!
//! Images are named `"<class number> (<n>)"`, class numbers starting at 1,
//! which is the naming used by the wildlife image folders the tool was
//! first used on. Published selection lists can therefore be replayed
//! against a generated world.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::dataset_io::{DatasetRegistry, GroundTruthBox, ImageRecord, Split};
use crate::projection::Embeddings;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub pool: usize,
    pub validation: usize,
    pub test: usize,
    pub classes: Vec<String>,
    pub dim: usize,
    /// Visual modes per class, e.g. poses or backgrounds.
    pub subclusters: usize,
    pub separation: f64,
    pub subcluster_spread: f64,
    pub noise: f64,
    pub max_instances: usize,
    pub extra_object_prob: f64,
    /// Ids that must land in the training pool.
    pub force_pool: Vec<String>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            pool: 1052,
            validation: 225,
            test: 227,
            classes: ["buffalo", "elephant", "rhino", "zebra"].map(String::from).to_vec(),
            dim: crate::projection::EMBEDDING_DIM,
            subclusters: 5,
            separation: 4.0,
            subcluster_spread: 2.0,
            noise: 1.0,
            max_instances: 3,
            extra_object_prob: 0.2,
            force_pool: Vec::new(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn sized(pool: usize, validation: usize, test: usize, seed: u64) -> Self {
        Self {
            pool,
            validation,
            test,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub registry: DatasetRegistry,
    /// One row per image of every split, pool first.
    pub embeddings: Embeddings,
}

impl SyntheticWorld {
    /// Rows for the training pool only, in registry order.
    pub fn pool_embeddings(&self) -> Embeddings {
        let ids = self.registry.ids(Split::TrainPool);
        self.embeddings
            .subset(&ids)
            .expect("every generated image has an embedding")
    }
}

/// Dominant class index encoded in a generated id.
pub fn class_of_id(id: &str) -> Option<usize> {
    let (head, _) = id.split_once(' ')?;
    head.parse::<usize>().ok()?.checked_sub(1)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.12..0.5);
    let h = rng.gen_range(0.12..0.5);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    BBox::new(cx, cy, w, h)
}

pub fn generate_world(cfg: &WorldConfig) -> SyntheticWorld {
    let n_classes = cfg.classes.len().max(1);
    let total = cfg.pool + cfg.validation + cfg.test;
    let per_class = total.div_ceil(n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut ids: Vec<String> = (0..n_classes)
        .flat_map(|c| (1..=per_class).map(move |n| format!("{} ({n})", c + 1)))
        .collect();
    ids.shuffle(&mut rng);
    let forced: BTreeSet<&str> = cfg.force_pool.iter().map(String::as_str).collect();
    ids.retain(|id| !forced.contains(id.as_str()));
    let mut order: Vec<String> = cfg.force_pool.clone();
    order.extend(ids);
    order.truncate(total);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let class_centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..cfg.dim).map(|_| cfg.separation * normal.sample(&mut rng)).collect())
        .collect();
    let sub_centers: Vec<Vec<Vec<f64>>> = (0..n_classes)
        .map(|_| {
            (0..cfg.subclusters.max(1))
                .map(|_| {
                    (0..cfg.dim)
                        .map(|_| cfg.subcluster_spread * normal.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut registry = DatasetRegistry::new(cfg.classes.clone());
    let mut rows = Vec::with_capacity(total);
    for (i, id) in order.iter().enumerate() {
        let split = if i < cfg.pool {
            Split::TrainPool
        } else if i < cfg.pool + cfg.validation {
            Split::Validation
        } else {
            Split::Test
        };
        let (w, h) = *[(640, 480), (800, 600), (1024, 683), (500, 375)]
            .choose(&mut rng)
            .expect("non-empty");
        registry
            .insert(ImageRecord::new(id.clone(), split).with_dims(w, h))
            .expect("generated ids are unique");

        let c = class_of_id(id).filter(|c| *c < n_classes).unwrap_or(0);
        let instances = rng.gen_range(1..=cfg.max_instances.max(1));
        let mut boxes: Vec<GroundTruthBox> = (0..instances)
            .map(|_| GroundTruthBox::new(c as u32, random_box(&mut rng)))
            .collect();
        let extra = (n_classes > 1 && rng.gen_bool(cfg.extra_object_prob))
            .then(|| (c + rng.gen_range(1..n_classes)) % n_classes);
        if let Some(e) = extra {
            boxes.push(GroundTruthBox::new(e as u32, random_box(&mut rng)));
        }
        registry.set_labels(id.clone(), boxes);

        let sub = rng.gen_range(0..cfg.subclusters.max(1));
        let row: Vec<f64> = (0..cfg.dim)
            .map(|d| {
                let mut v = class_centers[c][d] + sub_centers[c][sub][d] + cfg.noise * normal.sample(&mut rng);
                if let Some(e) = extra {
                    v += 0.3 * class_centers[e][d];
                }
                v
            })
            .collect();
        rows.push((id.clone(), row));
    }

    let embeddings = Embeddings::from_rows(cfg.dim, rows).expect("generated rows are finite");
    SyntheticWorld { registry, embeddings }
}
