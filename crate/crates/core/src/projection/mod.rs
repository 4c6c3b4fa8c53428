//! Numeric kernels over image embeddings: k-means, diversity seeding and
//! t-SNE projection to the plane.

mod embeddings;
mod kmeans;
mod tsne;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embeddings::{Embeddings, EMBEDDING_DIM};
pub use kmeans::{kmeans_cluster, select_seed_pool, ClusterModel, MAX_LLOYD_ITERATIONS};
pub use tsne::{
    calibrate_perplexity, conditional_distribution, joint_affinities, kl_divergence, pairwise_sq_distances,
    read_projection_csv, tsne_project, write_projection_csv, AffinityMatrix, Projection, TsneConfig,
};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all distances in the row are zero")]
    DegenerateRow,
    #[error("perplexity {perplexity} must lie in [1, {limit})")]
    InvalidPerplexity { perplexity: f64, limit: usize },
    #[error("embeddings `{0}` and `{1}` coincide even after jitter")]
    DegenerateInput(String, String),
    #[error("row for `{id}` has {got} entries, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("non-finite value in embedding `{0}`")]
    NonFinite(String),
    #[error("embedding id `{0}` appears twice")]
    DuplicateId(String),
    #[error("unknown embedding id `{0}`")]
    UnknownId(String),
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One image placed in the 2D layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
