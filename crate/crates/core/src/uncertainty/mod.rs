//! Per-image confidence scoring, lowest-average-confidence sample selection
//! and the uncertainty-weighted density heatmap.

mod heatmap;
mod selection;

use thiserror::Error;

pub use heatmap::{compute_heatmap, HeatmapGrid, DEFAULT_GRID, EXTENT_PADDING};
pub use selection::{average_confidence, rank_candidates, select_al_samples, uncertainty_weight, ImageScore};

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("confidence {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("heatmap needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("{points} points but {weights} weights")]
    LengthMismatch { points: usize, weights: usize },
    #[error("weight {0} is negative or not finite")]
    NegativeWeight(f64),
    #[error("point cloud has a singular covariance; no kernel shape can be fitted")]
    DegenerateCovariance,
    #[error("grid resolution must be at least 1x1")]
    EmptyGrid,
}
