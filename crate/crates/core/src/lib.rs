//! Engine for human-in-the-loop active learning on object-detection data.
//!
//! The crate holds the dataset registry, the embedding projection and seeding
//! kernels, uncertainty scoring and the heatmap, detection metrics, the
//! detector protocol, the per-user iteration state machine and its SQLite
//! store. Servers and command-line tools are thin layers over it.

pub mod bbox;
pub mod dataset_io;
pub mod detector;
pub mod evaluation;
pub mod persistence;
pub mod projection;
pub mod synth;
pub mod uncertainty;
pub mod workflow;

pub use bbox::BBox;
pub use dataset_io::{DatasetError, DatasetRegistry, GroundTruthBox, ImageRecord, Split};
pub use detector::{Detection, Detector, DetectorError, EpochMetrics, ModelVersion, TrainConfig};
pub use evaluation::{EvalReport, TrajectoryRow};
pub use persistence::{EntityStore, StoreError};
pub use projection::{Embeddings, ProjectionError, ProjectionPoint};
pub use uncertainty::{HeatmapGrid, ImageScore, UncertaintyError};
pub use workflow::{IterationState, Phase, SessionConfig, WorkflowError};
