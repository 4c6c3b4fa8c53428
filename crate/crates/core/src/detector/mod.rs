//! Detector backends.
//!
//! The engine never trains a network itself. It talks to a [`Detector`],
//! which is either the in-process [`SyntheticDetector`] used for simulation
//! and tests, or a [`RemoteDetector`] speaking the newline-delimited JSON
//! protocol in [`wire`].

mod synthetic;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset_io::GroundTruthBox;

pub use synthetic::{synthetic_update_skill, SkillParams, SyntheticDetector, SyntheticSkill};
pub use wire::{DetectorServer, RemoteDetector};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DetectorError {
    #[error("detector backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error("a training job is already running for this session")]
    ConcurrentTraining,
    #[error("unknown model: {0}")]
    UnknownModel(String),
    #[error("training manifest is empty")]
    EmptyManifest,
    #[error("annotation references unknown class {0}")]
    UnknownClass(u32),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// One predicted box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    #[serde(flatten)]
    pub bbox: BBox,
    pub confidence: f64,
    pub model_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            image_size: 640,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub map50: f64,
    pub map50_95: f64,
    pub box_loss: f64,
    pub class_loss: f64,
}

/// A trained model. Version 0 is trained from the pretrained base and has
/// no parent; version `t > 0` was fine-tuned from `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version: u32,
    pub parent: Option<u32>,
    /// Opaque backend handle for the weights.
    pub weights_ref: String,
    pub train_config: TrainConfig,
    /// Unix seconds.
    pub created_at: u64,
    /// Validation metrics of the epoch whose weights were kept.
    pub best_epoch: Option<EpochMetrics>,
}

/// Labeled images handed to a training job.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub annotations: BTreeMap<String, Vec<GroundTruthBox>>,
}

impl TrainManifest {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

/// The epoch with the highest validation mAP50-95; the earliest wins ties.
pub fn best_epoch(epochs: &[EpochMetrics]) -> Option<&EpochMetrics> {
    epochs.iter().fold(None, |best, e| match best {
        Some(b) if b.map50_95 >= e.map50_95 => Some(b),
        _ => Some(e),
    })
}

pub fn next_version(parent: Option<&ModelVersion>) -> u32 {
    parent.map_or(0, |p| p.version + 1)
}

pub(crate) fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub trait Detector: Send + Sync {
    /// Cheap reachability check.
    fn ping(&self) -> Result<(), DetectorError> {
        Ok(())
    }

    /// Fine-tunes from `parent` (or the pretrained base when `None`),
    /// reporting every epoch through `on_epoch`, and returns the child
    /// version built from the best validation epoch.
    fn train(
        &self,
        parent: Option<&ModelVersion>,
        manifest: &TrainManifest,
        config: &TrainConfig,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<ModelVersion, DetectorError>;

    /// Predictions for the requested images only.
    fn infer(&self, model: &ModelVersion, image_ids: &[String]) -> Result<Vec<Detection>, DetectorError>;
}

/// At most one training job per backend instance.
#[derive(Debug, Default)]
pub struct TrainingSlot(AtomicBool);

pub struct TrainingGuard<'a>(&'a AtomicBool);

impl TrainingSlot {
    pub fn acquire(&self) -> Result<TrainingGuard<'_>, DetectorError> {
        self.0
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| TrainingGuard(&self.0))
            .map_err(|_| DetectorError::ConcurrentTraining)
    }

    pub fn is_busy(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }
}

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(epoch: u32, m: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            map50: m,
            map50_95: m,
            box_loss: 1.0,
            class_loss: 1.0,
        }
    }

    #[test]
    fn best_epoch_prefers_earliest_maximum() {
        let es = [em(0, 0.1), em(1, 0.4), em(2, 0.4), em(3, 0.2)];
        assert_eq!(best_epoch(&es).unwrap().epoch, 1);
        assert!(best_epoch(&[]).is_none());
    }

    #[test]
    fn slot_is_exclusive() {
        let slot = TrainingSlot::default();
        let g = slot.acquire().unwrap();
        assert_eq!(slot.acquire().err(), Some(DetectorError::ConcurrentTraining));
        drop(g);
        assert!(slot.acquire().is_ok());
    }
}
