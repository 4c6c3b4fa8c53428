//! JSON payloads. Boxes travel as `[cx, cy, w, h]` in normalized units.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use vilod_core::evaluation::{class_balance, confidence_distribution, ClassBalance, ConfidenceDistribution};
use vilod_core::workflow::SESSION_STRATEGY;
use vilod_core::{BBox, Detection, GroundTruthBox, ImageScore, IterationState, Phase, TrajectoryRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub class: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl From<&GroundTruthBox> for WireBox {
    fn from(g: &GroundTruthBox) -> Self {
        Self {
            class: g.class_id,
            bbox: g.bbox.as_array(),
        }
    }
}

impl From<&WireBox> for GroundTruthBox {
    fn from(w: &WireBox) -> Self {
        let [cx, cy, bw, bh] = w.bbox;
        GroundTruthBox::new(w.class, BBox::new(cx, cy, bw, bh))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBody {
    pub boxes: Vec<WireBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
}

impl From<&Detection> for WireDetection {
    fn from(d: &Detection) -> Self {
        Self {
            class: d.class_id,
            bbox: d.bbox.as_array(),
            conf: d.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub image_id: String,
    pub model_version: u32,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotated: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReply {
    pub image_id: String,
    pub iteration: u32,
    pub phase: Phase,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReply {
    pub job_id: u64,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PointStatus {
    Unlabeled,
    Suggested,
    Labeled {
        /// Most frequent class among the image's boxes, ties to the lowest
        /// id; absent for an image annotated as empty.
        majority_class: Option<u32>,
        /// Annotated this iteration but not yet used for training.
        pending: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPayload {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    #[serde(flatten)]
    pub status: PointStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRef {
    pub href: String,
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelView {
    pub version: u32,
    pub parent: Option<u32>,
    pub weights_ref: String,
    pub best_map50: Option<f64>,
    pub best_map50_95: Option<f64>,
    pub confidence: ConfidenceDistribution,
    pub class_balance: ClassBalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub session: Vec<TrajectoryRow>,
    pub baseline: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub iteration: u32,
    pub total_iterations: u32,
    pub phase: Phase,
    pub progress: Progress,
    pub classes: Vec<String>,
    pub points: Vec<PointPayload>,
    pub heatmap: Option<HeatmapRef>,
    pub suggestions: Vec<ImageScore>,
    pub model: ModelView,
    pub trajectories: Trajectories,
    pub faults: Vec<String>,
}

pub fn majority_class(boxes: &[GroundTruthBox]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for b in boxes {
        *counts.entry(b.class_id).or_default() += 1;
    }
    // max_by_key keeps the last maximum; iterate high to low so that is the
    // lowest class id.
    counts.into_iter().rev().max_by_key(|&(_, n)| n).map(|(c, _)| c)
}

pub fn progress(s: &IterationState) -> Progress {
    Progress {
        annotated: s.pending.len(),
        budget: s.budget(),
    }
}

/// Suggestions still open, with their scores.
pub fn open_suggestions(s: &IterationState) -> Vec<ImageScore> {
    let open: BTreeSet<String> = s.suggestions().into_iter().collect();
    s.model_suggestions
        .iter()
        .filter(|x| open.contains(&x.image_id))
        .cloned()
        .collect()
}

pub fn points(s: &IterationState) -> Vec<PointPayload> {
    let suggested: BTreeSet<String> = s.suggestions().into_iter().collect();
    s.projection
        .iter()
        .map(|p| {
            let status = if let Some(l) = s.labeled.get(&p.image_id) {
                PointStatus::Labeled {
                    majority_class: majority_class(&l.boxes),
                    pending: false,
                }
            } else if let Some(boxes) = s.pending.get(&p.image_id) {
                PointStatus::Labeled {
                    majority_class: majority_class(boxes),
                    pending: true,
                }
            } else if suggested.contains(&p.image_id) {
                PointStatus::Suggested
            } else {
                PointStatus::Unlabeled
            };
            PointPayload {
                image_id: p.image_id.clone(),
                x: p.x,
                y: p.y,
                status,
            }
        })
        .collect()
}

pub fn model_view(s: &IterationState) -> ModelView {
    let m = &s.current_model;
    let dets: Vec<Detection> = s.pool_detections.values().flatten().cloned().collect();
    let newest = s.labeled.values().map(|l| l.iteration).max().unwrap_or(0);
    let instances = s
        .labeled
        .values()
        .flat_map(|l| l.boxes.iter().map(move |b| (b.class_id, l.iteration)));
    ModelView {
        version: m.version,
        parent: m.parent,
        weights_ref: m.weights_ref.clone(),
        best_map50: m.best_epoch.as_ref().map(|e| e.map50),
        best_map50_95: m.best_epoch.as_ref().map(|e| e.map50_95),
        confidence: confidence_distribution(&dets, s.num_classes()),
        class_balance: class_balance(instances, newest, s.num_classes()),
    }
}

pub fn trajectories(s: &IterationState, baseline: &[TrajectoryRow]) -> Trajectories {
    Trajectories {
        session: s
            .trajectory
            .iter()
            .filter(|r| r.strategy == SESSION_STRATEGY)
            .cloned()
            .collect(),
        baseline: baseline.to_vec(),
    }
}

pub fn state_payload(s: &IterationState, baseline: &[TrajectoryRow]) -> StatePayload {
    StatePayload {
        iteration: s.iteration,
        total_iterations: s.config.total_iterations,
        phase: s.phase,
        progress: progress(s),
        classes: s.classes.clone(),
        points: points(s),
        heatmap: s.heatmap.as_ref().map(|h| HeatmapRef {
            href: "/heatmap".into(),
            nx: h.nx,
            ny: h.ny,
            x_min: h.x_min,
            x_max: h.x_max,
            y_min: h.y_min,
            y_max: h.y_max,
        }),
        suggestions: open_suggestions(s),
        model: model_view(s),
        trajectories: trajectories(s, baseline),
        faults: s
            .faults
            .iter()
            .map(|f| format!("iteration {}: {}", f.iteration, f.message))
            .collect(),
    }
}
