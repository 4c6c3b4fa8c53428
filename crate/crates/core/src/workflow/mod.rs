//! The annotate → retrain → re-infer loop.
//!
//! [`IterationState`] is the single source of truth for one user's session.
//! Every operation either applies fully or returns an error with the state
//! untouched. Training itself is split into [`IterationState::begin_retrain`]
//! and [`IterationState::complete_retrain`] so a caller can run the detector
//! job off the session lock; [`IterationState::retrain`] chains both.

mod policy;
mod simulate;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{DatasetRegistry, GroundTruthBox, LabelStatus, Split};
use crate::detector::{Detection, Detector, DetectorError, EpochMetrics, ModelVersion, TrainConfig, TrainManifest};
use crate::evaluation::{map_metrics, EvalError, TrajectoryRow};
use crate::projection::{select_seed_pool, tsne_project, Embeddings, ProjectionError, ProjectionPoint, TsneConfig};
use crate::uncertainty::{
    average_confidence, compute_heatmap, select_al_samples, uncertainty_weight, HeatmapGrid, ImageScore,
    UncertaintyError,
};

pub use policy::{ClusterIndex, PickContext, QualityFilter, SelectionPolicy, Selector};
pub use simulate::{run_baseline, run_scripted_strategy, Trajectory};

/// Strategy label used for trajectory rows of interactive sessions.
pub const SESSION_STRATEGY: &str = "session";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("operation not allowed in phase {actual:?} (needs {expected})")]
    PhaseViolation { expected: &'static str, actual: Phase },
    #[error("labeling budget of {budget} images already used this iteration")]
    BudgetExceeded { budget: usize },
    #[error("image {0} cannot be annotated (not an unlabeled pool image)")]
    NotSelectable(String),
    #[error("image {0} has no pending annotation")]
    NotPending(String),
    #[error("invalid boxes: {0}")]
    InvalidBoxes(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("replay list has {available} usable ids but the run needs {needed}")]
    ReplayExhausted { needed: usize, available: usize },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

/// Session parameters. Serialized as a flat TOML table; missing keys take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub budget_per_iteration: usize,
    pub total_iterations: u32,
    /// Suggestions shown per model version; `None` means the budget.
    pub suggestion_count: Option<usize>,
    pub seed: u64,
    pub seed_clusters: usize,
    pub seed_per_centroid: usize,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub heatmap_resolution: usize,
    pub epochs: u32,
    pub image_size: u32,
    pub train_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            budget_per_iteration: 30,
            total_iterations: 5,
            suggestion_count: None,
            seed: 0,
            seed_clusters: 20,
            seed_per_centroid: 2,
            perplexity: 12.0,
            tsne_iterations: 1000,
            heatmap_resolution: crate::uncertainty::DEFAULT_GRID,
            epochs: 50,
            image_size: 640,
            train_seed: 42,
        }
    }
}

impl SessionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WorkflowError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorkflowError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn suggestions(&self) -> usize {
        self.suggestion_count.unwrap_or(self.budget_per_iteration)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            image_size: self.image_size,
            seed: self.train_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_per_iteration == 0 {
            return Err(WorkflowError::InvalidConfig(
                "budget_per_iteration must be at least 1".into(),
            ));
        }
        self.validate_loop()
    }

    /// Checks everything except the budget, which simulations may set to 0.
    fn validate_loop(&self) -> Result<()> {
        let bad = |m: &str| Err(WorkflowError::InvalidConfig(m.into()));
        if self.total_iterations == 0 {
            return bad("total_iterations must be at least 1");
        }
        if self.seed_clusters == 0 || self.seed_per_centroid == 0 {
            return bad("seed_clusters and seed_per_centroid must be at least 1");
        }
        if !(self.perplexity.is_finite() && self.perplexity >= 1.0) {
            return bad("perplexity must be at least 1");
        }
        if self.heatmap_resolution == 0 {
            return bad("heatmap_resolution must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Annotating,
    ReadyToTrain,
    Training,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    /// 0 for the seed pool.
    pub iteration: u32,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub iteration: u32,
    pub message: String,
}

/// Work order for one training job.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainJob {
    pub iteration: u32,
    pub parent: ModelVersion,
    pub manifest: TrainManifest,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrainOutcome {
    Trained(ModelVersion),
    /// Labels were kept and the previous model stays current.
    Failed(Fault),
}

/// Everything derived from one model version.
struct Refresh {
    pool_detections: BTreeMap<String, Vec<Detection>>,
    suggestions: Vec<ImageScore>,
    heatmap: Option<HeatmapGrid>,
    row: Option<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub config: SessionConfig,
    pub classes: Vec<String>,
    pub pool: BTreeSet<String>,
    /// Current labeling round, starting at 1; equals `total_iterations`
    /// once completed.
    pub iteration: u32,
    pub phase: Phase,
    pub seed_ids: Vec<String>,
    pub labeled: BTreeMap<String, LabeledImage>,
    pub pending: BTreeMap<String, Vec<GroundTruthBox>>,
    pub current_model: ModelVersion,
    pub models: Vec<ModelVersion>,
    /// Uncertainty ranking computed when the current model arrived.
    pub model_suggestions: Vec<ImageScore>,
    pub pool_detections: BTreeMap<String, Vec<Detection>>,
    pub projection: Vec<ProjectionPoint>,
    pub heatmap: Option<HeatmapGrid>,
    pub trajectory: Vec<TrajectoryRow>,
    pub faults: Vec<Fault>,
}

/// Seeds the pool, trains the first model, and opens iteration 1.
pub fn start_session(
    config: &SessionConfig,
    registry: &DatasetRegistry,
    embeddings: &Embeddings,
    detector: &dyn Detector,
) -> Result<IterationState> {
    config.validate()?;
    IterationState::start(config, registry, embeddings, detector, true)
}

fn box_problem(b: &GroundTruthBox, num_classes: usize) -> Option<String> {
    const EPS: f64 = 1e-9;
    if b.class_id as usize >= num_classes {
        return Some(format!("class {} out of range", b.class_id));
    }
    if !b.bbox.is_finite() || b.bbox.w <= 0.0 || b.bbox.h <= 0.0 {
        return Some(format!("degenerate box {:?}", b.bbox.as_array()));
    }
    let [x0, y0, x1, y1] = b.bbox.to_xyxy();
    if x0 < -EPS || y0 < -EPS || x1 > 1.0 + EPS || y1 > 1.0 + EPS {
        return Some(format!("box {:?} leaves the image", b.bbox.as_array()));
    }
    None
}

impl IterationState {
    pub(crate) fn start(
        config: &SessionConfig,
        registry: &DatasetRegistry,
        embeddings: &Embeddings,
        detector: &dyn Detector,
        project: bool,
    ) -> Result<Self> {
        config.validate_loop()?;
        detector.ping()?;
        let pool_ids = registry.ids(Split::TrainPool);
        let pool_emb = embeddings.subset(&pool_ids)?;
        let seed_ids = select_seed_pool(&pool_emb, config.seed_clusters, config.seed_per_centroid, config.seed)?;
        let labeled: BTreeMap<String, LabeledImage> = seed_ids
            .iter()
            .map(|id| {
                let boxes = registry.labels_of(id).map(<[_]>::to_vec).unwrap_or_default();
                (id.clone(), LabeledImage { iteration: 0, boxes })
            })
            .collect();

        let projection = if project {
            project_pool(&pool_emb, config)?
        } else {
            Vec::new()
        };

        let manifest = manifest_of(&labeled);
        let model = detector.train(None, &manifest, &config.train_config(), &mut |_| {})?;

        let mut state = Self {
            config: config.clone(),
            classes: registry.classes.clone(),
            pool: pool_ids.into_iter().collect(),
            iteration: 1,
            phase: Phase::Annotating,
            seed_ids,
            labeled,
            pending: BTreeMap::new(),
            current_model: model.clone(),
            models: vec![model.clone()],
            model_suggestions: Vec::new(),
            pool_detections: BTreeMap::new(),
            projection,
            heatmap: None,
            trajectory: Vec::new(),
            faults: Vec::new(),
        };
        let fresh = state.refresh(&model, detector, registry, 0)?;
        state.apply_refresh(fresh);
        Ok(state)
    }

    pub fn budget(&self) -> usize {
        self.config.budget_per_iteration
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Current suggestions: the model's ranking minus anything labeled or
    /// pending.
    pub fn suggestions(&self) -> Vec<String> {
        self.model_suggestions
            .iter()
            .map(|s| &s.image_id)
            .filter(|id| !self.labeled.contains_key(*id) && !self.pending.contains_key(*id))
            .cloned()
            .collect()
    }

    pub fn status_of(&self, image_id: &str) -> LabelStatus {
        match self.labeled.get(image_id) {
            Some(l) if l.iteration == 0 => LabelStatus::Seed,
            Some(l) => LabelStatus::Labeled { iteration: l.iteration },
            None => LabelStatus::Unlabeled,
        }
    }

    /// Unlabeled pool ids, in order.
    pub fn unlabeled(&self) -> Vec<String> {
        self.pool
            .iter()
            .filter(|id| !self.labeled.contains_key(*id))
            .cloned()
            .collect()
    }

    fn require(&self, ok: bool, expected: &'static str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(WorkflowError::PhaseViolation {
                expected,
                actual: self.phase,
            })
        }
    }

    /// Stores the boxes for a pool image. Re-annotating a pending image
    /// replaces its boxes without using more budget.
    pub fn record_annotation(&mut self, image_id: &str, boxes: Vec<GroundTruthBox>) -> Result<()> {
        self.require(
            matches!(self.phase, Phase::Annotating | Phase::ReadyToTrain),
            "annotating",
        )?;
        if let Some(problem) = boxes.iter().find_map(|b| box_problem(b, self.num_classes())) {
            return Err(WorkflowError::InvalidBoxes(problem));
        }
        if !self.pool.contains(image_id) || self.labeled.contains_key(image_id) {
            return Err(WorkflowError::NotSelectable(image_id.to_owned()));
        }
        let overwrite = self.pending.contains_key(image_id);
        if !overwrite && self.pending.len() >= self.budget() {
            return Err(WorkflowError::BudgetExceeded { budget: self.budget() });
        }
        self.pending.insert(image_id.to_owned(), boxes);
        if self.pending.len() == self.budget() {
            self.phase = Phase::ReadyToTrain;
        }
        Ok(())
    }

    /// Returns a pending image to the pool, discarding its boxes.
    pub fn undo_annotation(&mut self, image_id: &str) -> Result<Vec<GroundTruthBox>> {
        self.require(
            matches!(self.phase, Phase::Annotating | Phase::ReadyToTrain),
            "annotating or ready_to_train",
        )?;
        let boxes = self
            .pending
            .remove(image_id)
            .ok_or_else(|| WorkflowError::NotPending(image_id.to_owned()))?;
        self.phase = Phase::Annotating;
        Ok(boxes)
    }

    /// Merges the pending batch into the labeled set and hands back the
    /// training job to run.
    pub fn begin_retrain(&mut self) -> Result<RetrainJob> {
        self.require(self.phase == Phase::ReadyToTrain, "ready_to_train")?;
        let iteration = self.iteration;
        for (id, boxes) in std::mem::take(&mut self.pending) {
            self.labeled.insert(id, LabeledImage { iteration, boxes });
        }
        self.phase = Phase::Training;
        Ok(RetrainJob {
            iteration,
            parent: self.current_model.clone(),
            manifest: manifest_of(&self.labeled),
            config: self.config.train_config(),
        })
    }

    /// Installs the result of a training job. Any failure, in training or in
    /// the follow-up inference, keeps the labels, keeps the previous model
    /// and records a fault.
    pub fn complete_retrain(
        &mut self,
        trained: Result<ModelVersion, DetectorError>,
        detector: &dyn Detector,
        registry: &DatasetRegistry,
    ) -> Result<RetrainOutcome> {
        self.require(self.phase == Phase::Training, "training")?;
        let done = self.iteration;
        let refreshed = trained
            .map_err(WorkflowError::from)
            .and_then(|m| self.refresh(&m, detector, registry, done).map(|r| (m, r)));
        let outcome = match refreshed {
            Ok((model, fresh)) => {
                self.current_model = model.clone();
                self.models.push(model.clone());
                self.apply_refresh(fresh);
                RetrainOutcome::Trained(model)
            }
            Err(e) => {
                let fault = Fault {
                    iteration: done,
                    message: e.to_string(),
                };
                log::warn!("retrain for iteration {done} failed: {}", fault.message);
                self.faults.push(fault.clone());
                // The stale ranking may name images that were just labeled.
                self.model_suggestions = self.rank_from_detections()?;
                RetrainOutcome::Failed(fault)
            }
        };
        if done >= self.config.total_iterations {
            self.phase = Phase::Completed;
        } else {
            self.iteration = done + 1;
            self.phase = Phase::Annotating;
        }
        Ok(outcome)
    }

    /// Runs a whole training round in the calling thread.
    pub fn retrain(
        &mut self,
        detector: &dyn Detector,
        registry: &DatasetRegistry,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<RetrainOutcome> {
        let job = self.begin_retrain()?;
        let trained = detector.train(Some(&job.parent), &job.manifest, &job.config, on_epoch);
        self.complete_retrain(trained, detector, registry)
    }

    fn conf_map(&self, detections: &BTreeMap<String, Vec<Detection>>) -> BTreeMap<String, Vec<f64>> {
        self.pool
            .iter()
            .filter(|id| !self.labeled.contains_key(*id))
            .map(|id| {
                let confs = detections
                    .get(id)
                    .map(|ds| ds.iter().map(|d| d.confidence).collect())
                    .unwrap_or_default();
                (id.clone(), confs)
            })
            .collect()
    }

    fn rank_from_detections(&self) -> Result<Vec<ImageScore>> {
        let confs = self.conf_map(&self.pool_detections);
        Ok(select_al_samples(&confs, &BTreeSet::new(), self.config.suggestions())?)
    }

    fn refresh(
        &self,
        model: &ModelVersion,
        detector: &dyn Detector,
        registry: &DatasetRegistry,
        iteration: u32,
    ) -> Result<Refresh> {
        let pool_ids: Vec<String> = self.pool.iter().cloned().collect();
        let mut pool_detections: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        for d in detector.infer(model, &pool_ids)? {
            if self.pool.contains(&d.image_id) {
                pool_detections.entry(d.image_id.clone()).or_default().push(d);
            }
        }
        let confs = self.conf_map(&pool_detections);
        let suggestions = select_al_samples(&confs, &BTreeSet::new(), self.config.suggestions())?;
        let heatmap = self.heatmap_for(&pool_detections)?;

        let test = registry.ground_truth(Split::Test);
        let row = if test.is_empty() {
            None
        } else {
            let ids: Vec<String> = test.keys().cloned().collect();
            let dets = detector.infer(model, &ids)?;
            let report = map_metrics(&dets, &test)?;
            Some(TrajectoryRow::new(SESSION_STRATEGY, iteration, &report))
        };
        Ok(Refresh {
            pool_detections,
            suggestions,
            heatmap,
            row,
        })
    }

    fn heatmap_for(&self, detections: &BTreeMap<String, Vec<Detection>>) -> Result<Option<HeatmapGrid>> {
        if self.projection.len() < 2 {
            return Ok(None);
        }
        let mut coords = Vec::with_capacity(self.projection.len());
        let mut weights = Vec::with_capacity(self.projection.len());
        for p in &self.projection {
            let confs: Vec<f64> = detections
                .get(&p.image_id)
                .map(|ds| ds.iter().map(|d| d.confidence).collect())
                .unwrap_or_default();
            coords.push([p.x, p.y]);
            weights.push(uncertainty_weight(average_confidence(&confs)?)?);
        }
        let res = self.config.heatmap_resolution;
        match compute_heatmap(&coords, &weights, res, res) {
            Ok(g) => Ok(Some(g)),
            Err(e) => {
                log::warn!("heatmap skipped: {e}");
                Ok(None)
            }
        }
    }

    fn apply_refresh(&mut self, fresh: Refresh) {
        self.pool_detections = fresh.pool_detections;
        self.model_suggestions = fresh.suggestions;
        self.heatmap = fresh.heatmap;
        if let Some(row) = fresh.row {
            self.trajectory.push(row);
        }
    }

    /// Checks the structural invariants; returns the first one broken.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.pending.len() > self.budget() {
            return Err(format!("{} pending over budget {}", self.pending.len(), self.budget()));
        }
        if let Some(id) = self.pending.keys().find(|id| self.labeled.contains_key(*id)) {
            return Err(format!("{id} both pending and labeled"));
        }
        if let Some(id) = self.labeled.keys().find(|id| !self.pool.contains(*id)) {
            return Err(format!("{id} labeled but not in the pool"));
        }
        let full = self.pending.len() == self.budget();
        match self.phase {
            Phase::ReadyToTrain if !full => return Err("ready_to_train without a full batch".into()),
            Phase::Annotating if full => return Err("annotating with a full batch".into()),
            Phase::Training | Phase::Completed if !self.pending.is_empty() => {
                return Err("pending images outside annotation phases".into())
            }
            _ => {}
        }
        if let Some(id) = self.suggestions().iter().find(|id| self.labeled.contains_key(*id)) {
            return Err(format!("suggested {id} is labeled"));
        }
        for (i, m) in self.models.iter().enumerate() {
            let expect_parent = (i > 0).then(|| self.models[i - 1].version);
            if m.version as usize != i || m.parent != expect_parent {
                return Err(format!("model lineage broken at {i}"));
            }
        }
        Ok(())
    }
}

fn manifest_of(labeled: &BTreeMap<String, LabeledImage>) -> TrainManifest {
    TrainManifest {
        annotations: labeled.iter().map(|(id, l)| (id.clone(), l.boxes.clone())).collect(),
    }
}

/// Pool projection. Very small pools get a reduced perplexity; pools under
/// four images are not projected.
fn project_pool(pool: &Embeddings, config: &SessionConfig) -> Result<Vec<ProjectionPoint>> {
    let n = pool.len();
    if n < 4 {
        log::warn!("pool of {n} images is too small to project");
        return Ok(Vec::new());
    }
    let limit = ((n - 1) as f64 / 3.0).max(1.0);
    let perplexity = if config.perplexity > limit {
        log::warn!("perplexity {} reduced to {limit} for {n} images", config.perplexity);
        limit
    } else {
        config.perplexity
    };
    let cfg = TsneConfig {
        perplexity,
        iterations: config.tsne_iterations,
        seed: config.seed,
        ..TsneConfig::default()
    };
    Ok(tsne_project(pool, &cfg)?.points)
}

#[cfg(test)]
mod tests;
