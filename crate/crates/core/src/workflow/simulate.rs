//! Unattended runs of the loop with ground-truth labeling.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    IterationState, Phase, PickContext, Result, RetrainOutcome, SelectionPolicy, Selector, SessionConfig, WorkflowError,
};
use crate::dataset_io::{DatasetRegistry, Split};
use crate::detector::Detector;
use crate::evaluation::{trajectory_csv, TrajectoryRow};
use crate::projection::Embeddings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub strategy: String,
    /// One row per model, `M0` first.
    pub rows: Vec<TrajectoryRow>,
    pub seed_ids: Vec<String>,
    /// Ids labeled in each iteration, in pick order.
    pub selections: Vec<Vec<String>>,
    /// Labeled-set size after seeding and after each iteration.
    pub labeled_counts: Vec<usize>,
    /// Set when a backend error cut the run short.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        trajectory_csv(&self.rows)
    }

    pub fn map50(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.map50).collect()
    }
}

/// The automated lowest-average-confidence loop.
pub fn run_baseline(
    config: &SessionConfig,
    registry: &DatasetRegistry,
    embeddings: &Embeddings,
    detector: &dyn Detector,
) -> Result<Trajectory> {
    run_scripted_strategy(
        SelectionPolicy::UncertaintyBaseline,
        config,
        registry,
        embeddings,
        detector,
    )
}

/// Runs `total_iterations` rounds, labeling each pick from ground truth.
///
/// A budget of 0 trains only the seed model and repeats its scores for every
/// iteration.
pub fn run_scripted_strategy(
    policy: SelectionPolicy,
    config: &SessionConfig,
    registry: &DatasetRegistry,
    embeddings: &Embeddings,
    detector: &dyn Detector,
) -> Result<Trajectory> {
    let strategy = policy.name().to_owned();
    let pool_ids = registry.ids(Split::TrainPool);
    let pool_emb = embeddings.subset(&pool_ids)?;
    let mut selector = Selector::new(policy, &pool_emb, config.seed_clusters, config.seed)?;

    let mut state = IterationState::start(config, registry, embeddings, detector, false)?;
    let budget = config.budget_per_iteration;
    let needed = budget * config.total_iterations as usize;
    let candidates: BTreeSet<String> = state.unlabeled().into_iter().collect();
    if let Some(available) = selector.replay_capacity(&candidates) {
        if available < needed {
            return Err(WorkflowError::ReplayExhausted { needed, available });
        }
    }

    let mut out = Trajectory {
        strategy: strategy.clone(),
        rows: Vec::new(),
        seed_ids: state.seed_ids.clone(),
        selections: Vec::new(),
        labeled_counts: vec![state.labeled.len()],
        aborted: None,
    };

    if budget == 0 {
        let first = state.trajectory.first().cloned();
        for t in 1..=config.total_iterations {
            if let Some(mut row) = first.clone() {
                row.iteration = t;
                state.trajectory.push(row);
            }
            out.selections.push(Vec::new());
            out.labeled_counts.push(state.labeled.len());
        }
    }

    while budget > 0 && state.phase == Phase::Annotating {
        let candidates: BTreeSet<String> = state.unlabeled().into_iter().collect();
        let picks = selector.pick(&PickContext {
            budget,
            candidates: &candidates,
            detections: &state.pool_detections,
            labeled: &state.labeled,
            num_classes: state.num_classes(),
        })?;
        if picks.len() < budget {
            out.aborted = Some(format!(
                "pool exhausted at iteration {}: {} of {budget} picks",
                state.iteration,
                picks.len()
            ));
            break;
        }
        for id in &picks {
            let boxes = registry.labels_of(id).map(<[_]>::to_vec).unwrap_or_default();
            state.record_annotation(id, boxes)?;
        }
        let outcome = state.retrain(detector, registry, &mut |_| {})?;
        out.selections.push(picks);
        out.labeled_counts.push(state.labeled.len());
        if let RetrainOutcome::Failed(f) = outcome {
            out.aborted = Some(format!("iteration {}: {}", f.iteration, f.message));
            break;
        }
    }

    out.rows = state
        .trajectory
        .into_iter()
        .map(|mut r| {
            r.strategy = strategy.clone();
            r
        })
        .collect();
    Ok(out)
}
