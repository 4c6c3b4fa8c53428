use std::sync::Arc;

use super::*;
use crate::bbox::BBox;
use crate::detector::{SkillParams, SyntheticDetector};
use crate::synth::{generate_world, SyntheticWorld, WorldConfig};

fn world(pool: usize, seed: u64) -> SyntheticWorld {
    generate_world(&WorldConfig {
        dim: 16,
        ..WorldConfig::sized(pool, 20, 20, seed)
    })
}

fn detector(w: &SyntheticWorld) -> SyntheticDetector {
    SyntheticDetector::from_registry(&w.registry, SkillParams::default(), 5)
}

fn quick() -> SessionConfig {
    SessionConfig {
        tsne_iterations: 60,
        heatmap_resolution: 16,
        epochs: 3,
        ..SessionConfig::default()
    }
}

fn gt(w: &SyntheticWorld, id: &str) -> Vec<GroundTruthBox> {
    w.registry.labels_of(id).unwrap().to_vec()
}

#[test]
fn config_is_flat_toml_with_defaults() {
    let c = SessionConfig::from_toml_str("budget_per_iteration = 10\nseed = 7\n").unwrap();
    assert_eq!(c.budget_per_iteration, 10);
    assert_eq!(c.seed, 7);
    assert_eq!(c.total_iterations, 5);
    assert_eq!(c.suggestions(), 10);
    let back = SessionConfig::from_toml_str(&c.to_toml_string()).unwrap();
    assert_eq!(back, c);
    assert!(SessionConfig::from_toml_str("budget = 3").is_err());
    let zero = SessionConfig {
        budget_per_iteration: 0,
        ..SessionConfig::default()
    };
    assert!(matches!(zero.validate(), Err(WorkflowError::InvalidConfig(_))));
}

#[test]
fn minimal_session_on_five_images() {
    let w = world(5, 1);
    let cfg = SessionConfig {
        budget_per_iteration: 1,
        total_iterations: 1,
        seed_clusters: 2,
        seed_per_centroid: 1,
        ..quick()
    };
    let mut s = start_session(&cfg, &w.registry, &w.embeddings, &detector(&w)).unwrap();
    assert_eq!(s.labeled.len(), 2);
    assert_eq!((s.iteration, s.phase), (1, Phase::Annotating));
    assert_eq!(s.projection.len(), 5);
    let pick = s.suggestions()[0].clone();
    s.record_annotation(&pick, gt(&w, &pick)).unwrap();
    assert_eq!(s.phase, Phase::ReadyToTrain);
    s.retrain(&detector(&w), &w.registry, &mut |_| {}).unwrap();
    assert_eq!(s.phase, Phase::Completed);
    assert_eq!(s.labeled.len(), 3);
    s.check_invariants().unwrap();
}

#[test]
fn unreachable_detector_fails_start() {
    let w = world(60, 2);
    let det = detector(&w);
    det.set_available(false);
    let r = start_session(&quick(), &w.registry, &w.embeddings, &det);
    assert!(matches!(
        r,
        Err(WorkflowError::Detector(DetectorError::BackendUnavailable(_)))
    ));
}

#[test]
fn annotation_rules() {
    let w = world(120, 3);
    let det = detector(&w);
    let mut s = start_session(&quick(), &w.registry, &w.embeddings, &det).unwrap();
    assert_eq!(s.labeled.len(), 40);
    assert_eq!(s.suggestions().len(), 30);

    let val = w.registry.ids(Split::Validation)[0].clone();
    assert!(matches!(
        s.record_annotation(&val, vec![]),
        Err(WorkflowError::NotSelectable(_))
    ));
    let seed = s.seed_ids[0].clone();
    assert!(matches!(
        s.record_annotation(&seed, vec![]),
        Err(WorkflowError::NotSelectable(_))
    ));
    let bad = vec![GroundTruthBox::new(0, BBox::new(0.95, 0.5, 0.3, 0.3))];
    let free = s.unlabeled();
    assert!(matches!(
        s.record_annotation(&free[0], bad),
        Err(WorkflowError::InvalidBoxes(_))
    ));
    assert!(matches!(
        s.record_annotation(&free[0], vec![GroundTruthBox::new(9, BBox::full())]),
        Err(WorkflowError::InvalidBoxes(_))
    ));

    for id in &free[..29] {
        s.record_annotation(id, gt(&w, id)).unwrap();
    }
    assert_eq!(s.phase, Phase::Annotating);
    assert!(matches!(s.begin_retrain(), Err(WorkflowError::PhaseViolation { .. })));
    s.record_annotation(&free[29], gt(&w, &free[29])).unwrap();
    assert_eq!(s.phase, Phase::ReadyToTrain);
    s.record_annotation(&free[0], vec![]).unwrap();
    assert_eq!(s.pending.len(), 30);
    assert!(matches!(
        s.record_annotation(&free[30], vec![]),
        Err(WorkflowError::BudgetExceeded { budget: 30 })
    ));
    assert!(s.suggestions().iter().all(|id| !s.pending.contains_key(id)));

    s.undo_annotation(&free[3]).unwrap();
    assert_eq!((s.pending.len(), s.phase), (29, Phase::Annotating));
    assert!(matches!(s.undo_annotation("nope"), Err(WorkflowError::NotPending(_))));
    s.record_annotation(&free[3], gt(&w, &free[3])).unwrap();

    s.begin_retrain().unwrap();
    assert!(matches!(
        s.undo_annotation(&free[3]),
        Err(WorkflowError::PhaseViolation { .. })
    ));
    assert!(matches!(
        s.record_annotation(&free[40], vec![]),
        Err(WorkflowError::PhaseViolation { .. })
    ));
    s.check_invariants().unwrap();
}

#[test]
fn five_default_iterations_label_190() {
    let w = world(300, 4);
    let det = detector(&w);
    let mut s = start_session(&quick(), &w.registry, &w.embeddings, &det).unwrap();
    while s.phase != Phase::Completed {
        for id in s.suggestions() {
            s.record_annotation(&id, gt(&w, &id)).unwrap();
        }
        assert!(matches!(
            s.retrain(&det, &w.registry, &mut |_| {}).unwrap(),
            RetrainOutcome::Trained(_)
        ));
        s.check_invariants().unwrap();
    }
    assert_eq!(s.labeled.len(), 190);
    assert_eq!(s.models.len(), 6);
    assert_eq!(s.trajectory.len(), 6);
    assert_eq!(s.iteration, 5);
    let per_iter: Vec<usize> = (0..=5)
        .map(|t| s.labeled.values().filter(|l| l.iteration == t).count())
        .collect();
    assert_eq!(per_iter, vec![40, 30, 30, 30, 30, 30]);
}

#[test]
fn failed_training_keeps_labels_and_model() {
    let w = world(120, 5);
    let det = detector(&w);
    let mut s = start_session(&quick(), &w.registry, &w.embeddings, &det).unwrap();
    let before = s.current_model.clone();
    for id in s.suggestions() {
        s.record_annotation(&id, gt(&w, &id)).unwrap();
    }
    det.fail_next_training();
    let out = s.retrain(&det, &w.registry, &mut |_| {}).unwrap();
    assert!(matches!(out, RetrainOutcome::Failed(_)));
    assert_eq!(s.labeled.len(), 70);
    assert_eq!(s.current_model, before);
    assert_eq!(s.faults.len(), 1);
    assert_eq!((s.iteration, s.phase), (2, Phase::Annotating));
    assert_eq!(s.suggestions().len(), 30);
    s.check_invariants().unwrap();
}

fn blobs(per_blob: usize) -> (DatasetRegistry, Embeddings) {
    let centers = [[0.0, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0]];
    let mut reg = DatasetRegistry::new(vec!["a".into()]);
    let mut emb = Embeddings::new(2);
    for (b, c) in centers.iter().enumerate() {
        for i in 0..per_blob {
            let id = format!("b{b}-{i:02}");
            let r = 0.1 * (i as f64 + 1.0);
            let a = i as f64 * 2.4;
            emb.push(id.clone(), &[c[0] + r * a.cos(), c[1] + r * a.sin()]).unwrap();
            reg.insert(crate::dataset_io::ImageRecord::new(id.clone(), Split::TrainPool))
                .unwrap();
            reg.set_labels(id, vec![GroundTruthBox::new(0, BBox::new(0.5, 0.5, 0.2, 0.2))]);
        }
    }
    for i in 0..4 {
        let id = format!("t{i}");
        emb.push(id.clone(), &[25.0, i as f64]).unwrap();
        reg.insert(crate::dataset_io::ImageRecord::new(id.clone(), Split::Test))
            .unwrap();
        reg.set_labels(id, vec![GroundTruthBox::new(0, BBox::new(0.5, 0.5, 0.2, 0.2))]);
    }
    (reg, emb)
}

#[test]
fn exploration_covers_each_blob_every_cycle() {
    let (reg, emb) = blobs(12);
    let det = SyntheticDetector::from_registry(&reg, SkillParams::default(), 1);
    let cfg = SessionConfig {
        budget_per_iteration: 4,
        total_iterations: 3,
        seed_clusters: 4,
        seed_per_centroid: 1,
        ..quick()
    };
    let t = run_scripted_strategy(SelectionPolicy::Exploration, &cfg, &reg, &emb, &det).unwrap();
    assert_eq!(t.selections.len(), 3);
    for batch in &t.selections {
        let mut blobs: Vec<&str> = batch.iter().map(|id| &id[..2]).collect();
        blobs.sort();
        assert_eq!(blobs, ["b0", "b1", "b2", "b3"]);
    }
}

#[test]
fn pass_all_filter_matches_baseline() {
    let w = world(150, 6);
    let det = detector(&w);
    let cfg = SessionConfig {
        total_iterations: 2,
        ..quick()
    };
    let a = run_baseline(&cfg, &w.registry, &w.embeddings, &det).unwrap();
    let b = run_scripted_strategy(SelectionPolicy::pass_all(), &cfg, &w.registry, &w.embeddings, &det).unwrap();
    assert_eq!(a.selections, b.selections);
    assert_eq!(a.labeled_counts, vec![40, 70, 100]);
    let reject_all: QualityFilter = Arc::new(|_, _| false);
    let c = run_scripted_strategy(
        SelectionPolicy::UncertaintyFiltered(reject_all),
        &cfg,
        &w.registry,
        &w.embeddings,
        &det,
    )
    .unwrap();
    assert!(c.aborted.is_some());
}

#[test]
fn balanced_fills_the_budget_with_distinct_ids() {
    let w = world(150, 7);
    let det = detector(&w);
    let cfg = SessionConfig {
        total_iterations: 2,
        ..quick()
    };
    let t = run_scripted_strategy(
        SelectionPolicy::Balanced {
            class_weight: SelectionPolicy::DEFAULT_CLASS_WEIGHT,
        },
        &cfg,
        &w.registry,
        &w.embeddings,
        &det,
    )
    .unwrap();
    assert!(t.aborted.is_none());
    let all: BTreeSet<&String> = t.selections.iter().flatten().collect();
    assert_eq!(all.len(), 60);
}

#[test]
fn short_replay_list_is_rejected() {
    let w = world(100, 8);
    let det = detector(&w);
    let ids: Vec<String> = w.registry.ids(Split::TrainPool).into_iter().take(20).collect();
    let r = run_scripted_strategy(SelectionPolicy::Replay(ids), &quick(), &w.registry, &w.embeddings, &det);
    assert!(matches!(r, Err(WorkflowError::ReplayExhausted { needed: 150, .. })));
}

#[test]
fn zero_budget_repeats_the_seed_model() {
    let w = world(80, 9);
    let det = detector(&w);
    let cfg = SessionConfig {
        budget_per_iteration: 0,
        ..quick()
    };
    let t = run_baseline(&cfg, &w.registry, &w.embeddings, &det).unwrap();
    assert_eq!(t.rows.len(), 6);
    assert!(t.rows.windows(2).all(|p| p[0].map50_95 == p[1].map50_95));
    assert_eq!(t.labeled_counts, vec![40; 6]);
}

#[test]
fn simulation_is_reproducible() {
    let w = world(150, 10);
    let cfg = SessionConfig {
        total_iterations: 2,
        ..quick()
    };
    let a = run_baseline(&cfg, &w.registry, &w.embeddings, &detector(&w)).unwrap();
    let b = run_baseline(&cfg, &w.registry, &w.embeddings, &detector(&w)).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.selections, b.selections);
}
