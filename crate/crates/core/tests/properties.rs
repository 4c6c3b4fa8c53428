use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vilod_core::dataset_io::{parse_yolo_label, serialize_yolo_label};
use vilod_core::detector::wire::{decode_reply, encode_line, EpochLine, InferLine, Reply, WireDetection};
use vilod_core::detector::{SkillParams, SyntheticDetector};
use vilod_core::evaluation::{iou, map_metrics};
use vilod_core::persistence::EntityStore;
use vilod_core::synth::{generate_world, WorldConfig};
use vilod_core::uncertainty::{rank_candidates, select_al_samples, uncertainty_weight};
use vilod_core::workflow::{start_session, Phase, SessionConfig, WorkflowError};
use vilod_core::{BBox, Detection, EpochMetrics, GroundTruthBox};

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.01f64..0.9, 0.01f64..0.9).prop_flat_map(|(w, h)| {
        (w / 2.0..=1.0 - w / 2.0, h / 2.0..=1.0 - h / 2.0).prop_map(move |(cx, cy)| BBox::new(cx, cy, w, h))
    })
}

fn gt_boxes(max: usize) -> impl Strategy<Value = Vec<GroundTruthBox>> {
    prop::collection::vec(
        (0u32..4, unit_box()).prop_map(|(c, b)| GroundTruthBox::new(c, b)),
        0..max,
    )
}

fn conf_map() -> impl Strategy<Value = BTreeMap<String, Vec<f64>>> {
    prop::collection::btree_map("[a-e][0-9]{1,2}", prop::collection::vec(0.0f64..=1.0, 0..5), 0..40)
}

proptest! {
    #[test]
    fn yolo_text_round_trips(boxes in gt_boxes(12)) {
        let text = serialize_yolo_label(&boxes);
        let parsed = parse_yolo_label(&text).unwrap();
        prop_assert_eq!(parsed.len(), boxes.len());
        for (a, b) in parsed.iter().zip(&boxes) {
            prop_assert_eq!(a.class_id, b.class_id);
            for (x, y) in a.bbox.as_array().iter().zip(b.bbox.as_array()) {
                prop_assert!((x - y).abs() <= 5e-7);
            }
        }
        prop_assert_eq!(serialize_yolo_label(&parsed), text);
    }

    #[test]
    fn selection_is_a_sorted_prefix(map in conf_map(), budget in 0usize..50, drop in prop::collection::vec(any::<bool>(), 40)) {
        let exclude: BTreeSet<String> = map.keys().zip(&drop).filter(|(_, d)| **d).map(|(k, _)| k.clone()).collect();
        let picked = select_al_samples(&map, &exclude, budget).unwrap();
        let mut oracle: Vec<(f64, &String)> = map
            .iter()
            .filter(|(k, _)| !exclude.contains(*k))
            .map(|(k, v)| (if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }, k))
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        oracle.truncate(budget);
        let got: Vec<&String> = picked.iter().map(|s| &s.image_id).collect();
        let want: Vec<&String> = oracle.iter().map(|(_, k)| *k).collect();
        prop_assert_eq!(got, want);
        prop_assert!(picked.iter().all(|s| !exclude.contains(&s.image_id)));
    }

    #[test]
    fn excluding_more_never_readmits(map in conf_map(), budget in 1usize..30, cut in 0usize..40) {
        let ids: Vec<String> = map.keys().cloned().collect();
        let small: BTreeSet<String> = ids.iter().take(cut / 2).cloned().collect();
        let big: BTreeSet<String> = ids.iter().take(cut).cloned().collect();
        let a = select_al_samples(&map, &small, budget).unwrap();
        let b = select_al_samples(&map, &big, budget).unwrap();
        prop_assert!(b.iter().all(|s| !big.contains(&s.image_id)));
        // The ranking of survivors is unchanged by extra exclusions.
        let ra: Vec<String> = rank_candidates(&map, &small).unwrap().into_iter().map(|s| s.image_id).filter(|i| !big.contains(i)).collect();
        let rb: Vec<String> = rank_candidates(&map, &big).unwrap().into_iter().map(|s| s.image_id).collect();
        prop_assert_eq!(ra, rb);
        prop_assert!(a.len() >= b.len().min(a.len()));
    }

    #[test]
    fn weight_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(uncertainty_weight(lo).unwrap() >= uncertainty_weight(hi).unwrap());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let ab = iou(&a, &b).unwrap();
        let ba = iou(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(gts in gt_boxes(6), dets in prop::collection::vec((0u32..4, unit_box(), 0.0f64..=1.0), 0..8)) {
        let truth: BTreeMap<String, Vec<GroundTruthBox>> = [("img".to_owned(), gts)].into();
        let dets: Vec<Detection> = dets
            .into_iter()
            .map(|(c, b, p)| Detection { image_id: "img".into(), class_id: c, bbox: b, confidence: p, model_version: 0 })
            .collect();
        let r = map_metrics(&dets, &truth).unwrap();
        for v in [r.map50, r.map75, r.map50_95, r.precision, r.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.map50 + 1e-12 >= r.map75);
    }

    #[test]
    fn wire_messages_round_trip(
        class in 0u32..80, b in unit_box(), conf in 0.0f64..=1.0,
        epoch in 1u32..500, m50 in 0.0f64..=1.0, m5095 in 0.0f64..=1.0, bl in 0.0f64..10.0, cl in 0.0f64..10.0,
    ) {
        let d = Detection { image_id: "x (1)".into(), class_id: class, bbox: b, confidence: conf, model_version: 3 };
        let line = InferLine { image_id: d.image_id.clone(), detections: vec![WireDetection::from(&d)] };
        match decode_reply(&encode_line(&line)).unwrap() {
            Reply::Infer(back) => {
                prop_assert_eq!(&back, &line);
                let restored = back.detections[0].clone().into_detection(&back.image_id, 3);
                prop_assert_eq!(restored, d);
            }
            other => prop_assert!(false, "decoded as {:?}", other),
        }
        let m = EpochMetrics { epoch, map50: m50, map50_95: m5095, box_loss: bl, class_loss: cl };
        match decode_reply(&encode_line(&EpochLine::from(&m))).unwrap() {
            Reply::Epoch(l) => prop_assert_eq!(EpochMetrics::from(&l), m),
            other => prop_assert!(false, "decoded as {:?}", other),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Annotate(usize),
    AnnotateInvalid(usize),
    Undo(usize),
    Retrain,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (0usize..1000).prop_map(Op::Annotate),
        1 => (0usize..1000).prop_map(Op::AnnotateInvalid),
        2 => (0usize..1000).prop_map(Op::Undo),
        1 => Just(Op::Retrain),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn state_machine_keeps_invariants(ops in prop::collection::vec(op(), 1..120)) {
        let world = generate_world(&WorldConfig { dim: 8, ..WorldConfig::sized(40, 8, 8, 3) });
        let det = SyntheticDetector::from_registry(&world.registry, SkillParams::default(), 3);
        let cfg = SessionConfig {
            budget_per_iteration: 3,
            total_iterations: 3,
            seed_clusters: 4,
            seed_per_centroid: 1,
            tsne_iterations: 20,
            heatmap_resolution: 8,
            epochs: 2,
            ..SessionConfig::default()
        };
        let mut s = start_session(&cfg, &world.registry, &world.embeddings, &det).unwrap();
        let all: Vec<String> = world.registry.images.keys().cloned().collect();
        for op in ops {
            let before = s.clone();
            let result = match &op {
                Op::Annotate(i) => {
                    let id = &all[i % all.len()];
                    let boxes = world.registry.labels_of(id).unwrap_or(&[]).to_vec();
                    s.record_annotation(id, boxes).map(|_| ())
                }
                Op::AnnotateInvalid(i) => {
                    let id = &all[i % all.len()];
                    s.record_annotation(id, vec![GroundTruthBox::new(0, BBox::new(0.0, 0.0, 0.5, 0.5))]).map(|_| ())
                }
                Op::Undo(i) => s.undo_annotation(&all[i % all.len()]).map(|_| ()),
                Op::Retrain => {
                    let full = before.pending.len() == cfg.budget_per_iteration;
                    let r = s.retrain(&det, &world.registry, &mut |_| {}).map(|_| ());
                    prop_assert_eq!(r.is_ok(), full && before.phase == Phase::ReadyToTrain);
                    r
                }
            };
            if let Err(e) = &result {
                prop_assert_eq!(&s, &before, "{:?} failed with {} but changed state", op, e);
                if matches!(op, Op::AnnotateInvalid(_)) {
                    let expected = matches!(
                        e,
                        WorkflowError::InvalidBoxes(_) | WorkflowError::PhaseViolation { .. }
                    );
                    prop_assert!(expected, "unexpected error {}", e);
                }
            }
            if let Err(v) = s.check_invariants() {
                prop_assert!(false, "after {:?}: {}", op, v);
            }
            let grown = before.labeled.keys().all(|k| s.labeled.contains_key(k));
            prop_assert!(grown);
        }
    }
}

#[derive(Debug, Clone)]
enum StoreOp {
    Annotate(usize, usize),
    Delete(usize, u32),
    Model(u32),
    Detections(u32, Vec<usize>),
}

fn store_op() -> impl Strategy<Value = StoreOp> {
    prop_oneof![
        (0usize..12, 0usize..3).prop_map(|(i, n)| StoreOp::Annotate(i, n)),
        (0usize..12, 0u32..3).prop_map(|(i, t)| StoreOp::Delete(i, t)),
        (0u32..5).prop_map(StoreOp::Model),
        ((0u32..5), prop::collection::vec(0usize..12, 0..6)).prop_map(|(v, ids)| StoreOp::Detections(v, ids)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn store_keeps_referential_integrity(ops in prop::collection::vec(store_op(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&WorldConfig { dim: 2, ..WorldConfig::sized(8, 2, 2, 1) });
        let mut store = EntityStore::open(dir.path()).unwrap();
        store.register_images(&world.registry).unwrap();
        store.create_user("u", "U", "t").unwrap();
        // Ids 10 and 11 are never registered.
        let mut ids: Vec<String> = world.registry.images.keys().cloned().collect();
        ids.truncate(10);
        ids.push("ghost a".into());
        ids.push("ghost b".into());
        for op in ops {
            match op {
                StoreOp::Annotate(i, n) => {
                    let boxes: Vec<GroundTruthBox> = (0..n).map(|k| GroundTruthBox::new(k as u32, BBox::new(0.5, 0.5, 0.2, 0.2))).collect();
                    let _ = store.record_annotation("u", &ids[i], 1, &boxes);
                }
                StoreOp::Delete(i, t) => {
                    let _ = store.delete_annotation("u", &ids[i], t);
                }
                StoreOp::Model(v) => {
                    let m = vilod_core::ModelVersion {
                        version: v,
                        parent: v.checked_sub(1),
                        weights_ref: format!("w{v}"),
                        train_config: Default::default(),
                        created_at: 0,
                        best_epoch: None,
                    };
                    let _ = store.record_model("u", &m);
                }
                StoreOp::Detections(v, which) => {
                    let dets: Vec<Detection> = which
                        .iter()
                        .map(|&i| Detection { image_id: ids[i].clone(), class_id: 0, bbox: BBox::full(), confidence: 0.5, model_version: v })
                        .collect();
                    let before = store.detections("u", v).unwrap();
                    match store.record_detections("u", v, &dets) {
                        Ok(n) => prop_assert_eq!(store.detections("u", v).unwrap().len(), n),
                        Err(_) => prop_assert_eq!(store.detections("u", v).unwrap(), before),
                    }
                }
            }
            let problems = store.integrity_report().unwrap();
            prop_assert!(problems.is_empty(), "{:?}", problems);
        }
    }
}
