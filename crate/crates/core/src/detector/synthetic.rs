//! A deterministic stand-in for a trained detector.
//!
//! Each class has a skill that grows with the number of labeled instances
//! the model has seen: a logistic detection probability, a confidence mean
//! that rises toward a ceiling, and localization noise that shrinks. The
//! random draws for an image depend only on the global seed and the image
//! id, so a more skilled model detects a superset of what a less skilled one
//! found.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    best_epoch, next_version, unix_now, Detection, Detector, DetectorError, EpochMetrics, ModelVersion, TrainConfig,
    TrainManifest, TrainingSlot,
};
use crate::bbox::BBox;
use crate::dataset_io::{DatasetRegistry, GroundTruthBox, Split};
use crate::evaluation::{map_metrics, EvalReport};

const REF_PREFIX: &str = "synthetic";

/// Shape of the skill curves, shared by all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillParams {
    /// Logistic slope per labeled instance.
    pub detect_slope: f64,
    /// Logistic offset. `±INFINITY` pins the probability to 1 or 0.
    pub detect_offset: f64,
    pub conf_floor: f64,
    pub conf_ceiling: f64,
    /// Instances needed to close ~63% of the floor→ceiling gap.
    pub conf_scale: f64,
    pub conf_spread: f64,
    /// Box jitter as a fraction of box size, before any labels.
    pub noise_base: f64,
    pub noise_scale: f64,
    pub false_positive_rate: f64,
    pub false_positive_decay: f64,
    pub false_positive_conf: f64,
    pub max_false_positives: u32,
}

impl Default for SkillParams {
    fn default() -> Self {
        Self {
            detect_slope: 0.035,
            detect_offset: -1.5,
            conf_floor: 0.15,
            conf_ceiling: 0.85,
            conf_scale: 60.0,
            conf_spread: 0.08,
            noise_base: 0.12,
            noise_scale: 40.0,
            false_positive_rate: 0.35,
            false_positive_decay: 300.0,
            false_positive_conf: 0.2,
            max_false_positives: 2,
        }
    }
}

impl SkillParams {
    /// A model that finds every object exactly, at confidence `conf`.
    pub fn oracle(conf: f64) -> Self {
        Self {
            detect_slope: 0.0,
            detect_offset: f64::INFINITY,
            conf_floor: conf,
            conf_ceiling: conf,
            conf_spread: 0.0,
            noise_base: 0.0,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }

    /// A model that never detects anything.
    pub fn blind() -> Self {
        Self {
            detect_slope: 0.0,
            detect_offset: f64::NEG_INFINITY,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSkill {
    pub labeled_count: Vec<u64>,
    pub params: SkillParams,
    pub seed: u64,
}

impl SyntheticSkill {
    pub fn new(num_classes: usize, params: SkillParams, seed: u64) -> Self {
        Self {
            labeled_count: vec![0; num_classes],
            params,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labeled_count.len()
    }

    pub fn detect_prob(&self, class: usize) -> f64 {
        let n = self.labeled_count[class] as f64;
        let z = self.params.detect_slope * n + self.params.detect_offset;
        1.0 / (1.0 + (-z).exp())
    }

    pub fn conf_mean(&self, class: usize) -> f64 {
        let p = &self.params;
        let n = self.labeled_count[class] as f64;
        p.conf_floor + (p.conf_ceiling - p.conf_floor) * (1.0 - (-n / p.conf_scale).exp())
    }

    pub fn noise_sigma(&self, class: usize) -> f64 {
        let n = self.labeled_count[class] as f64;
        self.params.noise_base / (1.0 + n / self.params.noise_scale)
    }

    pub fn false_positive_prob(&self) -> f64 {
        let total: u64 = self.labeled_count.iter().sum();
        self.params.false_positive_rate * (-(total as f64) / self.params.false_positive_decay).exp()
    }

    /// Predictions on one image given its true objects.
    pub fn predict(&self, image_id: &str, truth: &[GroundTruthBox], version: u32) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(image_id.as_bytes()));
        let mut out = Vec::new();
        for gt in truth {
            // Draw everything up front so the stream position never depends
            // on the skill.
            let u: f64 = rng.gen();
            let zc: f64 = rng.sample(StandardNormal);
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let c = gt.class_id as usize;
            if c >= self.num_classes() || u >= self.detect_prob(c) {
                continue;
            }
            let s = self.noise_sigma(c);
            let b = gt.bbox;
            let jittered = BBox::new(
                b.cx + s * b.w * z[0],
                b.cy + s * b.h * z[1],
                b.w * (s * z[2]).exp(),
                b.h * (s * z[3]).exp(),
            );
            let Some(bbox) = jittered.clamp_unit() else {
                continue;
            };
            let confidence = (self.conf_mean(c) + self.params.conf_spread * zc).clamp(0.0, 1.0);
            out.push(Detection {
                image_id: image_id.to_owned(),
                class_id: gt.class_id,
                bbox,
                confidence,
                model_version: version,
            });
        }
        let fp = self.false_positive_prob();
        for _ in 0..self.params.max_false_positives {
            let u: f64 = rng.gen();
            let pos: [f64; 4] = std::array::from_fn(|_| rng.gen());
            let class = rng.gen_range(0..self.num_classes().max(1)) as u32;
            let cu: f64 = rng.gen();
            if u >= fp || self.num_classes() == 0 {
                continue;
            }
            let bbox = BBox::new(pos[0], pos[1], 0.05 + 0.25 * pos[2], 0.05 + 0.25 * pos[3]);
            let Some(bbox) = bbox.clamp_unit() else {
                continue;
            };
            out.push(Detection {
                image_id: image_id.to_owned(),
                class_id: class,
                bbox,
                confidence: (self.params.false_positive_conf * (0.5 + cu)).clamp(0.0, 1.0),
                model_version: version,
            });
        }
        out
    }
}

/// Adds new labeled instances to the per-class counts.
pub fn synthetic_update_skill(
    skill: &SyntheticSkill,
    annotations: &[GroundTruthBox],
) -> Result<SyntheticSkill, DetectorError> {
    let mut next = skill.clone();
    for a in annotations {
        let slot = next
            .labeled_count
            .get_mut(a.class_id as usize)
            .ok_or(DetectorError::UnknownClass(a.class_id))?;
        *slot += 1;
    }
    Ok(next)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// In-process detector driven by ground truth.
///
/// Model weights are encoded in `weights_ref` as the per-class instance
/// counts, so any version can be re-created after a restart.
#[derive(Debug)]
pub struct SyntheticDetector {
    truth: BTreeMap<String, Vec<GroundTruthBox>>,
    validation: BTreeMap<String, Vec<GroundTruthBox>>,
    base: SyntheticSkill,
    slot: TrainingSlot,
    available: AtomicBool,
    fail_next: AtomicBool,
    epoch_delay: Duration,
}

impl SyntheticDetector {
    pub fn new(truth: BTreeMap<String, Vec<GroundTruthBox>>, validation_ids: &[String], base: SyntheticSkill) -> Self {
        let validation = validation_ids
            .iter()
            .map(|id| (id.clone(), truth.get(id).cloned().unwrap_or_default()))
            .collect();
        Self {
            truth,
            validation,
            base,
            slot: TrainingSlot::default(),
            available: AtomicBool::new(true),
            fail_next: AtomicBool::new(false),
            epoch_delay: Duration::ZERO,
        }
    }

    /// Uses the registry's labels as the world and its validation split for
    /// best-epoch selection.
    pub fn from_registry(registry: &DatasetRegistry, params: SkillParams, seed: u64) -> Self {
        let base = SyntheticSkill::new(registry.classes.len(), params, seed);
        Self::new(registry.labels.clone(), &registry.ids(Split::Validation), base)
    }

    /// Sleep between epochs, for exercising live progress streams.
    pub fn with_epoch_delay(mut self, delay: Duration) -> Self {
        self.epoch_delay = delay;
        self
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::Release);
    }

    /// The next training job fails after acquiring the slot.
    pub fn fail_next_training(&self) {
        self.fail_next.store(true, Ordering::Release);
    }

    pub fn base_skill(&self) -> &SyntheticSkill {
        &self.base
    }

    /// Skill encoded by a model's weights reference.
    pub fn skill_for(&self, model: &ModelVersion) -> Result<SyntheticSkill, DetectorError> {
        let unknown = || DetectorError::UnknownModel(model.weights_ref.clone());
        let mut parts = model.weights_ref.splitn(3, ':');
        if parts.next() != Some(REF_PREFIX) {
            return Err(unknown());
        }
        let _version = parts.next().ok_or_else(unknown)?;
        let counts: Vec<u64> = match parts.next() {
            Some("") | None => Vec::new(),
            Some(s) => s
                .split(',')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| unknown())?,
        };
        if counts.len() != self.base.num_classes() {
            return Err(unknown());
        }
        Ok(SyntheticSkill {
            labeled_count: counts,
            ..self.base.clone()
        })
    }

    fn encode_ref(version: u32, skill: &SyntheticSkill) -> String {
        let counts: Vec<String> = skill.labeled_count.iter().map(u64::to_string).collect();
        format!("{REF_PREFIX}:v{version}:{}", counts.join(","))
    }

    fn check_available(&self) -> Result<(), DetectorError> {
        if self.available.load(Ordering::Acquire) {
            Ok(())
        } else {
            Err(DetectorError::BackendUnavailable("synthetic backend offline".into()))
        }
    }

    fn predict_all(&self, skill: &SyntheticSkill, version: u32, ids: &[String]) -> Vec<Detection> {
        ids.iter()
            .flat_map(|id| {
                let truth = self.truth.get(id).map(Vec::as_slice).unwrap_or(&[]);
                skill.predict(id, truth, version)
            })
            .collect()
    }

    fn epoch_curve(final_report: &EvalReport, config: &TrainConfig, version: u32) -> Vec<EpochMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (u64::from(version) << 32));
        let tau = (config.epochs as f64 / 6.0).max(1.0);
        (1..=config.epochs)
            .map(|e| {
                let ramp = 1.0 - (-(e as f64) / tau).exp();
                let wobble = 1.0 + 0.03 * rng.sample::<f64, _>(StandardNormal);
                let decay = (-(e as f64) / (2.0 * tau)).exp();
                EpochMetrics {
                    epoch: e,
                    map50: (final_report.map50 * ramp * wobble).clamp(0.0, 1.0),
                    map50_95: (final_report.map50_95 * ramp * wobble).clamp(0.0, 1.0),
                    box_loss: 0.8 + 1.2 * decay + 0.5 * (1.0 - final_report.map50_95),
                    class_loss: 0.6 + 2.0 * decay + 0.8 * (1.0 - final_report.map50),
                }
            })
            .collect()
    }
}

impl Detector for SyntheticDetector {
    fn ping(&self) -> Result<(), DetectorError> {
        self.check_available()
    }

    fn train(
        &self,
        parent: Option<&ModelVersion>,
        manifest: &TrainManifest,
        config: &TrainConfig,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<ModelVersion, DetectorError> {
        self.check_available()?;
        if manifest.is_empty() {
            return Err(DetectorError::EmptyManifest);
        }
        let _guard = self.slot.acquire()?;
        if self.fail_next.swap(false, Ordering::AcqRel) {
            return Err(DetectorError::TrainingFailed("injected failure".into()));
        }
        // The manifest is the full labeled set, so the skill is rebuilt from
        // the base model rather than accumulated onto the parent.
        let boxes: Vec<GroundTruthBox> = manifest.annotations.values().flatten().copied().collect();
        let skill = synthetic_update_skill(&self.base, &boxes)?;
        let version = next_version(parent);

        let final_report = if self.validation.is_empty() {
            EvalReport::default()
        } else {
            let ids: Vec<String> = self.validation.keys().cloned().collect();
            let dets = self.predict_all(&skill, version, &ids);
            map_metrics(&dets, &self.validation).map_err(|e| DetectorError::TrainingFailed(e.to_string()))?
        };
        let epochs = Self::epoch_curve(&final_report, config, version);
        for e in &epochs {
            on_epoch(e);
            if !self.epoch_delay.is_zero() {
                std::thread::sleep(self.epoch_delay);
            }
        }
        let best = best_epoch(&epochs).cloned();
        Ok(ModelVersion {
            version,
            parent: parent.map(|p| p.version),
            weights_ref: Self::encode_ref(version, &skill),
            train_config: config.clone(),
            created_at: unix_now(),
            best_epoch: best,
        })
    }

    fn infer(&self, model: &ModelVersion, image_ids: &[String]) -> Result<Vec<Detection>, DetectorError> {
        self.check_available()?;
        let skill = self.skill_for(model)?;
        Ok(self.predict_all(&skill, model.version, image_ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> (BTreeMap<String, Vec<GroundTruthBox>>, Vec<String>) {
        let mut truth = BTreeMap::new();
        for i in 0..30 {
            let boxes = vec![
                GroundTruthBox::new(i % 3, BBox::new(0.3, 0.4, 0.2, 0.3)),
                GroundTruthBox::new((i + 1) % 3, BBox::new(0.7, 0.6, 0.25, 0.2)),
            ];
            truth.insert(format!("img{i:02}"), boxes);
        }
        let val = (20..30).map(|i| format!("img{i:02}")).collect();
        (truth, val)
    }

    fn manifest(ids: &[&str], truth: &BTreeMap<String, Vec<GroundTruthBox>>) -> TrainManifest {
        TrainManifest {
            annotations: ids.iter().map(|id| ((*id).to_owned(), truth[*id].clone())).collect(),
        }
    }

    fn all_ids(truth: &BTreeMap<String, Vec<GroundTruthBox>>) -> Vec<String> {
        truth.keys().cloned().collect()
    }

    #[test]
    fn blind_model_detects_nothing() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth.clone(), &val, SyntheticSkill::new(3, SkillParams::blind(), 1));
        let m = det
            .train(
                None,
                &manifest(&["img00"], &truth),
                &TrainConfig::default(),
                &mut |_| {},
            )
            .unwrap();
        assert!(det.infer(&m, &all_ids(&truth)).unwrap().is_empty());
    }

    #[test]
    fn oracle_model_reproduces_truth() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth.clone(), &val, SyntheticSkill::new(3, SkillParams::oracle(0.9), 1));
        let m = det
            .train(
                None,
                &manifest(&["img00"], &truth),
                &TrainConfig::default(),
                &mut |_| {},
            )
            .unwrap();
        let dets = det.infer(&m, &["img05".to_owned()]).unwrap();
        let got: Vec<GroundTruthBox> = dets.iter().map(|d| GroundTruthBox::new(d.class_id, d.bbox)).collect();
        assert_eq!(got, truth["img05"]);
        assert!(dets.iter().all(|d| d.confidence == 0.9));
    }

    #[test]
    fn inference_is_deterministic_and_scoped() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth.clone(), &val, SyntheticSkill::new(3, SkillParams::default(), 7));
        let m = det
            .train(
                None,
                &manifest(&["img00", "img01"], &truth),
                &TrainConfig::default(),
                &mut |_| {},
            )
            .unwrap();
        let req = vec!["img03".to_owned(), "img11".to_owned()];
        let a = det.infer(&m, &req).unwrap();
        assert_eq!(a, det.infer(&m, &req).unwrap());
        assert!(a.iter().all(|d| req.contains(&d.image_id)));
    }

    #[test]
    fn train_streams_epochs_and_chains_versions() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth.clone(), &val, SyntheticSkill::new(3, SkillParams::default(), 7));
        let ids: Vec<String> = (0..20).map(|i| format!("img{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut seen = Vec::new();
        let m0 = det
            .train(
                None,
                &manifest(&refs[..10], &truth),
                &TrainConfig::default(),
                &mut |e| seen.push(e.epoch),
            )
            .unwrap();
        assert_eq!(seen, (1..=50).collect::<Vec<_>>());
        assert_eq!((m0.version, m0.parent), (0, None));
        let m1 = det
            .train(
                Some(&m0),
                &manifest(&refs, &truth),
                &TrainConfig::default(),
                &mut |_| {},
            )
            .unwrap();
        assert_eq!((m1.version, m1.parent), (1, Some(0)));
        let best = m1.best_epoch.as_ref().unwrap();
        assert!(best.map50_95 >= 0.0 && best.map50_95 <= 1.0);
    }

    #[test]
    fn empty_manifest_and_unknown_models_fail() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth, &val, SyntheticSkill::new(3, SkillParams::default(), 7));
        let r = det.train(None, &TrainManifest::default(), &TrainConfig::default(), &mut |_| {});
        assert_eq!(r.err(), Some(DetectorError::EmptyManifest));
        let bogus = ModelVersion {
            version: 3,
            parent: Some(2),
            weights_ref: "yolo11n.pt".into(),
            train_config: TrainConfig::default(),
            created_at: 0,
            best_epoch: None,
        };
        assert!(matches!(det.infer(&bogus, &[]), Err(DetectorError::UnknownModel(_))));
    }

    #[test]
    fn offline_backend_is_unavailable() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth, &val, SyntheticSkill::new(3, SkillParams::default(), 7));
        det.set_available(false);
        assert!(matches!(det.ping(), Err(DetectorError::BackendUnavailable(_))));
    }

    #[test]
    fn concurrent_training_is_rejected() {
        let (truth, val) = world();
        let det = SyntheticDetector::new(truth.clone(), &val, SyntheticSkill::new(3, SkillParams::default(), 7));
        let m = manifest(&["img00"], &truth);
        let (started_tx, started_rx) = std::sync::mpsc::channel();
        let (release_tx, release_rx) = std::sync::mpsc::channel::<()>();
        std::thread::scope(|s| {
            let det = &det;
            let m = &m;
            let first = s.spawn(move || {
                let mut once = Some(started_tx);
                det.train(None, m, &TrainConfig::default(), &mut |_| {
                    if let Some(tx) = once.take() {
                        tx.send(()).unwrap();
                        release_rx.recv().unwrap();
                    }
                })
            });
            started_rx.recv().unwrap();
            let second = det.train(None, m, &TrainConfig::default(), &mut |_| {});
            assert_eq!(second.err(), Some(DetectorError::ConcurrentTraining));
            release_tx.send(()).unwrap();
            assert!(first.join().unwrap().is_ok());
        });
    }

    #[test]
    fn skill_update_counts_instances() {
        let s = SyntheticSkill::new(4, SkillParams::default(), 0);
        assert_eq!(synthetic_update_skill(&s, &[]).unwrap(), s);
        let ten: Vec<GroundTruthBox> = (0..10).map(|_| GroundTruthBox::new(2, BBox::full())).collect();
        let t = synthetic_update_skill(&s, &ten).unwrap();
        assert!(t.detect_prob(2) > s.detect_prob(2));
        assert!(t.conf_mean(2) >= s.conf_mean(2));
        assert!(t.noise_sigma(2) <= s.noise_sigma(2));
        assert_eq!(t.detect_prob(1), s.detect_prob(1));
        assert_eq!(
            synthetic_update_skill(&s, &[GroundTruthBox::new(9, BBox::full())]),
            Err(DetectorError::UnknownClass(9))
        );
    }

    #[test]
    fn detect_prob_trajectory_matches_logistic() {
        let mut s = SyntheticSkill::new(4, SkillParams::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut counts = [0u64; 4];
        let mut prev = [0.0; 4];
        for _ in 0..5 {
            let batch: Vec<GroundTruthBox> = (0..30)
                .map(|_| GroundTruthBox::new(rng.gen_range(0..4), BBox::full()))
                .collect();
            for b in &batch {
                counts[b.class_id as usize] += 1;
            }
            s = synthetic_update_skill(&s, &batch).unwrap();
            for c in 0..4 {
                let oracle = 1.0 / (1.0 + (-(0.035 * counts[c] as f64 - 1.5)).exp());
                assert!((s.detect_prob(c) - oracle).abs() < 1e-12);
                assert!(s.detect_prob(c) >= prev[c]);
                prev[c] = s.detect_prob(c);
            }
        }
    }
}
