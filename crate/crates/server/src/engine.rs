//! Shared server state. Each user owns at most one session; every mutation
//! of a session happens under that session's lock.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use vilod_core::persistence::{EntityStore, StoreError};
use vilod_core::workflow::{start_session, RetrainOutcome};
use vilod_core::{
    DatasetRegistry, Detection, Detector, DetectorError, Embeddings, GroundTruthBox, IterationState, Phase,
    SessionConfig, Split, TrajectoryRow,
};

use crate::api::{AnnotationReply, Predictions, WireDetection};
use crate::error::ApiError;
use crate::events::JobLog;

pub type SessionSlot = Arc<Mutex<IterationState>>;

pub struct Engine {
    pub registry: DatasetRegistry,
    pub embeddings: Embeddings,
    pub detector: Arc<dyn Detector>,
    pub session_config: SessionConfig,
    pub baseline: Vec<TrajectoryRow>,
    store: Mutex<EntityStore>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    starting: Mutex<HashSet<String>>,
    jobs: Mutex<BTreeMap<u64, Arc<JobLog>>>,
    next_job: AtomicU64,
}

impl Engine {
    pub fn new(
        registry: DatasetRegistry,
        embeddings: Embeddings,
        detector: Arc<dyn Detector>,
        session_config: SessionConfig,
        mut store: EntityStore,
    ) -> Result<Self, ApiError> {
        session_config.validate()?;
        store.register_images(&registry)?;
        Ok(Self {
            registry,
            embeddings,
            detector,
            session_config,
            baseline: Vec::new(),
            store: Mutex::new(store),
            sessions: Mutex::new(HashMap::new()),
            starting: Mutex::new(HashSet::new()),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
        })
    }

    pub fn with_baseline(mut self, rows: Vec<TrajectoryRow>) -> Self {
        self.baseline = rows;
        self
    }

    pub fn add_user(&self, user: &str, token: &str) -> Result<(), ApiError> {
        Ok(self.store.lock().unwrap().create_user(user, user, token)?)
    }

    pub fn authenticate(&self, token: &str) -> Result<String, ApiError> {
        self.store
            .lock()
            .unwrap()
            .authenticate(token)?
            .ok_or(ApiError::Unauthorized)
    }

    /// The user's live session, restoring it from disk on first access.
    pub fn session(&self, user: &str) -> Result<SessionSlot, ApiError> {
        if let Some(slot) = self.sessions.lock().unwrap().get(user) {
            return Ok(slot.clone());
        }
        let restored = match self.store.lock().unwrap().restore_session(user) {
            Ok(s) => s,
            Err(StoreError::NoSnapshot(_)) => return Err(ApiError::NoSession),
            Err(e) => return Err(e.into()),
        };
        let mut state = restored;
        if state.phase == Phase::Training {
            // The job died with the previous process.
            let lost = Err(DetectorError::TrainingFailed("interrupted by a server restart".into()));
            self.finish_training(user, &mut state, lost)?;
        }
        let mut sessions = self.sessions.lock().unwrap();
        Ok(sessions
            .entry(user.to_owned())
            .or_insert_with(|| Arc::new(Mutex::new(state)))
            .clone())
    }

    /// Starts a session unless one exists. Returns whether a new one was
    /// created. Blocking: runs projection and the first training.
    pub fn start(&self, user: &str) -> Result<(SessionSlot, bool), ApiError> {
        match self.session(user) {
            Ok(slot) => return Ok((slot, false)),
            Err(ApiError::NoSession) => {}
            Err(e) => return Err(e),
        }
        if !self.starting.lock().unwrap().insert(user.to_owned()) {
            return Err(ApiError::SessionStarting);
        }
        let result = self.start_fresh(user);
        self.starting.lock().unwrap().remove(user);
        let state = result?;
        let slot = Arc::new(Mutex::new(state));
        self.sessions.lock().unwrap().insert(user.to_owned(), slot.clone());
        Ok((slot, true))
    }

    fn start_fresh(&self, user: &str) -> Result<IterationState, ApiError> {
        let state = start_session(&self.session_config, &self.registry, &self.embeddings, &*self.detector)?;
        let mut store = self.store.lock().unwrap();
        for (id, l) in &state.labeled {
            store.record_annotation(user, id, l.iteration, &l.boxes)?;
        }
        store.record_model(user, &state.current_model)?;
        store.record_detections(user, state.current_model.version, &flat(&state.pool_detections))?;
        store.snapshot_session(user, &state)?;
        Ok(state)
    }

    fn persist(&self, user: &str, state: &IterationState) -> Result<(), ApiError> {
        Ok(self.store.lock().unwrap().snapshot_session(user, state)?)
    }

    pub fn annotate(
        &self,
        user: &str,
        image_id: &str,
        boxes: Vec<GroundTruthBox>,
    ) -> Result<AnnotationReply, ApiError> {
        let slot = self.session(user)?;
        let mut s = slot.lock().unwrap();
        s.record_annotation(image_id, boxes.clone())?;
        self.store
            .lock()
            .unwrap()
            .record_annotation(user, image_id, s.iteration, &boxes)?;
        self.persist(user, &s)?;
        Ok(reply(image_id, &s))
    }

    pub fn unannotate(&self, user: &str, image_id: &str) -> Result<AnnotationReply, ApiError> {
        let slot = self.session(user)?;
        let mut s = slot.lock().unwrap();
        s.undo_annotation(image_id)?;
        self.store
            .lock()
            .unwrap()
            .delete_annotation(user, image_id, s.iteration)?;
        self.persist(user, &s)?;
        Ok(reply(image_id, &s))
    }

    /// Moves the session into training and registers the job. The caller
    /// runs [`Engine::run_job`] afterwards, off the async runtime.
    pub fn begin_retrain(&self, user: &str) -> Result<(Arc<JobLog>, vilod_core::workflow::RetrainJob), ApiError> {
        let slot = self.session(user)?;
        let mut s = slot.lock().unwrap();
        let job = s.begin_retrain()?;
        self.persist(user, &s)?;
        let id = self.next_job.fetch_add(1, Ordering::Relaxed);
        let log = Arc::new(JobLog::new(id, user.to_owned(), job.iteration));
        self.jobs.lock().unwrap().insert(id, log.clone());
        Ok((log, job))
    }

    pub fn run_job(&self, log: &JobLog, job: vilod_core::workflow::RetrainJob) {
        let trained = self
            .detector
            .train(Some(&job.parent), &job.manifest, &job.config, &mut |e| {
                log.epoch(e.clone())
            });
        let finished = self.session(&log.user).and_then(|slot| {
            let mut s = slot.lock().unwrap();
            self.finish_training(&log.user, &mut s, trained)
        });
        match finished {
            Ok(RetrainOutcome::Trained(m)) => log.done(m.version),
            Ok(RetrainOutcome::Failed(f)) => log.failed(f.message),
            Err(e) => log.failed(e.to_string()),
        }
    }

    fn finish_training(
        &self,
        user: &str,
        s: &mut IterationState,
        trained: Result<vilod_core::ModelVersion, DetectorError>,
    ) -> Result<RetrainOutcome, ApiError> {
        let outcome = s.complete_retrain(trained, &*self.detector, &self.registry)?;
        if let RetrainOutcome::Trained(m) = &outcome {
            let mut store = self.store.lock().unwrap();
            store.record_model(user, m)?;
            store.record_detections(user, m.version, &flat(&s.pool_detections))?;
        }
        self.persist(user, s)?;
        Ok(outcome)
    }

    pub fn job(&self, user: &str, job_id: Option<u64>) -> Result<Arc<JobLog>, ApiError> {
        let jobs = self.jobs.lock().unwrap();
        let found = match job_id {
            Some(id) => jobs.get(&id),
            None => jobs.values().rev().find(|j| j.user == user),
        };
        found.filter(|j| j.user == user).cloned().ok_or(ApiError::UnknownJob)
    }

    /// Current-model predictions. Pool images are served from the cached
    /// inference; other splits are inferred on demand.
    pub fn predictions(&self, user: &str, image_id: &str) -> Result<Predictions, ApiError> {
        let split = self
            .registry
            .split_of(image_id)
            .ok_or_else(|| ApiError::UnknownImage(image_id.to_owned()))?;
        let slot = self.session(user)?;
        let (model, cached) = {
            let s = slot.lock().unwrap();
            let cached =
                (split == Split::TrainPool).then(|| s.pool_detections.get(image_id).cloned().unwrap_or_default());
            (s.current_model.clone(), cached)
        };
        let dets = match cached {
            Some(d) => d,
            None => self.detector.infer(&model, &[image_id.to_owned()])?,
        };
        Ok(Predictions {
            image_id: image_id.to_owned(),
            model_version: model.version,
            detections: dets.iter().map(WireDetection::from).collect(),
        })
    }
}

fn reply(image_id: &str, s: &IterationState) -> AnnotationReply {
    AnnotationReply {
        image_id: image_id.to_owned(),
        iteration: s.iteration,
        phase: s.phase,
        progress: crate::api::progress(s),
    }
}

fn flat(dets: &BTreeMap<String, Vec<Detection>>) -> Vec<Detection> {
    dets.values().flatten().cloned().collect()
}
