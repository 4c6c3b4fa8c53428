//! Training progress log with fan-out to any number of subscribers.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use vilod_core::EpochMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainingEvent {
    Epoch {
        job_id: u64,
        #[serde(flatten)]
        metrics: EpochMetrics,
    },
    Done {
        job_id: u64,
        version: u32,
        iteration: u32,
    },
    Failed {
        job_id: u64,
        message: String,
    },
}

impl TrainingEvent {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, TrainingEvent::Epoch { .. })
    }
}

/// Append-only event list for one job. Subscribers read from any cursor, so
/// late joiners see the whole history and then follow along.
pub struct JobLog {
    pub job_id: u64,
    pub user: String,
    pub iteration: u32,
    events: Mutex<Vec<TrainingEvent>>,
    len: watch::Sender<usize>,
}

impl JobLog {
    pub fn new(job_id: u64, user: String, iteration: u32) -> Self {
        Self {
            job_id,
            user,
            iteration,
            events: Mutex::new(Vec::new()),
            len: watch::Sender::new(0),
        }
    }

    fn append(&self, event: TrainingEvent) {
        let mut events = self.events.lock().unwrap();
        if events.last().is_some_and(TrainingEvent::is_terminal) {
            log::warn!("job {}: dropping event after terminal", self.job_id);
            return;
        }
        if let (TrainingEvent::Epoch { metrics, .. }, Some(TrainingEvent::Epoch { metrics: last, .. })) =
            (&event, events.last())
        {
            if metrics.epoch <= last.epoch {
                log::warn!("job {}: out-of-order epoch {}", self.job_id, metrics.epoch);
                return;
            }
        }
        events.push(event);
        self.len.send_replace(events.len());
    }

    pub fn epoch(&self, metrics: EpochMetrics) {
        self.append(TrainingEvent::Epoch {
            job_id: self.job_id,
            metrics,
        });
    }

    pub fn done(&self, version: u32) {
        self.append(TrainingEvent::Done {
            job_id: self.job_id,
            version,
            iteration: self.iteration,
        });
    }

    pub fn failed(&self, message: String) {
        self.append(TrainingEvent::Failed {
            job_id: self.job_id,
            message,
        });
    }

    pub fn snapshot(&self) -> Vec<TrainingEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn is_finished(&self) -> bool {
        self.events
            .lock()
            .unwrap()
            .last()
            .is_some_and(TrainingEvent::is_terminal)
    }

    pub fn subscribe(&self) -> Subscription<'_> {
        Subscription {
            log: self,
            rx: self.len.subscribe(),
            cursor: 0,
        }
    }
}

pub struct Subscription<'a> {
    log: &'a JobLog,
    rx: watch::Receiver<usize>,
    cursor: usize,
}

impl Subscription<'_> {
    /// Events not yet seen by this subscriber, waiting if there are none.
    /// Returns an empty batch once the terminal event has been delivered.
    pub async fn next_batch(&mut self) -> Vec<TrainingEvent> {
        loop {
            self.rx.borrow_and_update();
            let batch: Vec<TrainingEvent> = {
                let events = self.log.events.lock().unwrap();
                if self.cursor > 0 && events[self.cursor - 1].is_terminal() {
                    return Vec::new();
                }
                events[self.cursor..].to_vec()
            };
            if !batch.is_empty() {
                self.cursor += batch.len();
                return batch;
            }
            if self.rx.changed().await.is_err() {
                return Vec::new();
            }
        }
    }
}
