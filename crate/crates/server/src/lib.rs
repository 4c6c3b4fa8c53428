//! HTTP and WebSocket front end for labeling sessions.
//!
//! Every route except the WebSocket handshake expects
//! `Authorization: Bearer <token>`; the handshake may pass `?token=` instead.

pub mod api;
pub mod engine;
pub mod error;
pub mod events;
pub mod routes;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use vilod_core::dataset_io::load_dataset_manifest;
use vilod_core::detector::{RemoteDetector, SkillParams, SyntheticDetector};
use vilod_core::evaluation::read_trajectory_csv;
use vilod_core::persistence::EntityStore;
use vilod_core::{Detector, Embeddings, SessionConfig};

pub use engine::Engine;
pub use error::ApiError;
pub use events::TrainingEvent;
pub use routes::router;

pub const DEFAULT_USER: &str = "default";

/// Files expected under the data root.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    /// `embeddings.bin` if present, else `embeddings.txt`.
    pub fn embeddings(&self) -> PathBuf {
        let bin = self.root.join("embeddings.bin");
        if bin.is_file() {
            bin
        } else {
            self.root.join("embeddings.txt")
        }
    }

    pub fn embedding_ids(&self) -> PathBuf {
        self.root.join("embeddings.ids")
    }

    pub fn session_config(&self) -> PathBuf {
        self.root.join("session.toml")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.csv")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_root: PathBuf,
    /// Remote detector; the in-process synthetic backend when absent.
    pub detector_addr: Option<String>,
    /// Token registered for [`DEFAULT_USER`] at startup.
    pub token: Option<String>,
    pub bind: SocketAddr,
}

impl ServerConfig {
    /// Reads `VILOD_DATA_ROOT`, `VILOD_DETECTOR_ADDR` and `VILOD_TOKEN`.
    pub fn from_env(bind: SocketAddr) -> Result<Self, ApiError> {
        let data_root = std::env::var_os("VILOD_DATA_ROOT")
            .map(PathBuf::from)
            .ok_or_else(|| ApiError::Internal("VILOD_DATA_ROOT is not set".into()))?;
        let nonempty = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        Ok(Self {
            data_root,
            detector_addr: nonempty("VILOD_DETECTOR_ADDR"),
            token: nonempty("VILOD_TOKEN"),
            bind,
        })
    }
}

fn internal(path: &Path) -> impl Fn(String) -> ApiError + '_ {
    move |e| ApiError::Internal(format!("{}: {e}", path.display()))
}

/// Loads the dataset, embeddings and store under the data root and wires
/// up the detector backend.
pub fn load_engine(config: &ServerConfig) -> Result<Engine, ApiError> {
    let layout = DataLayout::new(&config.data_root);
    let registry = load_dataset_manifest(&layout.dataset()).map_err(|e| internal(&layout.dataset())(e.to_string()))?;
    let embeddings = Embeddings::read(&layout.embeddings(), &layout.embedding_ids())
        .map_err(|e| internal(&layout.embeddings())(e.to_string()))?;
    let session_config = if layout.session_config().is_file() {
        SessionConfig::load(&layout.session_config())?
    } else {
        SessionConfig::default()
    };
    let detector: Arc<dyn Detector> = match &config.detector_addr {
        Some(addr) => {
            std::fs::create_dir_all(layout.manifests()).map_err(|e| internal(&layout.manifests())(e.to_string()))?;
            Arc::new(
                RemoteDetector::new(addr.as_str(), layout.manifests())
                    .map_err(|e| ApiError::Internal(format!("detector address {addr}: {e}")))?,
            )
        }
        None => {
            log::warn!("VILOD_DETECTOR_ADDR not set; using the in-process synthetic detector");
            Arc::new(SyntheticDetector::from_registry(
                &registry,
                SkillParams::default(),
                session_config.seed,
            ))
        }
    };
    let baseline = if layout.baseline().is_file() {
        read_trajectory_csv(&layout.baseline()).map_err(|e| internal(&layout.baseline())(e.to_string()))?
    } else {
        Vec::new()
    };
    let store = EntityStore::open(&config.data_root)?;
    let engine = Engine::new(registry, embeddings, detector, session_config, store)?.with_baseline(baseline);
    if let Some(token) = &config.token {
        engine.add_user(DEFAULT_USER, token)?;
    }
    Ok(engine)
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServerConfig) -> Result<(), ApiError> {
    let engine = tokio::task::spawn_blocking({
        let config = config.clone();
        move || load_engine(&config)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|e| ApiError::Internal(format!("bind {}: {e}", config.bind)))?;
    log::info!("listening on {}", config.bind);
    axum::serve(listener, router(Arc::new(engine)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}
