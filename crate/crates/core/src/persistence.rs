//! Durable storage: users, images, models, annotations and detections in an
//! embedded SQLite file, plus per-user run artifacts on disk.
//!
//! ```text
//! <root>/vilod.db
//! <root>/runs/<user>/labels/<image_id>.txt
//! <root>/runs/<user>/session.snap
//! <root>/runs/<user>/trajectory.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::{params, Connection, OptionalExtension, Transaction};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset_io::{write_label_file, DatasetError, DatasetRegistry, GroundTruthBox, Split};
use crate::detector::{Detection, ModelVersion};
use crate::evaluation::trajectory_csv;
use crate::workflow::IterationState;

pub const DB_FILE: &str = "vilod.db";
pub const SNAPSHOT_FILE: &str = "session.snap";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("snapshot is corrupt: {0}")]
    Corrupt(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown model version {0}")]
    UnknownModel(u32),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("image {0} is not in the training pool")]
    NotSelectable(String),
    #[error("no saved session for user {0}")]
    NoSnapshot(String),
    #[error("{0:?} cannot be used as a file name")]
    InvalidName(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS user (
    user_id    TEXT PRIMARY KEY,
    name       TEXT NOT NULL,
    token_hash TEXT NOT NULL UNIQUE
);
CREATE TABLE IF NOT EXISTS image (
    image_id TEXT PRIMARY KEY,
    split    TEXT NOT NULL CHECK (split IN ('train_pool', 'validation', 'test')),
    width    INTEGER,
    height   INTEGER
);
CREATE TABLE IF NOT EXISTS model (
    user_id     TEXT NOT NULL REFERENCES user(user_id),
    version     INTEGER NOT NULL,
    parent      INTEGER,
    weights_ref TEXT NOT NULL,
    created_at  INTEGER NOT NULL,
    PRIMARY KEY (user_id, version),
    FOREIGN KEY (user_id, parent) REFERENCES model(user_id, version)
);
-- A row with a NULL class marks an image annotated as containing nothing.
CREATE TABLE IF NOT EXISTS annotation (
    id        INTEGER PRIMARY KEY,
    user_id   TEXT NOT NULL REFERENCES user(user_id),
    image_id  TEXT NOT NULL REFERENCES image(image_id),
    iteration INTEGER NOT NULL,
    class_id  INTEGER,
    cx REAL, cy REAL, w REAL, h REAL
);
CREATE INDEX IF NOT EXISTS annotation_by_image ON annotation(user_id, image_id);
CREATE TABLE IF NOT EXISTS detection (
    id            INTEGER PRIMARY KEY,
    user_id       TEXT NOT NULL,
    model_version INTEGER NOT NULL,
    image_id      TEXT NOT NULL REFERENCES image(image_id),
    class_id      INTEGER NOT NULL,
    cx REAL NOT NULL, cy REAL NOT NULL, w REAL NOT NULL, h REAL NOT NULL,
    confidence    REAL NOT NULL,
    FOREIGN KEY (user_id, model_version) REFERENCES model(user_id, version)
);
CREATE INDEX IF NOT EXISTS detection_by_model ON detection(user_id, model_version);
";

/// Hex SHA-256 of an access token; only the hash is stored.
pub fn hash_token(token: &str) -> String {
    let digest = Sha256::digest(token.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

fn check_name(name: &str) -> Result<()> {
    let bad = name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\', '\0']);
    if bad {
        Err(StoreError::InvalidName(name.to_owned()))
    } else {
        Ok(())
    }
}

/// Writes via a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub struct EntityStore {
    conn: Connection,
    root: PathBuf,
}

impl EntityStore {
    /// Opens or creates the store under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let conn = Connection::open(root.join(DB_FILE))?;
        Self::init(conn, root)
    }

    /// Database in memory, artifacts still under `root`.
    pub fn open_in_memory(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Self::init(Connection::open_in_memory()?, root)
    }

    fn init(conn: Connection, root: PathBuf) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", true)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn user_dir(&self, user: &str) -> PathBuf {
        self.root.join("runs").join(user)
    }

    pub fn labels_dir(&self, user: &str) -> PathBuf {
        self.user_dir(user).join("labels")
    }

    fn label_path(&self, user: &str, image_id: &str) -> PathBuf {
        self.labels_dir(user).join(format!("{image_id}.txt"))
    }

    pub fn create_user(&self, user_id: &str, name: &str, token: &str) -> Result<()> {
        check_name(user_id)?;
        self.conn.execute(
            "INSERT INTO user (user_id, name, token_hash) VALUES (?1, ?2, ?3)
             ON CONFLICT(user_id) DO UPDATE SET name = excluded.name, token_hash = excluded.token_hash",
            params![user_id, name, hash_token(token)],
        )?;
        Ok(())
    }

    /// The user owning `token`, if any.
    pub fn authenticate(&self, token: &str) -> Result<Option<String>> {
        Ok(self
            .conn
            .query_row(
                "SELECT user_id FROM user WHERE token_hash = ?1",
                [hash_token(token)],
                |r| r.get(0),
            )
            .optional()?)
    }

    fn require_user(tx: &Transaction<'_>, user: &str) -> Result<()> {
        let found: Option<i64> = tx
            .query_row("SELECT 1 FROM user WHERE user_id = ?1", [user], |r| r.get(0))
            .optional()?;
        found
            .map(|_| ())
            .ok_or_else(|| StoreError::UnknownUser(user.to_owned()))
    }

    /// Adds every registry image; existing rows are left alone.
    pub fn register_images(&mut self, registry: &DatasetRegistry) -> Result<usize> {
        let tx = self.conn.transaction()?;
        let mut added = 0;
        {
            let mut stmt =
                tx.prepare("INSERT OR IGNORE INTO image (image_id, split, width, height) VALUES (?1, ?2, ?3, ?4)")?;
            for rec in registry.images.values() {
                added += stmt.execute(params![rec.image_id, rec.split.as_str(), rec.width, rec.height])?;
            }
        }
        tx.commit()?;
        Ok(added)
    }

    fn image_split(tx: &Transaction<'_>, image_id: &str) -> Result<Split> {
        let split: Option<String> = tx
            .query_row("SELECT split FROM image WHERE image_id = ?1", [image_id], |r| r.get(0))
            .optional()?;
        match split.as_deref() {
            None => Err(StoreError::UnknownImage(image_id.to_owned())),
            Some("train_pool") => Ok(Split::TrainPool),
            Some("validation") => Ok(Split::Validation),
            Some(_) => Ok(Split::Test),
        }
    }

    /// Inserts or updates a model row. The parent must already be stored.
    pub fn record_model(&mut self, user: &str, model: &ModelVersion) -> Result<()> {
        let tx = self.conn.transaction()?;
        Self::require_user(&tx, user)?;
        if let Some(p) = model.parent {
            let found: Option<i64> = tx
                .query_row(
                    "SELECT 1 FROM model WHERE user_id = ?1 AND version = ?2",
                    params![user, p],
                    |r| r.get(0),
                )
                .optional()?;
            if found.is_none() {
                return Err(StoreError::UnknownModel(p));
            }
        }
        tx.execute(
            "INSERT INTO model (user_id, version, parent, weights_ref, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(user_id, version) DO UPDATE SET
               parent = excluded.parent, weights_ref = excluded.weights_ref,
               created_at = excluded.created_at",
            params![
                user,
                model.version,
                model.parent,
                model.weights_ref,
                model.created_at as i64
            ],
        )?;
        tx.commit()?;
        Ok(())
    }

    /// `(version, parent, weights_ref)` for every stored model of `user`.
    pub fn models(&self, user: &str) -> Result<Vec<(u32, Option<u32>, String)>> {
        let mut stmt = self
            .conn
            .prepare("SELECT version, parent, weights_ref FROM model WHERE user_id = ?1 ORDER BY version")?;
        let rows = stmt.query_map([user], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Replaces the stored detections of one model version. Nothing is
    /// written if any detection names an unknown image.
    pub fn record_detections(&mut self, user: &str, version: u32, detections: &[Detection]) -> Result<usize> {
        let tx = self.conn.transaction()?;
        let found: Option<i64> = tx
            .query_row(
                "SELECT 1 FROM model WHERE user_id = ?1 AND version = ?2",
                params![user, version],
                |r| r.get(0),
            )
            .optional()?;
        if found.is_none() {
            return Err(StoreError::UnknownModel(version));
        }
        tx.execute(
            "DELETE FROM detection WHERE user_id = ?1 AND model_version = ?2",
            params![user, version],
        )?;
        {
            let mut exists = tx.prepare_cached("SELECT 1 FROM image WHERE image_id = ?1")?;
            let mut insert = tx.prepare_cached(
                "INSERT INTO detection (user_id, model_version, image_id, class_id, cx, cy, w, h, confidence)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            )?;
            for d in detections {
                if !exists.exists([&d.image_id])? {
                    return Err(StoreError::UnknownImage(d.image_id.clone()));
                }
                let b = d.bbox;
                insert.execute(params![
                    user,
                    version,
                    d.image_id,
                    d.class_id,
                    b.cx,
                    b.cy,
                    b.w,
                    b.h,
                    d.confidence
                ])?;
            }
        }
        tx.commit()?;
        Ok(detections.len())
    }

    pub fn detections(&self, user: &str, version: u32) -> Result<Vec<Detection>> {
        let mut stmt = self.conn.prepare(
            "SELECT image_id, class_id, cx, cy, w, h, confidence FROM detection
             WHERE user_id = ?1 AND model_version = ?2 ORDER BY id",
        )?;
        let rows = stmt.query_map(params![user, version], |r| {
            Ok(Detection {
                image_id: r.get(0)?,
                class_id: r.get(1)?,
                bbox: BBox::new(r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?),
                confidence: r.get(6)?,
                model_version: version,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Stores a pool image's boxes, replacing any earlier annotation of it by
    /// the same user, and writes the matching YOLO label file.
    pub fn record_annotation(
        &mut self,
        user: &str,
        image_id: &str,
        iteration: u32,
        boxes: &[GroundTruthBox],
    ) -> Result<Vec<i64>> {
        check_name(image_id)?;
        let label = self.label_path(user, image_id);
        let tx = self.conn.transaction()?;
        Self::require_user(&tx, user)?;
        if Self::image_split(&tx, image_id)? != Split::TrainPool {
            return Err(StoreError::NotSelectable(image_id.to_owned()));
        }
        tx.execute(
            "DELETE FROM annotation WHERE user_id = ?1 AND image_id = ?2",
            params![user, image_id],
        )?;
        let mut ids = Vec::with_capacity(boxes.len().max(1));
        {
            let mut insert = tx.prepare_cached(
                "INSERT INTO annotation (user_id, image_id, iteration, class_id, cx, cy, w, h)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            )?;
            if boxes.is_empty() {
                insert.execute(params![
                    user,
                    image_id,
                    iteration,
                    None::<u32>,
                    None::<f64>,
                    None::<f64>,
                    None::<f64>,
                    None::<f64>
                ])?;
                ids.push(tx.last_insert_rowid());
            }
            for b in boxes {
                let bb = b.bbox;
                insert.execute(params![user, image_id, iteration, b.class_id, bb.cx, bb.cy, bb.w, bb.h])?;
                ids.push(tx.last_insert_rowid());
            }
        }
        write_label_file(&label, boxes)?;
        tx.commit()?;
        Ok(ids)
    }

    /// Removes a user's annotation of an image made in `iteration`, and the
    /// label file once no annotation of the image remains.
    pub fn delete_annotation(&mut self, user: &str, image_id: &str, iteration: u32) -> Result<usize> {
        let label = self.label_path(user, image_id);
        let tx = self.conn.transaction()?;
        let removed = tx.execute(
            "DELETE FROM annotation WHERE user_id = ?1 AND image_id = ?2 AND iteration = ?3",
            params![user, image_id, iteration],
        )?;
        let left: i64 = tx.query_row(
            "SELECT COUNT(*) FROM annotation WHERE user_id = ?1 AND image_id = ?2",
            params![user, image_id],
            |r| r.get(0),
        )?;
        if left == 0 && check_name(image_id).is_ok() {
            match fs::remove_file(&label) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&label)(e)),
            }
        }
        tx.commit()?;
        Ok(removed)
    }

    /// Every annotated image of `user` with its iteration and boxes.
    pub fn annotations(&self, user: &str) -> Result<BTreeMap<String, (u32, Vec<GroundTruthBox>)>> {
        let mut stmt = self.conn.prepare(
            "SELECT image_id, iteration, class_id, cx, cy, w, h FROM annotation
             WHERE user_id = ?1 ORDER BY id",
        )?;
        let mut out: BTreeMap<String, (u32, Vec<GroundTruthBox>)> = BTreeMap::new();
        let mut rows = stmt.query([user])?;
        while let Some(r) = rows.next()? {
            let image: String = r.get(0)?;
            let iteration: u32 = r.get(1)?;
            let entry = out.entry(image).or_insert((iteration, Vec::new()));
            let class: Option<u32> = r.get(2)?;
            if let Some(c) = class {
                let bbox = BBox::new(r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?);
                entry.1.push(GroundTruthBox::new(c, bbox));
            }
        }
        Ok(out)
    }

    /// Writes the session snapshot and the trajectory CSV.
    pub fn snapshot_session(&self, user: &str, state: &IterationState) -> Result<()> {
        check_name(user)?;
        let dir = self.user_dir(user);
        let json = serde_json::to_vec(state).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        write_atomic(&dir.join(SNAPSHOT_FILE), &json)?;
        write_atomic(&dir.join(TRAJECTORY_FILE), trajectory_csv(&state.trajectory).as_bytes())
    }

    pub fn restore_session(&self, user: &str) -> Result<IterationState> {
        check_name(user)?;
        let path = self.user_dir(user).join(SNAPSHOT_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NoSnapshot(user.to_owned())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    /// Broken references and label-file mismatches, as readable messages.
    /// Empty when the store is consistent.
    pub fn integrity_report(&self) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        {
            let mut stmt = self.conn.prepare("PRAGMA foreign_key_check")?;
            let mut rows = stmt.query([])?;
            while let Some(r) = rows.next()? {
                let table: String = r.get(0)?;
                let parent: String = r.get(2)?;
                problems.push(format!("{table} row references missing {parent}"));
            }
        }
        let mut stmt = self.conn.prepare("SELECT user_id FROM user")?;
        let users: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
        for user in users {
            let expected: BTreeSet<String> = self.annotations(&user)?.into_keys().collect();
            let mut on_disk = BTreeSet::new();
            if let Ok(entries) = fs::read_dir(self.labels_dir(&user)) {
                for e in entries.flatten() {
                    let name = e.file_name().to_string_lossy().into_owned();
                    if let Some(stem) = name.strip_suffix(".txt") {
                        on_disk.insert(stem.to_owned());
                    }
                }
            }
            for id in expected.symmetric_difference(&on_disk) {
                problems.push(format!("user {user}: label file and annotation rows disagree on {id}"));
            }
        }
        Ok(problems)
    }
}
