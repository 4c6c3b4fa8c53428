//! YOLO label files, dataset layout loading and split bookkeeping.
//!
//! A dataset root looks like
//!
//! ```text
//! <root>/classes.txt
//! <root>/{train,val,test}/images/*.{jpg,png}
//! <root>/{train,val,test}/labels/*.txt
//! ```
//!
//! The `train` split is the active-learning pool. Pool label files may be
//! absent; when present they are only read by simulation oracles and by the
//! initial seed-set training.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: expected 5 numeric fields `class cx cy w h`")]
    MalformedLine { line: usize },
    #[error("line {line}: coordinate outside [0,1] or non-positive size")]
    OutOfRange { line: usize },
    #[error("split directory missing: {0}")]
    MissingSplit(PathBuf),
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: u32,
    #[serde(flatten)]
    pub bbox: BBox,
}

impl GroundTruthBox {
    pub const fn new(class_id: u32, bbox: BBox) -> Self {
        Self { class_id, bbox }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainPool, Split::Validation, Split::Test];

    /// Directory name under the dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::TrainPool => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainPool => "train_pool",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Where an image stands in the labeling loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum LabelStatus {
    Unlabeled,
    Seed,
    Labeled { iteration: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub split: Split,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub image_path: Option<PathBuf>,
    /// Row index into the embedding matrix, if one has been attached.
    pub embedding_ref: Option<usize>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, split: Split) -> Self {
        Self {
            image_id: image_id.into(),
            split,
            width: None,
            height: None,
            image_path: None,
            embedding_ref: None,
        }
    }

    pub fn with_dims(mut self, width: u32, height: u32) -> Self {
        self.width = Some(width);
        self.height = Some(height);
        self
    }
}

/// The canonical image registry. Immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    pub classes: Vec<String>,
    pub images: BTreeMap<String, ImageRecord>,
    pub splits: BTreeMap<Split, BTreeSet<String>>,
    /// Ground truth for every image whose label file was found.
    pub labels: BTreeMap<String, Vec<GroundTruthBox>>,
}

impl DatasetRegistry {
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    /// Adds an image to its split. Ids must be unique across the registry.
    pub fn insert(&mut self, record: ImageRecord) -> Result<(), DatasetError> {
        if self.images.contains_key(&record.image_id) {
            return Err(DatasetError::DuplicateImageId(record.image_id));
        }
        self.splits
            .entry(record.split)
            .or_default()
            .insert(record.image_id.clone());
        self.images.insert(record.image_id.clone(), record);
        Ok(())
    }

    pub fn set_labels(&mut self, image_id: impl Into<String>, boxes: Vec<GroundTruthBox>) {
        self.labels.insert(image_id.into(), boxes);
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.images.get(image_id).map(|r| r.split)
    }

    pub fn is_pool(&self, image_id: &str) -> bool {
        self.split_of(image_id) == Some(Split::TrainPool)
    }

    /// Ids of one split in lexicographic order.
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.splits
            .get(&split)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.get(&split).map_or(0, BTreeSet::len)
    }

    /// `(train_pool, validation, test)` sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.count(Split::TrainPool),
            self.count(Split::Validation),
            self.count(Split::Test),
        )
    }

    pub fn labels_of(&self, image_id: &str) -> Option<&[GroundTruthBox]> {
        self.labels.get(image_id).map(Vec::as_slice)
    }

    /// Ground truth for every image of a split; images without labels map to
    /// an empty list.
    pub fn ground_truth(&self, split: Split) -> BTreeMap<String, Vec<GroundTruthBox>> {
        self.ids(split)
            .into_iter()
            .map(|id| {
                let boxes = self.labels.get(&id).cloned().unwrap_or_default();
                (id, boxes)
            })
            .collect()
    }
}

/// Parses the contents of one YOLO label file.
///
/// Values are returned as written. Lines that are empty or whitespace-only are
/// skipped; line numbers in errors are 1-based.
pub fn parse_yolo_label(text: &str) -> Result<Vec<GroundTruthBox>, DatasetError> {
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 5 {
            return Err(DatasetError::MalformedLine { line });
        }
        let class_id = parse_class(tokens[0]).ok_or(DatasetError::MalformedLine { line })?;
        let mut v = [0.0f64; 4];
        for (slot, tok) in v.iter_mut().zip(&tokens[1..]) {
            *slot = tok.parse::<f64>().map_err(|_| DatasetError::MalformedLine { line })?;
        }
        let [cx, cy, w, h] = v;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(cx) && unit(cy) && unit(w) && unit(h)) || w <= 0.0 || h <= 0.0 {
            return Err(DatasetError::OutOfRange { line });
        }
        boxes.push(GroundTruthBox::new(class_id, BBox::new(cx, cy, w, h)));
    }
    Ok(boxes)
}

fn parse_class(tok: &str) -> Option<u32> {
    if let Ok(c) = tok.parse::<u32>() {
        return Some(c);
    }
    // Some exporters write the class as a float.
    let f = tok.parse::<f64>().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64).then_some(f as u32)
}

/// Writes boxes as YOLO text, one line per box, six decimals per coordinate.
pub fn serialize_yolo_label(boxes: &[GroundTruthBox]) -> String {
    let mut out = String::new();
    for (i, b) in boxes.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            b.class_id, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h
        );
    }
    out
}

pub fn read_label_file(path: &Path) -> Result<Vec<GroundTruthBox>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_yolo_label(&text)
}

pub fn write_label_file(path: &Path, boxes: &[GroundTruthBox]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, serialize_yolo_label(boxes)).map_err(io_err(path))
}

pub fn read_class_list(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Loads a dataset root into a registry.
///
/// Class ids follow line order in `classes.txt`. Every image file becomes a
/// record; image dimensions are read from the file header only.
pub fn load_dataset_manifest(root: &Path) -> Result<DatasetRegistry, DatasetError> {
    let classes = read_class_list(&root.join("classes.txt"))?;
    let mut registry = DatasetRegistry::new(classes);

    for split in Split::ALL {
        let images_dir = root.join(split.dir_name()).join("images");
        if !images_dir.is_dir() {
            return Err(DatasetError::MissingSplit(images_dir));
        }
        let labels_dir = root.join(split.dir_name()).join("labels");

        let mut files = Vec::new();
        for entry in fs::read_dir(&images_dir).map_err(io_err(&images_dir))? {
            let path = entry.map_err(io_err(&images_dir))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image {
                files.push(path);
            }
        }
        files.sort();

        for path in files {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let mut record = ImageRecord::new(stem, split);
            if let Ok(size) = imagesize::size(&path) {
                if size.width > 0 && size.height > 0 {
                    record = record.with_dims(size.width as u32, size.height as u32);
                }
            }
            record.image_path = Some(path.clone());
            let label_path = labels_dir.join(format!("{stem}.txt"));
            let labels = if label_path.is_file() {
                Some(read_label_file(&label_path)?)
            } else {
                None
            };
            let id = record.image_id.clone();
            registry.insert(record)?;
            if let Some(boxes) = labels {
                registry.set_labels(id, boxes);
            }
        }
    }
    Ok(registry)
}

/// A single integrity problem found by [`validate_splits`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Violation {
    SplitOverlap { image_id: String, splits: Vec<Split> },
    MissingDimensions { image_id: String },
    EmptyClassList,
    MissingLabels { image_id: String, split: Split },
    ClassOutOfRange { image_id: String, class_id: u32 },
    UnregisteredImage { image_id: String, split: Split },
}

/// Checks split disjointness and record completeness. An empty report means
/// the registry satisfies its invariants.
pub fn validate_splits(registry: &DatasetRegistry) -> Vec<Violation> {
    let mut report = Vec::new();
    if registry.classes.is_empty() {
        report.push(Violation::EmptyClassList);
    }

    let mut membership: BTreeMap<&str, Vec<Split>> = BTreeMap::new();
    for (split, ids) in &registry.splits {
        for id in ids {
            membership.entry(id.as_str()).or_default().push(*split);
        }
    }
    for (id, splits) in &membership {
        if splits.len() > 1 {
            report.push(Violation::SplitOverlap {
                image_id: (*id).to_owned(),
                splits: splits.clone(),
            });
        }
        if !registry.images.contains_key(*id) {
            for split in splits {
                report.push(Violation::UnregisteredImage {
                    image_id: (*id).to_owned(),
                    split: *split,
                });
            }
        }
    }

    for record in registry.images.values() {
        let dims_ok = matches!((record.width, record.height), (Some(w), Some(h)) if w > 0 && h > 0);
        if !dims_ok {
            report.push(Violation::MissingDimensions {
                image_id: record.image_id.clone(),
            });
        }
        if record.split != Split::TrainPool && !registry.labels.contains_key(&record.image_id) {
            report.push(Violation::MissingLabels {
                image_id: record.image_id.clone(),
                split: record.split,
            });
        }
    }

    let n_classes = registry.classes.len() as u32;
    for (id, boxes) in &registry.labels {
        for b in boxes {
            if b.class_id >= n_classes {
                report.push(Violation::ClassOutOfRange {
                    image_id: id.clone(),
                    class_id: b.class_id,
                });
            }
        }
    }
    report
}
