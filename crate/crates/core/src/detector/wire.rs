//! Newline-delimited JSON protocol between the engine and a detector process.
//!
//! One request per connection. Requests:
//!
//! ```text
//! {"op":"ping"}
//! {"op":"infer","model":3,"images":["a","b"]}
//! {"op":"train","parent":2,"manifest_path":"/tmp/m.json","config":{"epochs":50,"imgsz":640,"seed":42}}
//! ```
//!
//! `infer` answers with one line per requested image, in request order:
//! `{"image_id":"a","detections":[{"class":0,"box":[cx,cy,w,h],"conf":0.8}]}`.
//! `train` streams `{"epoch":1,"map50":..,"map50_95":..,"box_loss":..,"cls_loss":..}`
//! lines and ends with `{"done":true,"version":3}`. Any request may instead
//! end with `{"error":"...","kind":"..."}`. A `parent` of `null` trains from
//! the pretrained base. The manifest file holds a JSON object mapping image
//! ids to their boxes.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    best_epoch, unix_now, Detection, Detector, DetectorError, EpochMetrics, ModelVersion, TrainConfig, TrainManifest,
};
use crate::bbox::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireConfig {
    pub epochs: u32,
    pub imgsz: u32,
    pub seed: u64,
}

impl From<&TrainConfig> for WireConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            imgsz: c.image_size,
            seed: c.seed,
        }
    }
}

impl From<&WireConfig> for TrainConfig {
    fn from(c: &WireConfig) -> Self {
        Self {
            epochs: c.epochs,
            image_size: c.imgsz,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Ping,
    Infer {
        model: u32,
        images: Vec<String>,
    },
    Train {
        parent: Option<u32>,
        manifest_path: PathBuf,
        config: WireConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferLine {
    pub image_id: String,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: u32,
    pub map50: f64,
    pub map50_95: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneLine {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorLine {
    pub error: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OkLine {
    pub ok: bool,
}

/// Any line a detector may send back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Error(ErrorLine),
    Done(DoneLine),
    Epoch(EpochLine),
    Infer(InferLine),
    Ok(OkLine),
}

impl From<&EpochMetrics> for EpochLine {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            map50: m.map50,
            map50_95: m.map50_95,
            box_loss: m.box_loss,
            cls_loss: m.class_loss,
        }
    }
}

impl From<&EpochLine> for EpochMetrics {
    fn from(l: &EpochLine) -> Self {
        Self {
            epoch: l.epoch,
            map50: l.map50,
            map50_95: l.map50_95,
            box_loss: l.box_loss,
            class_loss: l.cls_loss,
        }
    }
}

impl From<&Detection> for WireDetection {
    fn from(d: &Detection) -> Self {
        Self {
            class: d.class_id,
            bbox: d.bbox.as_array(),
            conf: d.confidence,
        }
    }
}

impl WireDetection {
    pub fn into_detection(self, image_id: &str, model_version: u32) -> Detection {
        Detection {
            image_id: image_id.to_owned(),
            class_id: self.class,
            bbox: BBox::from_array(self.bbox),
            confidence: self.conf,
            model_version,
        }
    }
}

impl From<&DetectorError> for ErrorLine {
    fn from(e: &DetectorError) -> Self {
        let (kind, detail) = match e {
            DetectorError::BackendUnavailable(s) => ("backend_unavailable", s.clone()),
            DetectorError::TrainingFailed(s) => ("training_failed", s.clone()),
            DetectorError::ConcurrentTraining => ("concurrent_training", String::new()),
            DetectorError::UnknownModel(s) => ("unknown_model", s.clone()),
            DetectorError::EmptyManifest => ("empty_manifest", String::new()),
            DetectorError::UnknownClass(c) => ("unknown_class", c.to_string()),
            DetectorError::Protocol(s) => ("protocol", s.clone()),
        };
        Self {
            error: detail,
            kind: kind.to_owned(),
        }
    }
}

impl From<&ErrorLine> for DetectorError {
    fn from(l: &ErrorLine) -> Self {
        match l.kind.as_str() {
            "backend_unavailable" => Self::BackendUnavailable(l.error.clone()),
            "training_failed" => Self::TrainingFailed(l.error.clone()),
            "concurrent_training" => Self::ConcurrentTraining,
            "unknown_model" => Self::UnknownModel(l.error.clone()),
            "empty_manifest" => Self::EmptyManifest,
            "unknown_class" => l
                .error
                .parse()
                .map(Self::UnknownClass)
                .unwrap_or_else(|_| Self::Protocol(l.error.clone())),
            _ => Self::Protocol(format!("{}: {}", l.kind, l.error)),
        }
    }
}

pub fn encode_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("wire types always serialize");
    s.push('\n');
    s
}

pub fn decode_reply(line: &str) -> Result<Reply, DetectorError> {
    serde_json::from_str(line.trim_end()).map_err(|e| DetectorError::Protocol(format!("bad reply line: {e}")))
}

pub fn write_manifest(path: &Path, manifest: &TrainManifest) -> io::Result<()> {
    let body = serde_json::to_vec(&manifest.annotations)?;
    std::fs::write(path, body)
}

pub fn read_manifest(path: &Path) -> io::Result<TrainManifest> {
    let bytes = std::fs::read(path)?;
    let annotations = serde_json::from_slice(&bytes)?;
    Ok(TrainManifest { annotations })
}

fn unavailable(e: io::Error) -> DetectorError {
    DetectorError::BackendUnavailable(e.to_string())
}

/// Client for a detector reachable over TCP.
#[derive(Debug)]
pub struct RemoteDetector {
    addr: SocketAddr,
    manifest_dir: PathBuf,
    timeout: Option<Duration>,
    counter: AtomicU64,
}

impl RemoteDetector {
    pub fn new(addr: impl ToSocketAddrs, manifest_dir: impl Into<PathBuf>) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(Self {
            addr,
            manifest_dir: manifest_dir.into(),
            timeout: None,
            counter: AtomicU64::new(0),
        })
    }

    /// Read timeout for each reply line.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    fn open(&self, req: &Request) -> Result<BufReader<TcpStream>, DetectorError> {
        let mut stream = TcpStream::connect(self.addr).map_err(unavailable)?;
        stream.set_read_timeout(self.timeout).map_err(unavailable)?;
        stream.write_all(encode_line(req).as_bytes()).map_err(unavailable)?;
        stream.shutdown(Shutdown::Write).map_err(unavailable)?;
        Ok(BufReader::new(stream))
    }

    fn next_reply(reader: &mut BufReader<TcpStream>) -> Result<Reply, DetectorError> {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(unavailable)?;
        if n == 0 {
            return Err(DetectorError::BackendUnavailable(
                "connection closed mid-response".into(),
            ));
        }
        match decode_reply(&line)? {
            Reply::Error(e) => Err((&e).into()),
            r => Ok(r),
        }
    }
}

impl Detector for RemoteDetector {
    fn ping(&self) -> Result<(), DetectorError> {
        let mut r = self.open(&Request::Ping)?;
        match Self::next_reply(&mut r)? {
            Reply::Ok(OkLine { ok: true }) => Ok(()),
            other => Err(DetectorError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    fn train(
        &self,
        parent: Option<&ModelVersion>,
        manifest: &TrainManifest,
        config: &TrainConfig,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<ModelVersion, DetectorError> {
        if manifest.is_empty() {
            return Err(DetectorError::EmptyManifest);
        }
        std::fs::create_dir_all(&self.manifest_dir).map_err(unavailable)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self
            .manifest_dir
            .join(format!("manifest-{}-{n}.json", std::process::id()));
        write_manifest(&path, manifest).map_err(unavailable)?;
        let req = Request::Train {
            parent: parent.map(|p| p.version),
            manifest_path: path.clone(),
            config: config.into(),
        };
        let result = (|| {
            let mut r = self.open(&req)?;
            let mut epochs = Vec::new();
            loop {
                match Self::next_reply(&mut r)? {
                    Reply::Epoch(l) => {
                        let m = EpochMetrics::from(&l);
                        on_epoch(&m);
                        epochs.push(m);
                    }
                    Reply::Done(d) => {
                        let expected = super::next_version(parent);
                        let version = d.version.unwrap_or(expected);
                        if version != expected {
                            return Err(DetectorError::Protocol(format!(
                                "backend produced version {version}, expected {expected}"
                            )));
                        }
                        return Ok(ModelVersion {
                            version,
                            parent: parent.map(|p| p.version),
                            weights_ref: d.weights_ref.unwrap_or_else(|| format!("remote:v{version}")),
                            train_config: config.clone(),
                            created_at: unix_now(),
                            best_epoch: best_epoch(&epochs).cloned(),
                        });
                    }
                    other => {
                        return Err(DetectorError::Protocol(format!(
                            "unexpected reply during training: {other:?}"
                        )))
                    }
                }
            }
        })();
        let _ = std::fs::remove_file(&path);
        result
    }

    fn infer(&self, model: &ModelVersion, image_ids: &[String]) -> Result<Vec<Detection>, DetectorError> {
        let req = Request::Infer {
            model: model.version,
            images: image_ids.to_vec(),
        };
        let mut r = self.open(&req)?;
        let mut out = Vec::new();
        for expected in image_ids {
            match Self::next_reply(&mut r)? {
                Reply::Infer(line) if &line.image_id == expected => {
                    out.extend(
                        line.detections
                            .into_iter()
                            .map(|d| d.into_detection(expected, model.version)),
                    );
                }
                other => {
                    return Err(DetectorError::Protocol(format!(
                        "expected detections for {expected}, got {other:?}"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Serves any [`Detector`] over the wire protocol, one thread per
/// connection. The server keeps the models it trained so requests can refer
/// to them by version number.
pub struct DetectorServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

struct Shared {
    detector: Arc<dyn Detector>,
    models: Mutex<BTreeMap<u32, ModelVersion>>,
}

impl DetectorServer {
    pub fn spawn(addr: impl ToSocketAddrs, detector: Arc<dyn Detector>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Shared {
            detector,
            models: Mutex::new(BTreeMap::new()),
        });
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let shared = Arc::clone(&shared);
                std::thread::spawn(move || {
                    if let Err(e) = handle_conn(&shared, stream) {
                        log::debug!("detector connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::Release);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DetectorServer {
    fn drop(&mut self) {
        if self.handle.is_some() {
            self.stop_accepting();
        }
    }
}

fn handle_conn(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut out = io::BufWriter::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let req: Request = match serde_json::from_str(line.trim_end()) {
        Ok(r) => r,
        Err(e) => {
            let err = DetectorError::Protocol(format!("bad request: {e}"));
            out.write_all(encode_line(&ErrorLine::from(&err)).as_bytes())?;
            return out.flush();
        }
    };
    let send_err = |out: &mut io::BufWriter<TcpStream>, e: &DetectorError| -> io::Result<()> {
        out.write_all(encode_line(&ErrorLine::from(e)).as_bytes())?;
        out.flush()
    };
    match req {
        Request::Ping => match shared.detector.ping() {
            Ok(()) => out.write_all(encode_line(&OkLine { ok: true }).as_bytes())?,
            Err(e) => send_err(&mut out, &e)?,
        },
        Request::Infer { model, images } => {
            let found = shared.models.lock().expect("model registry").get(&model).cloned();
            let Some(m) = found else {
                return send_err(&mut out, &DetectorError::UnknownModel(format!("v{model}")));
            };
            match shared.detector.infer(&m, &images) {
                Ok(dets) => {
                    let mut per: BTreeMap<&str, Vec<WireDetection>> = BTreeMap::new();
                    for d in &dets {
                        per.entry(d.image_id.as_str()).or_default().push(d.into());
                    }
                    for id in &images {
                        let line = InferLine {
                            image_id: id.clone(),
                            detections: per.remove(id.as_str()).unwrap_or_default(),
                        };
                        out.write_all(encode_line(&line).as_bytes())?;
                    }
                }
                Err(e) => send_err(&mut out, &e)?,
            }
        }
        Request::Train {
            parent,
            manifest_path,
            config,
        } => {
            let parent = match parent {
                None => None,
                Some(p) => match shared.models.lock().expect("model registry").get(&p).cloned() {
                    Some(m) => Some(m),
                    None => return send_err(&mut out, &DetectorError::UnknownModel(format!("v{p}"))),
                },
            };
            let manifest = match read_manifest(&manifest_path) {
                Ok(m) => m,
                Err(e) => {
                    let err =
                        DetectorError::TrainingFailed(format!("cannot read manifest {}: {e}", manifest_path.display()));
                    return send_err(&mut out, &err);
                }
            };
            let mut write_failed = None;
            let result = shared
                .detector
                .train(parent.as_ref(), &manifest, &TrainConfig::from(&config), &mut |m| {
                    if write_failed.is_some() {
                        return;
                    }
                    let r = out
                        .write_all(encode_line(&EpochLine::from(m)).as_bytes())
                        .and_then(|_| out.flush());
                    if let Err(e) = r {
                        write_failed = Some(e);
                    }
                });
            if let Some(e) = write_failed {
                return Err(e);
            }
            match result {
                Ok(model) => {
                    let done = DoneLine {
                        done: true,
                        version: Some(model.version),
                        weights_ref: Some(model.weights_ref.clone()),
                    };
                    shared
                        .models
                        .lock()
                        .expect("model registry")
                        .insert(model.version, model);
                    out.write_all(encode_line(&done).as_bytes())?;
                }
                Err(e) => send_err(&mut out, &e)?,
            }
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shapes_match_protocol() {
        let r = Request::Train {
            parent: Some(2),
            manifest_path: "/tmp/m.json".into(),
            config: (&TrainConfig::default()).into(),
        };
        let v: serde_json::Value = serde_json::from_str(&encode_line(&r)).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"op":"train","parent":2,"manifest_path":"/tmp/m.json",
                "config":{"epochs":50,"imgsz":640,"seed":42}})
        );
        let r: Request = serde_json::from_str(r#"{"op":"infer","model":3,"images":["a"]}"#).unwrap();
        assert_eq!(
            r,
            Request::Infer {
                model: 3,
                images: vec!["a".into()]
            }
        );
    }

    #[test]
    fn replies_decode_by_shape() {
        let l = r#"{"image_id":"x","detections":[{"class":1,"box":[0.5,0.5,0.2,0.2],"conf":0.7}]}"#;
        assert!(matches!(decode_reply(l).unwrap(), Reply::Infer(_)));
        let l = r#"{"epoch":3,"map50":0.1,"map50_95":0.05,"box_loss":1.0,"cls_loss":2.0}"#;
        assert!(matches!(decode_reply(l).unwrap(), Reply::Epoch(_)));
        assert_eq!(
            decode_reply(r#"{"done":true,"version":4}"#).unwrap(),
            Reply::Done(DoneLine {
                done: true,
                version: Some(4),
                weights_ref: None
            })
        );
        assert!(matches!(
            decode_reply(r#"{"error":"busy","kind":"concurrent_training"}"#).unwrap(),
            Reply::Error(_)
        ));
        assert!(decode_reply("not json").is_err());
    }

    #[test]
    fn errors_round_trip() {
        for e in [
            DetectorError::BackendUnavailable("x".into()),
            DetectorError::TrainingFailed("oom".into()),
            DetectorError::ConcurrentTraining,
            DetectorError::UnknownModel("v9".into()),
            DetectorError::EmptyManifest,
            DetectorError::UnknownClass(7),
        ] {
            assert_eq!(DetectorError::from(&ErrorLine::from(&e)), e);
        }
    }
}
