//! Scene registry and interactive sessions, independent of the transport.
//!
//! Every method is blocking: backends may be child processes. Each session
//! sits behind its own mutex so its mutations are serialized while other
//! sessions proceed.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use click3d_core::annotator::{RngSeed, SessionConfig};
use click3d_core::clickmap::{encode_clicks, Click, Polarity, DEFAULT_EPSILON};
use click3d_core::harness::{BackendSpec, DEFAULT_BUDGETS};
use click3d_core::metrics::iou;
use click3d_core::rle::MaskRuns;
use click3d_core::scene_io::{build_knn_graph, load_scene, save_scene, Scene};
use click3d_core::segmenter::{
    segment, ConstantBackend, ExternalBackend, ExternalInit, GeodesicBackend, GeodesicConfig,
    OracleBackend, SegmentRequest, SegmenterBackend, SoftMask, WeightedGraph,
};
use click3d_core::trace::{SessionStatus, SessionTrace, TraceHeader, TraceStep};

pub const DEFAULT_CHUNK_POINTS: usize = 65_536;
pub const HISTORY_DEPTH: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{0}")]
    Internal(String),
}

impl From<click3d_core::Error> for ServiceError {
    fn from(e: click3d_core::Error) -> Self {
        match e {
            click3d_core::Error::InvalidArgument(m) => ServiceError::BadRequest(m),
            click3d_core::Error::Backend(b) => ServiceError::Backend(b.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Uploaded scenes are stored under `scenes/`, finalized results under
    /// `results/`.
    pub data_dir: PathBuf,
    /// Backends clients may request by name. External commands are only
    /// reachable through this table.
    pub backends: BTreeMap<String, BackendSpec>,
    pub default_backend: String,
    pub default_epsilon: f64,
    pub chunk_points: usize,
    pub backend_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let mut backends = BTreeMap::new();
        backends.insert(
            "ref".to_string(),
            BackendSpec::Reference(GeodesicConfig::default()),
        );
        Self {
            data_dir: data_dir.into(),
            backends,
            default_backend: "ref".to_string(),
            default_epsilon: DEFAULT_EPSILON,
            chunk_points: DEFAULT_CHUNK_POINTS,
            backend_timeout: Duration::from_secs(60),
        }
    }
}

struct SceneEntry {
    scene: Arc<Scene>,
    /// Manifest in the internal format, handed to external backends.
    manifest: PathBuf,
    graphs: Mutex<HashMap<(usize, u64), Arc<WeightedGraph>>>,
}

impl SceneEntry {
    fn graph(&self, config: &GeodesicConfig) -> ServiceResult<Arc<WeightedGraph>> {
        let key = (config.k, config.color_weight.to_bits());
        let mut graphs = self.graphs.lock().unwrap();
        if let Some(g) = graphs.get(&key) {
            return Ok(Arc::clone(g));
        }
        let knn = build_knn_graph(&self.scene.cloud, config.k)?;
        let g = Arc::new(WeightedGraph::new(
            &self.scene.cloud,
            &knn,
            config.color_weight,
        )?);
        graphs.insert(key, Arc::clone(&g));
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub n_points: usize,
    pub has_color: bool,
    pub has_labels: bool,
    pub instance_ids: Vec<u32>,
    pub bounds: [[f64; 3]; 2],
    pub chunk_points: usize,
    pub n_chunks: usize,
}

/// One chunk of a scene, packed little-endian: `n_points` xyz float32
/// triples, then (if `has_color`) `n_points` rgb uint8 triples, then (if
/// `has_scores`) `n_points` float32 scores of the requested session.
#[derive(Debug, Clone)]
pub struct SceneChunk {
    pub index: usize,
    pub first_point: usize,
    pub n_points: usize,
    pub has_color: bool,
    pub has_scores: bool,
    pub mask_version: Option<u64>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionPhase {
    Active,
    Finalized,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CreateSession {
    pub scene_id: String,
    /// Name from the server's backend table; the default when absent.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Ground-truth instance the annotator is asked to segment, if known.
    #[serde(default)]
    pub instance_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub scene_id: String,
    pub backend: String,
    pub epsilon: f64,
    pub instance_id: Option<u32>,
    pub status: SessionPhase,
    pub mask_version: u64,
    pub clicks: Vec<Click>,
    pub supports_adaptation: bool,
    /// Undo recomputes from the remaining clicks but cannot retract what an
    /// adaptive backend already learned.
    pub undo_is_lossy: bool,
}

/// Where a click goes: an explicit point, or a position snapped to the
/// nearest point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClickTarget {
    Point(usize),
    Position([f64; 3]),
}

#[derive(Debug, Clone)]
pub struct MaskState {
    pub mask_version: u64,
    pub mask: Arc<SoftMask>,
}

#[derive(Debug, Clone)]
pub struct ClickOutcome {
    pub click: Click,
    /// Distance from the requested position to the snapped point.
    pub snap_distance: f64,
    pub state: MaskState,
}

#[derive(Debug, Clone)]
pub struct UndoOutcome {
    pub removed: Click,
    pub lossy: bool,
    pub state: MaskState,
}

/// Stored outcome of a finalized session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub session_id: String,
    pub scene_id: String,
    pub backend: String,
    /// Ground-truth instance the IoU refers to: the requested one, or the
    /// best-matching labeled instance.
    pub instance_id: Option<u32>,
    pub iou: Option<f64>,
    pub mask_version: u64,
    pub n_points: usize,
    pub clicks: Vec<Click>,
    pub mask: MaskRuns,
    /// Trace file written for labeled scenes, relative to the results dir.
    pub trace_file: Option<String>,
}

struct StepRecord {
    click: Click,
    mask: MaskRuns,
    confidence: Option<f64>,
}

struct SessionState {
    info: SessionInfo,
    scene: Arc<SceneEntry>,
    backend: Box<dyn SegmenterBackend>,
    steps: Vec<StepRecord>,
    current: Arc<SoftMask>,
    history: VecDeque<(u64, Arc<SoftMask>)>,
    result: Option<FinalResult>,
}

impl SessionState {
    fn clicks(&self) -> Vec<Click> {
        self.steps.iter().map(|s| s.click).collect()
    }

    fn ensure_active(&self) -> ServiceResult<()> {
        match self.info.status {
            SessionPhase::Active => Ok(()),
            SessionPhase::Finalized => Err(ServiceError::Conflict(format!(
                "session {} is finalized",
                self.info.session_id
            ))),
        }
    }

    fn run_backend(&mut self, clicks: &[Click], adapt: bool) -> ServiceResult<SoftMask> {
        let cloud = &self.scene.scene.cloud;
        let channels = encode_clicks(cloud, clicks, self.info.epsilon)?;
        let request = SegmentRequest {
            session: &self.info.session_id,
            cloud,
            clicks,
            channels: &channels,
        };
        if adapt && !clicks.is_empty() {
            self.backend
                .adapt(&self.info.session_id, clicks)
                .map_err(|e| ServiceError::Backend(e.to_string()))?;
        }
        segment(self.backend.as_mut(), &request).map_err(|e| ServiceError::Backend(e.to_string()))
    }

    fn commit(&mut self, mask: SoftMask) -> MaskState {
        self.info.mask_version += 1;
        let mask = Arc::new(mask);
        self.current = Arc::clone(&mask);
        if self.history.len() == HISTORY_DEPTH {
            self.history.pop_front();
        }
        self.history
            .push_back((self.info.mask_version, Arc::clone(&mask)));
        self.info.clicks = self.clicks();
        MaskState {
            mask_version: self.info.mask_version,
            mask,
        }
    }
}

pub struct SessionManager {
    config: ServiceConfig,
    scenes: RwLock<HashMap<String, Arc<SceneEntry>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    next_session: AtomicU64,
}

impl SessionManager {
    pub fn new(config: ServiceConfig) -> ServiceResult<Self> {
        if !config.backends.contains_key(&config.default_backend) {
            return Err(ServiceError::BadRequest(format!(
                "default backend '{}' is not configured",
                config.default_backend
            )));
        }
        if config.chunk_points == 0 {
            return Err(ServiceError::BadRequest(
                "chunk size must be positive".into(),
            ));
        }
        fs::create_dir_all(config.data_dir.join("scenes"))?;
        fs::create_dir_all(config.data_dir.join("results").join("traces"))?;
        Ok(Self {
            config,
            scenes: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn results_dir(&self) -> PathBuf {
        self.config.data_dir.join("results")
    }

    /// Registers a scene, storing it in the internal format unless it was
    /// loaded from `manifest` already.
    pub fn add_scene(&self, scene: Scene, manifest: Option<PathBuf>) -> ServiceResult<SceneMeta> {
        let id = scene.scene_id.clone();
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(ServiceError::BadRequest(format!(
                "scene id '{id}' must be non-empty and use only letters, digits, '-', '_' and '.'"
            )));
        }
        if self.scenes.read().unwrap().contains_key(&id) {
            return Err(ServiceError::Conflict(format!("scene {id} already exists")));
        }
        let manifest = match manifest {
            Some(p) => p,
            None => {
                let p = self
                    .config
                    .data_dir
                    .join("scenes")
                    .join(format!("{id}.json"));
                save_scene(&scene, &p)?;
                p
            }
        };
        let entry = Arc::new(SceneEntry {
            scene: Arc::new(scene),
            manifest,
            graphs: Mutex::new(HashMap::new()),
        });
        // Build the default reference graph up front so the first click does
        // not pay for it.
        if let Some(BackendSpec::Reference(g)) =
            self.config.backends.get(&self.config.default_backend)
        {
            entry.graph(g)?;
        }
        let mut scenes = self.scenes.write().unwrap();
        if scenes.contains_key(&id) {
            return Err(ServiceError::Conflict(format!("scene {id} already exists")));
        }
        scenes.insert(id.clone(), entry);
        drop(scenes);
        self.scene_meta(&id)
    }

    /// Registers every `*.json` scene manifest in `dir`.
    pub fn load_scene_dir(&self, dir: &Path) -> ServiceResult<Vec<SceneMeta>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .filter(|p| p.file_name().is_some_and(|n| n != "classes.json"))
            .collect();
        paths.sort();
        let mut metas = Vec::new();
        for p in paths {
            match load_scene(&p) {
                Ok(scene) => metas.push(self.add_scene(scene, Some(p))?),
                Err(e) => tracing::warn!("skipping {}: {e}", p.display()),
            }
        }
        Ok(metas)
    }

    fn scene(&self, scene_id: &str) -> ServiceResult<Arc<SceneEntry>> {
        self.scenes
            .read()
            .unwrap()
            .get(scene_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown scene {scene_id}")))
    }

    pub fn scene_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.scenes.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn scene_meta(&self, scene_id: &str) -> ServiceResult<SceneMeta> {
        let entry = self.scene(scene_id)?;
        let scene = &entry.scene;
        let (lo, hi) = scene.cloud.bounds();
        Ok(SceneMeta {
            scene_id: scene.scene_id.clone(),
            n_points: scene.len(),
            has_color: scene.cloud.has_color(),
            has_labels: scene.labels.is_some(),
            instance_ids: scene
                .labels
                .as_ref()
                .map(|l| l.instance_ids().collect())
                .unwrap_or_default(),
            bounds: [lo, hi],
            chunk_points: self.config.chunk_points,
            n_chunks: scene.len().div_ceil(self.config.chunk_points),
        })
    }

    pub fn scene_chunk(
        &self,
        scene_id: &str,
        index: usize,
        session_id: Option<&str>,
    ) -> ServiceResult<SceneChunk> {
        let entry = self.scene(scene_id)?;
        let cloud = &entry.scene.cloud;
        let size = self.config.chunk_points;
        let n_chunks = cloud.len().div_ceil(size);
        if index >= n_chunks {
            return Err(ServiceError::NotFound(format!(
                "chunk {index} out of range (scene has {n_chunks})"
            )));
        }
        let scores = match session_id {
            Some(id) => {
                let session = self.session(id)?;
                let s = session.lock().unwrap();
                if s.info.scene_id != scene_id {
                    return Err(ServiceError::BadRequest(format!(
                        "session {id} belongs to scene {}",
                        s.info.scene_id
                    )));
                }
                Some((s.info.mask_version, Arc::clone(&s.current)))
            }
            None => None,
        };
        let first = index * size;
        let end = (first + size).min(cloud.len());
        let n = end - first;
        let mut body = Vec::with_capacity(n * 16);
        for p in &cloud.positions()[first..end] {
            for v in p {
                body.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        if let Some(colors) = cloud.colors() {
            for c in &colors[first..end] {
                body.extend(c.iter().map(|v| (v * 255.0).round() as u8));
            }
        }
        if let Some((_, mask)) = &scores {
            for s in &mask.scores[first..end] {
                body.extend_from_slice(&s.to_le_bytes());
            }
        }
        Ok(SceneChunk {
            index,
            first_point: first,
            n_points: n,
            has_color: cloud.has_color(),
            has_scores: scores.is_some(),
            mask_version: scores.map(|s| s.0),
            body,
        })
    }

    fn session(&self, session_id: &str) -> ServiceResult<Arc<Mutex<SessionState>>> {
        self.sessions
            .read()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {session_id}")))
    }

    fn make_backend(
        &self,
        spec: &BackendSpec,
        entry: &SceneEntry,
        epsilon: f64,
        instance_id: Option<u32>,
    ) -> ServiceResult<Box<dyn SegmenterBackend>> {
        let scene = &entry.scene;
        Ok(match spec {
            BackendSpec::Reference(g) => {
                Box::new(GeodesicBackend::from_weighted(entry.graph(g)?, *g)?)
            }
            BackendSpec::Oracle => {
                let gt = instance_id
                    .and_then(|id| scene.labels.as_ref()?.mask(id))
                    .ok_or_else(|| {
                        ServiceError::BadRequest(
                            "the oracle backend needs a labeled instance_id".into(),
                        )
                    })?;
                Box::new(OracleBackend::new(gt))
            }
            BackendSpec::Empty => Box::new(ConstantBackend::empty()),
            BackendSpec::External(cmd) => {
                let init = ExternalInit {
                    n_points: scene.len(),
                    channels: scene.cloud.channels(),
                    epsilon,
                    scene_blob: entry.manifest.clone(),
                };
                let backend = ExternalBackend::connect(cmd, &init, self.config.backend_timeout)
                    .map_err(|e| ServiceError::Backend(e.to_string()))?;
                if backend.capabilities().needs_color && !scene.cloud.has_color() {
                    return Err(ServiceError::BadRequest(
                        "backend needs color but the scene has none".into(),
                    ));
                }
                Box::new(backend)
            }
        })
    }

    pub fn create_session(&self, request: &CreateSession) -> ServiceResult<SessionInfo> {
        let entry = self.scene(&request.scene_id)?;
        let backend_name = request
            .backend
            .clone()
            .unwrap_or_else(|| self.config.default_backend.clone());
        let spec =
            self.config.backends.get(&backend_name).ok_or_else(|| {
                ServiceError::BadRequest(format!("unknown backend '{backend_name}'"))
            })?;
        let epsilon = request.epsilon.unwrap_or(self.config.default_epsilon);
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ServiceError::BadRequest(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if let Some(id) = request.instance_id {
            if !entry.scene.labels.as_ref().is_some_and(|l| l.contains(id)) {
                return Err(ServiceError::BadRequest(format!(
                    "scene has no labeled instance {id}"
                )));
            }
        }
        let backend = self.make_backend(spec, &entry, epsilon, request.instance_id)?;
        let caps = backend.capabilities();
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        let session_id = format!("s{n:06}");
        let info = SessionInfo {
            session_id: session_id.clone(),
            scene_id: request.scene_id.clone(),
            backend: backend_name,
            epsilon,
            instance_id: request.instance_id,
            status: SessionPhase::Active,
            mask_version: 0,
            clicks: Vec::new(),
            supports_adaptation: caps.supports_adaptation,
            undo_is_lossy: caps.supports_adaptation,
        };
        let empty = Arc::new(SoftMask::zeros(entry.scene.len()));
        let state = SessionState {
            info: info.clone(),
            scene: entry,
            backend,
            steps: Vec::new(),
            current: Arc::clone(&empty),
            history: VecDeque::from([(0, empty)]),
            result: None,
        };
        self.sessions
            .write()
            .unwrap()
            .insert(session_id, Arc::new(Mutex::new(state)));
        Ok(info)
    }

    pub fn session_info(&self, session_id: &str) -> ServiceResult<SessionInfo> {
        Ok(self.session(session_id)?.lock().unwrap().info.clone())
    }

    pub fn add_click(
        &self,
        session_id: &str,
        target: ClickTarget,
        polarity: Polarity,
    ) -> ServiceResult<ClickOutcome> {
        let session = self.session(session_id)?;
        let mut s = session.lock().unwrap();
        s.ensure_active()?;
        let cloud = &s.scene.scene.cloud;
        let (index, snap_distance) = match target {
            ClickTarget::Point(i) if i < cloud.len() => (i, 0.0),
            ClickTarget::Point(i) => {
                return Err(ServiceError::BadRequest(format!(
                    "point {i} out of range (scene has {} points)",
                    cloud.len()
                )))
            }
            ClickTarget::Position(p) if p.iter().all(|v| v.is_finite()) => {
                let i = cloud.nearest_point(p);
                let q = cloud.positions()[i];
                let d = ((0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>()).sqrt();
                (i, d)
            }
            ClickTarget::Position(_) => {
                return Err(ServiceError::BadRequest(
                    "click position must be finite".into(),
                ))
            }
        };
        let click = Click::on_point(cloud, index, polarity, s.steps.len() as u32 + 1);
        let mut clicks = s.clicks();
        clicks.push(click);
        let adapt = s.info.supports_adaptation;
        let mask = s.run_backend(&clicks, adapt)?;
        let binary = mask.binary();
        s.steps.push(StepRecord {
            click,
            mask: MaskRuns::encode(&binary),
            confidence: mask.confidence(),
        });
        let state = s.commit(mask);
        Ok(ClickOutcome {
            click,
            snap_distance,
            state,
        })
    }

    /// Removes the last click and recomputes the mask from the rest.
    pub fn undo(&self, session_id: &str) -> ServiceResult<UndoOutcome> {
        let session = self.session(session_id)?;
        let mut s = session.lock().unwrap();
        s.ensure_active()?;
        let Some(last) = s.steps.last().map(|r| r.click) else {
            return Err(ServiceError::Conflict("nothing to undo".into()));
        };
        let mut clicks = s.clicks();
        clicks.pop();
        // Adaptive backends are not re-trained on undo.
        let mask = s.run_backend(&clicks, false)?;
        s.steps.pop();
        let lossy = s.info.undo_is_lossy;
        let state = s.commit(mask);
        Ok(UndoOutcome {
            removed: last,
            lossy,
            state,
        })
    }

    /// The current mask, or the one at `version` while it is still in the
    /// history ring.
    pub fn mask(&self, session_id: &str, version: Option<u64>) -> ServiceResult<MaskState> {
        let session = self.session(session_id)?;
        let s = session.lock().unwrap();
        match version {
            None => Ok(MaskState {
                mask_version: s.info.mask_version,
                mask: Arc::clone(&s.current),
            }),
            Some(v) if v > s.info.mask_version => Err(ServiceError::NotFound(format!(
                "mask version {v} does not exist yet (current {})",
                s.info.mask_version
            ))),
            Some(v) => s
                .history
                .iter()
                .find(|(hv, _)| *hv == v)
                .map(|(hv, m)| MaskState {
                    mask_version: *hv,
                    mask: Arc::clone(m),
                })
                .ok_or_else(|| {
                    ServiceError::NotFound(format!("mask version {v} is no longer retained"))
                }),
        }
    }

    /// Finalizes the session and persists its result; repeated calls return
    /// the stored result.
    pub fn finalize(&self, session_id: &str) -> ServiceResult<FinalResult> {
        let session = self.session(session_id)?;
        let mut s = session.lock().unwrap();
        if let Some(result) = &s.result {
            return Ok(result.clone());
        }
        let scene = Arc::clone(&s.scene.scene);
        let n = scene.len();
        let final_mask = s.current.binary();
        let gt_choice = match (&scene.labels, s.info.instance_id) {
            (Some(labels), Some(id)) => Some((id, labels.mask(id).unwrap())),
            (Some(labels), None) => {
                let mut best: Option<(u32, Vec<bool>, f64)> = None;
                for id in labels.instance_ids() {
                    let gt = labels.mask(id).unwrap();
                    let v = iou(&gt, &final_mask)?;
                    if best.as_ref().is_none_or(|b| v > b.2) {
                        best = Some((id, gt, v));
                    }
                }
                best.map(|(id, gt, _)| (id, gt))
            }
            (None, _) => None,
        };

        let results = self.results_dir();
        let mut trace_file = None;
        let mut final_iou = None;
        if let Some((instance_id, gt)) = &gt_choice {
            final_iou = Some(iou(gt, &final_mask)?);
            let config = SessionConfig {
                epsilon: s.info.epsilon,
                ..SessionConfig::default()
            };
            let mut header = TraceHeader::new(
                scene.scene_id.clone(),
                *instance_id,
                s.info.backend.clone(),
                RngSeed(0),
                config,
                DEFAULT_BUDGETS.to_vec(),
            );
            header.source = "human".to_string();
            header.n_points = n;
            header.gt = MaskRuns::encode(gt);
            let mut steps = Vec::with_capacity(s.steps.len());
            for (k, r) in s.steps.iter().enumerate() {
                let pred = r.mask.decode(n).expect("stored masks fit the scene");
                let (n_fn, n_fp) = gt.iter().zip(&pred).fold((0, 0), |(f_n, f_p), (&g, &p)| {
                    (f_n + usize::from(g && !p), f_p + usize::from(!g && p))
                });
                steps.push(TraceStep {
                    step: k as u32 + 1,
                    click: r.click,
                    iou: iou(gt, &pred)?,
                    n_fn_points: n_fn,
                    n_fp_points: n_fp,
                    confidence: r.confidence,
                    mask: r.mask.clone(),
                });
            }
            let trace = SessionTrace {
                header,
                steps,
                status: SessionStatus::Finalized,
                abort_reason: None,
            };
            let name = format!("traces/{}.jsonl", s.info.session_id);
            trace.write(&results.join(&name))?;
            trace_file = Some(name);
        }
        let result = FinalResult {
            session_id: s.info.session_id.clone(),
            scene_id: scene.scene_id.clone(),
            backend: s.info.backend.clone(),
            instance_id: gt_choice.map(|(id, _)| id),
            iou: final_iou,
            mask_version: s.info.mask_version,
            n_points: n,
            clicks: s.clicks(),
            mask: MaskRuns::encode(&final_mask),
            trace_file,
        };
        fs::write(
            results.join(format!("{}.json", s.info.session_id)),
            serde_json::to_vec_pretty(&result)
                .map_err(|e| ServiceError::Internal(e.to_string()))?,
        )?;
        s.info.status = SessionPhase::Finalized;
        s.result = Some(result.clone());
        Ok(result)
    }
}
