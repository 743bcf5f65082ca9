//! Dataset-scale evaluation: runs one simulated session per labeled instance,
//! writes traces, and aggregates them into reports. Replay recomputes the
//! same reports from trace files alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{run_simulated_session, RngSeed, SessionConfig};
use crate::metrics::{aggregate, dataset_ap, ApSummary, ClassMap, MetricsReport, ScoredScene};
use crate::scene_io::{
    build_knn_graph, load_ply, load_scene, save_scene, voxelize, Scene, VoxelGrid,
};
use crate::segmenter::{
    BackendError, ConstantBackend, ExternalBackend, ExternalInit, GeodesicBackend, GeodesicConfig,
    OracleBackend, SegmenterBackend, WeightedGraph,
};
use crate::trace::{read_trace, SessionStatus, SessionTrace, TraceHeader};
use crate::{Error, Result};

pub const DEFAULT_BUDGETS: [u32; 6] = [1, 2, 3, 5, 10, 20];
pub const DEFAULT_MIN_POINTS: usize = 10;
pub const CLASSES_FILE: &str = "classes.json";

/// Which segmenter drives the sessions.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    /// The geodesic reference segmenter.
    Reference(GeodesicConfig),
    /// Returns the ground truth; a harness sanity check.
    Oracle,
    /// Always returns an empty mask.
    Empty,
    /// A child process speaking the line protocol.
    External(String),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref" => Ok(BackendSpec::Reference(GeodesicConfig::default())),
            "oracle" => Ok(BackendSpec::Oracle),
            "empty" => Ok(BackendSpec::Empty),
            _ => match s.strip_prefix("cmd:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(BackendSpec::External(cmd.to_string())),
                _ => Err(Error::arg(format!(
                    "unknown backend '{s}' (expected ref, oracle, empty or cmd:\"...\")"
                ))),
            },
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Reference(_) => f.write_str("ref"),
            BackendSpec::Oracle => f.write_str("oracle"),
            BackendSpec::Empty => f.write_str("empty"),
            BackendSpec::External(cmd) => write!(f, "cmd:{cmd}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceFilter {
    #[default]
    All,
    /// Instances whose class is in the seen list.
    Seen,
    /// Instances with a known class outside the seen list.
    Unseen,
}

impl FromStr for InstanceFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(InstanceFilter::All),
            "seen" => Ok(InstanceFilter::Seen),
            "unseen" => Ok(InstanceFilter::Unseen),
            _ => Err(Error::arg(format!(
                "unknown filter '{s}' (expected all, seen or unseen)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Directory of scenes (`*.json` manifests and `*.ply`), or one scene file.
    pub data: PathBuf,
    pub backend: BackendSpec,
    pub session: SessionConfig,
    pub seed: u64,
    pub filter: InstanceFilter,
    pub seen_classes: Vec<String>,
    /// Class map; defaults to `classes.json` in the data directory if present.
    pub classes: Option<PathBuf>,
    pub budgets: Vec<u32>,
    pub min_points: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub backend_timeout: Duration,
}

impl EvalConfig {
    pub fn new(data: impl Into<PathBuf>, backend: BackendSpec) -> Self {
        Self {
            data: data.into(),
            backend,
            session: SessionConfig::default(),
            seed: 0,
            filter: InstanceFilter::All,
            seen_classes: Vec::new(),
            classes: None,
            budgets: DEFAULT_BUDGETS.to_vec(),
            min_points: DEFAULT_MIN_POINTS,
            threads: 0,
            out: None,
            backend_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.session.validate()?;
        if let BackendSpec::Reference(g) = &self.backend {
            g.validate()?;
        }
        if self.budgets.contains(&0) {
            return Err(Error::arg("click budgets must be at least 1"));
        }
        Ok(())
    }
}

/// Per-instance seed derived from the global seed and the instance's
/// identity, so filtering never shifts other instances' draws.
pub fn instance_seed(global: u64, scene_id: &str, instance_id: u32) -> RngSeed {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((scene_id.len() as u64).to_le_bytes());
    h.update(scene_id.as_bytes());
    h.update(instance_id.to_le_bytes());
    let digest = h.finalize();
    RngSeed(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// AP at one click budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub budget: u32,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApSweep(pub Vec<ApRow>);

impl ApSweep {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweeps serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("budget,ap,ap50,ap25\n");
        for r in &self.0 {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.budget,
                cell(r.ap),
                cell(r.ap50),
                cell(r.ap25)
            ));
        }
        out
    }
}

/// Class-agnostic AP of the masks in force after `budget` clicks. Each
/// scene's ground truth is the set of its evaluated instances; sessions
/// without a nonempty mask contribute no prediction.
fn ap_at_budget(traces: &[&SessionTrace], budget: u32) -> Result<Option<ApSummary>> {
    let mut by_scene: BTreeMap<&str, Vec<&SessionTrace>> = BTreeMap::new();
    for t in traces {
        by_scene.entry(&t.header.scene_id).or_default().push(t);
    }
    let mut scenes = Vec::with_capacity(by_scene.len());
    for group in by_scene.values() {
        let mut scored = ScoredScene {
            n_gt: group.len(),
            ..ScoredScene::default()
        };
        for t in group {
            let Some(step) = t.step_at(budget) else {
                continue;
            };
            let Some(confidence) = step.confidence else {
                continue;
            };
            if step.mask.count() == 0 {
                continue;
            }
            scored.confidences.push(confidence);
            scored
                .ious
                .push(group.iter().map(|g| step.mask.iou(&g.header.gt)).collect());
        }
        scenes.push(scored);
    }
    dataset_ap(&scenes)
}

/// Builds the report and AP sweep from traces. Traces are ordered by
/// (scene, instance) first, so the result does not depend on input order.
pub fn report_from_traces(traces: &mut [SessionTrace]) -> Result<(MetricsReport, ApSweep)> {
    traces.sort_by(|a, b| {
        (&a.header.scene_id, a.header.instance_id).cmp(&(&b.header.scene_id, b.header.instance_id))
    });
    let first = traces
        .first()
        .ok_or_else(|| Error::arg("no traces to report on"))?;
    let cap = first.header.config.max_clicks;
    let budgets = first.header.budgets.clone();
    if traces
        .iter()
        .any(|t| t.header.config.max_clicks != cap || t.header.budgets != budgets)
    {
        return Err(Error::Trace("traces mix click caps or budgets".into()));
    }

    let curves: Vec<_> = traces
        .iter()
        .filter(|t| !t.steps.is_empty())
        .map(SessionTrace::curve)
        .collect();
    if curves.is_empty() {
        return Err(Error::arg("no session produced a mask"));
    }
    let mut classes = ClassMap::new();
    for t in traces.iter() {
        if let Some(class) = &t.header.class {
            classes
                .entry(t.header.scene_id.clone())
                .or_default()
                .insert(t.header.instance_id, class.clone());
        }
    }
    let mut report = aggregate(&curves, (!classes.is_empty()).then_some(&classes), cap)?;

    let all: Vec<&SessionTrace> = traces.iter().collect();
    report.overall.set_ap(ap_at_budget(&all, cap)?);
    if let Some(per_class) = report.per_class.as_mut() {
        for (class, set) in per_class.iter_mut() {
            let members: Vec<&SessionTrace> = traces
                .iter()
                .filter(|t| t.header.class.as_deref() == Some(class.as_str()))
                .collect();
            set.set_ap(ap_at_budget(&members, cap)?);
        }
    }
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in &budgets {
        let s = ap_at_budget(&all, budget)?;
        rows.push(ApRow {
            budget,
            ap: s.map(|s| s.ap),
            ap50: s.map(|s| s.ap50),
            ap25: s.map(|s| s.ap25),
        });
    }
    Ok((report, ApSweep(rows)))
}

/// Counts describing one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenes_loaded: usize,
    /// `path: reason` for every scene that could not be used.
    pub scenes_failed: Vec<String>,
    pub instances_evaluated: usize,
    pub instances_too_small: usize,
    pub instances_filtered: usize,
    pub sessions_aborted: usize,
    /// Set when scenes failed or sessions aborted.
    pub partial: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub sweep: ApSweep,
    /// Ordered by (scene, instance).
    pub traces: Vec<SessionTrace>,
    pub summary: RunSummary,
}

struct LoadedScene {
    scene: Arc<Scene>,
    grid: VoxelGrid,
    graph: Option<Arc<WeightedGraph>>,
    blob: Option<PathBuf>,
}

fn list_scene_files(data: &Path) -> Result<Vec<PathBuf>> {
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(data)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let is_classes = path.file_name().is_some_and(|n| n == CLASSES_FILE);
        if path.is_file() && !is_classes && matches!(ext.as_deref(), Some("json" | "ply")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_scene(path: &Path) -> Result<Scene> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ply") => load_ply(path),
        _ => load_scene(path),
    }
}

fn load_class_map(config: &EvalConfig) -> Result<Option<ClassMap>> {
    let path = match &config.classes {
        Some(p) => p.clone(),
        None if config.data.is_dir() => {
            let p = config.data.join(CLASSES_FILE);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
        None => return Ok(None),
    };
    let map = serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::Format {
        path: path.clone(),
        message: format!("invalid class map: {e}"),
    })?;
    Ok(Some(map))
}

fn prepare_scene(path: &Path, config: &EvalConfig, blob_dir: Option<&Path>) -> Result<LoadedScene> {
    let scene = read_scene(path)?;
    if scene.labels.is_none() {
        return Err(Error::arg("scene has no instance labels"));
    }
    let grid = voxelize(&scene.cloud, config.session.grid_resolution)?;
    let graph = match &config.backend {
        BackendSpec::Reference(g) => {
            let knn = build_knn_graph(&scene.cloud, g.k)?;
            Some(Arc::new(WeightedGraph::new(
                &scene.cloud,
                &knn,
                g.color_weight,
            )?))
        }
        _ => None,
    };
    let blob = match (&config.backend, blob_dir) {
        (BackendSpec::External(_), Some(dir)) => {
            let is_manifest = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_manifest {
                Some(path.to_path_buf())
            } else {
                fs::create_dir_all(dir)?;
                let target = dir.join(format!("{}.json", sanitize(&scene.scene_id)));
                save_scene(&scene, &target)?;
                Some(target)
            }
        }
        _ => None,
    };
    Ok(LoadedScene {
        scene: Arc::new(scene),
        grid,
        graph,
        blob,
    })
}

fn make_backend(
    config: &EvalConfig,
    loaded: &LoadedScene,
    gt: &[bool],
) -> Result<Box<dyn SegmenterBackend>, BackendError> {
    Ok(match &config.backend {
        BackendSpec::Reference(g) => Box::new(
            GeodesicBackend::from_weighted(Arc::clone(loaded.graph.as_ref().unwrap()), *g)
                .map_err(|e| BackendError::Rejected(e.to_string()))?,
        ),
        BackendSpec::Oracle => Box::new(OracleBackend::new(gt.to_vec())),
        BackendSpec::Empty => Box::new(ConstantBackend::empty()),
        BackendSpec::External(cmd) => {
            let init = ExternalInit {
                n_points: loaded.scene.len(),
                channels: loaded.scene.cloud.channels(),
                epsilon: config.session.epsilon,
                scene_blob: loaded
                    .blob
                    .clone()
                    .expect("blob prepared for external backends"),
            };
            Box::new(ExternalBackend::connect(
                cmd,
                &init,
                config.backend_timeout,
            )?)
        }
    })
}

fn run_instance(
    config: &EvalConfig,
    loaded: &LoadedScene,
    instance_id: u32,
    class: Option<String>,
) -> Result<SessionTrace> {
    let scene = &loaded.scene;
    let mut header = TraceHeader::new(
        scene.scene_id.clone(),
        instance_id,
        config.backend.to_string(),
        instance_seed(config.seed, &scene.scene_id, instance_id),
        config.session,
        config.budgets.clone(),
    );
    header.class = class;
    let gt = scene.labels.as_ref().unwrap().mask(instance_id).unwrap();
    let backend = make_backend(config, loaded, &gt).and_then(|b| {
        if b.capabilities().needs_color && !scene.cloud.has_color() {
            Err(BackendError::Capability("color input"))
        } else {
            Ok(b)
        }
    });
    match backend {
        Ok(mut backend) => run_simulated_session(
            scene,
            &loaded.grid,
            instance_id,
            backend.as_mut(),
            &config.session,
            header,
        ),
        Err(e) => {
            header.gt = crate::rle::MaskRuns::encode(&gt);
            header.n_points = scene.len();
            Ok(SessionTrace {
                header,
                steps: Vec::new(),
                status: SessionStatus::Aborted,
                abort_reason: Some(e.to_string()),
            })
        }
    }
}

/// File name of an instance's trace.
pub fn trace_file_name(scene_id: &str, instance_id: u32) -> String {
    format!("{}__{instance_id}.jsonl", sanitize(scene_id))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every selected instance and, if `config.out` is set, writes
/// `traces/`, `report.json`, `report.csv`, `ap_sweep.json`, `ap_sweep.csv`
/// and `summary.json` there.
pub fn evaluate(config: &EvalConfig) -> Result<EvalOutcome> {
    config.validate()?;
    let classes = load_class_map(config)?;
    if config.filter != InstanceFilter::All && classes.is_none() {
        return Err(Error::arg("seen/unseen filtering needs a class map"));
    }
    let files = list_scene_files(&config.data)?;
    if files.is_empty() {
        return Err(Error::arg(format!(
            "no scenes found in {}",
            config.data.display()
        )));
    }
    let blob_dir = match (&config.backend, &config.out) {
        (BackendSpec::External(_), Some(out)) => Some(out.join("blobs")),
        (BackendSpec::External(_), None) => {
            Some(std::env::temp_dir().join(format!("click3d-blobs-{}", std::process::id())))
        }
        _ => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::arg(format!("worker pool: {e}")))?;

    let mut summary = RunSummary::default();
    let loaded: Vec<(PathBuf, Result<LoadedScene>)> = pool.install(|| {
        files
            .par_iter()
            .map(|p| (p.clone(), prepare_scene(p, config, blob_dir.as_deref())))
            .collect()
    });
    let mut scenes = Vec::new();
    for (path, result) in loaded {
        match result {
            Ok(s) => scenes.push(s),
            Err(e) => {
                tracing::warn!("skipping scene {}: {e}", path.display());
                summary
                    .scenes_failed
                    .push(format!("{}: {e}", path.display()));
            }
        }
    }
    summary.scenes_loaded = scenes.len();

    let mut jobs: Vec<(usize, u32, Option<String>)> = Vec::new();
    for (si, loaded) in scenes.iter().enumerate() {
        let labels = loaded.scene.labels.as_ref().unwrap();
        for id in labels.instance_ids() {
            let class = classes
                .as_ref()
                .and_then(|m| crate::metrics::class_of(m, &loaded.scene.scene_id, id))
                .map(str::to_string);
            let keep = match config.filter {
                InstanceFilter::All => true,
                InstanceFilter::Seen => class
                    .as_ref()
                    .is_some_and(|c| config.seen_classes.contains(c)),
                InstanceFilter::Unseen => class
                    .as_ref()
                    .is_some_and(|c| !config.seen_classes.contains(c)),
            };
            if !keep {
                summary.instances_filtered += 1;
            } else if labels.points(id).unwrap().len() < config.min_points {
                summary.instances_too_small += 1;
            } else {
                jobs.push((si, id, class));
            }
        }
    }
    tracing::info!(scenes = scenes.len(), instances = jobs.len(), "evaluating");

    let results: Vec<Result<SessionTrace>> = pool.install(|| {
        jobs.par_iter()
            .map(|(si, id, class)| run_instance(config, &scenes[*si], *id, class.clone()))
            .collect()
    });
    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        let t = r?;
        if t.status == SessionStatus::Aborted {
            tracing::warn!(
                "session {}/{} aborted: {}",
                t.header.scene_id,
                t.header.instance_id,
                t.abort_reason.as_deref().unwrap_or("unknown")
            );
            summary.sessions_aborted += 1;
        }
        traces.push(t);
    }
    summary.instances_evaluated = traces.len();
    summary.partial = !summary.scenes_failed.is_empty() || summary.sessions_aborted > 0;

    if let (BackendSpec::External(_), None, Some(dir)) = (&config.backend, &config.out, &blob_dir) {
        let _ = fs::remove_dir_all(dir);
    }
    // Traces and the summary go out first so a run in which every session
    // aborted still leaves them behind.
    if let Some(out) = &config.out {
        write_traces(out, &traces, &summary)?;
    }
    let (report, sweep) = report_from_traces(&mut traces)?;
    if let Some(out) = &config.out {
        write_reports(out, &report, &sweep)?;
    }
    Ok(EvalOutcome {
        report,
        sweep,
        traces,
        summary,
    })
}

fn write_traces(out: &Path, traces: &[SessionTrace], summary: &RunSummary) -> Result<()> {
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    for t in traces {
        t.write(&trace_dir.join(trace_file_name(&t.header.scene_id, t.header.instance_id)))?;
    }
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

/// Writes `report.json`, `report.csv`, `ap_sweep.json` and `ap_sweep.csv`.
pub fn write_reports(out: &Path, report: &MetricsReport, sweep: &ApSweep) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("ap_sweep.json"), sweep.to_json())?;
    fs::write(out.join("ap_sweep.csv"), sweep.to_csv())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub report: MetricsReport,
    pub sweep: ApSweep,
    /// Traces whose checksum did not match their content.
    pub checksum_mismatches: Vec<PathBuf>,
}

/// Recomputes reports from `*.jsonl` traces (a directory or single files).
pub fn replay(paths: &[PathBuf]) -> Result<ReplayOutcome> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in fs::read_dir(p)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "jsonl") {
                    files.push(path);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    let mut traces = Vec::with_capacity(files.len());
    let mut mismatches = Vec::new();
    for f in files {
        let loaded = read_trace(&f)?;
        if !loaded.checksum_ok {
            tracing::warn!("checksum mismatch in {}: trace was modified", f.display());
            mismatches.push(f);
        }
        traces.push(loaded.trace);
    }
    let (report, sweep) = report_from_traces(&mut traces)?;
    Ok(ReplayOutcome {
        report,
        sweep,
        checksum_mismatches: mismatches,
    })
}
