//! Session traces: line-delimited JSON, one header record, one record per
//! click, and an end record carrying a CRC32 of all preceding lines.
//!
//! Simulated sessions and finalized human sessions share this format so both
//! feed the same metrics pipeline.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator::{RngSeed, SessionConfig};
use crate::clickmap::Click;
use crate::metrics::ClickCurve;
use crate::rle::MaskRuns;
use crate::{Error, Result};

pub const TRACE_VERSION: &str = "click3d-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: String,
    /// `simulator` or `human`.
    pub source: String,
    pub scene_id: String,
    pub instance_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub backend: String,
    pub seed: RngSeed,
    pub config: SessionConfig,
    /// Click budgets for the AP sweep.
    pub budgets: Vec<u32>,
    pub n_points: usize,
    /// Ground-truth mask of the target instance.
    pub gt: MaskRuns,
}

impl TraceHeader {
    pub fn new(
        scene_id: impl Into<String>,
        instance_id: u32,
        backend: impl Into<String>,
        seed: RngSeed,
        config: SessionConfig,
        budgets: Vec<u32>,
    ) -> Self {
        Self {
            version: TRACE_VERSION.to_string(),
            source: "simulator".to_string(),
            scene_id: scene_id.into(),
            instance_id,
            class: None,
            backend: backend.into(),
            seed,
            config,
            budgets,
            n_points: 0,
            gt: MaskRuns::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u32,
    pub click: Click,
    pub iou: f64,
    pub n_fn_points: usize,
    pub n_fp_points: usize,
    /// Mean foreground score of the prediction; absent when it is empty.
    pub confidence: Option<f64>,
    /// Binary prediction after this click.
    pub mask: MaskRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    /// The prediction became error-free.
    Done,
    /// The click budget ran out.
    Capped,
    /// The backend failed; steps end at the last good one.
    Aborted,
    /// A human annotator submitted the result.
    Finalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
    pub status: SessionStatus,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceEnd {
    status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abort_reason: Option<String>,
    n_steps: usize,
    checksum: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header(TraceHeader),
    Step(TraceStep),
    End(TraceEnd),
}

impl SessionTrace {
    /// IoU after each click; empty when aborted before the first mask.
    pub fn ious(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.iou).collect()
    }

    pub fn curve(&self) -> ClickCurve {
        ClickCurve {
            scene_id: self.header.scene_id.clone(),
            instance_id: self.header.instance_id,
            iou: self.ious(),
        }
    }

    /// The step in force after `budget` clicks: the last step when the
    /// session ended earlier.
    pub fn step_at(&self, budget: u32) -> Option<&TraceStep> {
        let k = (budget as usize).min(self.steps.len());
        k.checked_sub(1).map(|i| &self.steps[i])
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |record: &Record| {
            out.push_str(&serde_json::to_string(record).expect("trace records serialize"));
            out.push('\n');
        };
        push(&Record::Header(self.header.clone()));
        for step in &self.steps {
            push(&Record::Step(step.clone()));
        }
        let end = TraceEnd {
            status: self.status,
            abort_reason: self.abort_reason.clone(),
            n_steps: self.steps.len(),
            checksum: crc32fast::hash(out.as_bytes()),
        };
        out.push_str(&serde_json::to_string(&Record::End(end)).unwrap());
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// A parsed trace plus whether its checksum matched.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub trace: SessionTrace,
    pub checksum_ok: bool,
}

pub fn parse_trace(text: &str) -> Result<LoadedTrace> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut consumed = 0usize;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let record: Record = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Trace(format!("line {}: {e}", line_no + 1)))?;
        match record {
            Record::Header(h) if line_no == 0 => {
                if h.version != TRACE_VERSION {
                    return Err(Error::Trace(format!(
                        "unsupported trace version '{}' (expected {TRACE_VERSION})",
                        h.version
                    )));
                }
                header = Some(h);
            }
            Record::Step(s) if header.is_some() => steps.push(s),
            Record::End(end) if header.is_some() => {
                if end.n_steps != steps.len() {
                    return Err(Error::Trace(format!(
                        "end record counts {} steps, trace holds {}",
                        end.n_steps,
                        steps.len()
                    )));
                }
                let checksum_ok = crc32fast::hash(&text.as_bytes()[..consumed]) == end.checksum;
                return Ok(LoadedTrace {
                    trace: SessionTrace {
                        header: header.unwrap(),
                        steps,
                        status: end.status,
                        abort_reason: end.abort_reason,
                    },
                    checksum_ok,
                });
            }
            _ => {
                return Err(Error::Trace(format!(
                    "line {}: record out of order",
                    line_no + 1
                )))
            }
        }
        consumed += line.len();
    }
    Err(Error::Trace("trace has no end record".into()))
}

pub fn read_trace(path: &Path) -> Result<LoadedTrace> {
    parse_trace(&fs::read_to_string(path)?)
        .map_err(|e| Error::Trace(format!("{}: {e}", path.display())))
}
