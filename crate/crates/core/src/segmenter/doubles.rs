//! Test-double backends used to sanity-check the evaluation protocol.

use crate::segmenter::{BackendError, Capabilities, SegmentRequest, SegmenterBackend, SoftMask};

/// Returns the installed ground-truth mask regardless of the clicks.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    gt: Vec<bool>,
}

impl OracleBackend {
    pub fn new(gt: Vec<bool>) -> Self {
        Self { gt }
    }
}

impl SegmenterBackend for OracleBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn segment(&mut self, _request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError> {
        Ok(SoftMask::from_binary(&self.gt))
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// Returns the same score for every point; `0.0` gives the constant-empty
/// backend.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBackend {
    pub score: f32,
}

impl ConstantBackend {
    pub fn empty() -> Self {
        Self { score: 0.0 }
    }
}

impl SegmenterBackend for ConstantBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError> {
        SoftMask::new(vec![self.score; request.cloud.len()])
    }

    fn name(&self) -> String {
        if self.score == 0.0 {
            "empty".into()
        } else {
            format!("constant:{}", self.score)
        }
    }
}
