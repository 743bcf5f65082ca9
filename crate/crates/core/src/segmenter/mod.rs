//! Segmentation backends: anything mapping (cloud, clicks) to per-point
//! foreground scores.

use serde::{Deserialize, Serialize};

use crate::clickmap::{Click, ClickChannels};
use crate::scene_io::PointCloud;

mod doubles;
mod external;
mod geodesic;
pub mod protocol;

pub use doubles::{ConstantBackend, OracleBackend};
pub use external::{ExternalBackend, ExternalInit, DEFAULT_HANDSHAKE_TIMEOUT};
pub use geodesic::{geodesic_segment, GeodesicBackend, GeodesicConfig, WeightedGraph};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Per-point foreground scores in `[0, 1]`; a point is foreground when its
/// score reaches the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub scores: Vec<f32>,
    pub threshold: f32,
}

impl SoftMask {
    pub fn new(scores: Vec<f32>) -> Result<Self, BackendError> {
        if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(BackendError::Protocol(format!(
                "score {} of point {i} is outside [0, 1]",
                scores[i]
            )));
        }
        Ok(Self {
            scores,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            scores: vec![0.0; n],
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn from_binary(mask: &[bool]) -> Self {
        Self {
            scores: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn binary(&self) -> Vec<bool> {
        self.scores.iter().map(|&s| s >= self.threshold).collect()
    }

    /// Mean score over predicted-foreground points; `None` for an empty
    /// prediction. Used as the detection confidence for AP.
    pub fn confidence(&self) -> Option<f64> {
        let (sum, count) = self
            .scores
            .iter()
            .filter(|&&s| s >= self.threshold)
            .fold((0.0f64, 0usize), |(sum, n), &s| (sum + s as f64, n + 1));
        (count > 0).then(|| sum / count as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_adaptation: bool,
    pub needs_color: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("failed to start backend: {0}")]
    Spawn(String),
    #[error("backend handshake failed: {0}")]
    Handshake(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
    #[error("backend exited: {0}")]
    Crashed(String),
    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("backend does not support {0}")]
    Capability(&'static str),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

/// One segmentation request. Backends that encode clicks themselves (external
/// processes) read `clicks`; in-process backends read `channels`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub session: &'a str,
    pub cloud: &'a PointCloud,
    pub clicks: &'a [Click],
    pub channels: &'a ClickChannels,
}

pub trait SegmenterBackend: Send {
    fn capabilities(&self) -> Capabilities;

    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError>;

    /// Delivers user corrections to a backend that adapts online.
    fn adapt(&mut self, _session: &str, _clicks: &[Click]) -> Result<(), BackendError> {
        Err(BackendError::Capability("online adaptation"))
    }

    fn name(&self) -> String;
}

impl<B: SegmenterBackend + ?Sized> SegmenterBackend for Box<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError> {
        (**self).segment(request)
    }

    fn adapt(&mut self, session: &str, clicks: &[Click]) -> Result<(), BackendError> {
        (**self).adapt(session, clicks)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Runs a backend with the shared contract applied: without any positive
/// click bit the result is the all-background mask, and the returned mask
/// must cover every point.
pub fn segment<B: SegmenterBackend + ?Sized>(
    backend: &mut B,
    request: &SegmentRequest<'_>,
) -> Result<SoftMask, BackendError> {
    let n = request.cloud.len();
    if !request.channels.has_positive() {
        return Ok(SoftMask::zeros(n));
    }
    let mask = backend.segment(request)?;
    if mask.len() != n {
        return Err(BackendError::Protocol(format!(
            "mask has {} scores for {n} points",
            mask.len()
        )));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clickmap::{encode_clicks, Polarity};

    #[test]
    fn soft_mask_threshold_and_confidence() {
        let m = SoftMask::new(vec![0.2, 0.5, 0.9, 0.0]).unwrap();
        assert_eq!(m.binary(), vec![false, true, true, false]);
        assert!((m.confidence().unwrap() - 0.7).abs() < 1e-7);
        assert_eq!(SoftMask::zeros(3).confidence(), None);
        assert!(SoftMask::new(vec![1.5]).is_err());
        assert!(SoftMask::new(vec![f32::NAN]).is_err());
    }

    #[test]
    fn no_clicks_yields_background_even_for_oracle() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3]], None).unwrap();
        let mut oracle = OracleBackend::new(vec![true, true]);
        let channels = encode_clicks(&cloud, &[], 0.05).unwrap();
        let req = SegmentRequest {
            session: "s",
            cloud: &cloud,
            clicks: &[],
            channels: &channels,
        };
        assert_eq!(segment(&mut oracle, &req).unwrap(), SoftMask::zeros(2));

        let clicks = [Click::on_point(&cloud, 1, Polarity::Negative, 1)];
        let channels = encode_clicks(&cloud, &clicks, 0.05).unwrap();
        let req = SegmentRequest {
            clicks: &clicks,
            channels: &channels,
            ..req
        };
        assert_eq!(segment(&mut oracle, &req).unwrap(), SoftMask::zeros(2));
    }

    #[test]
    fn oracle_returns_ground_truth_whatever_the_clicks() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]], None).unwrap();
        let gt = vec![false, true, true];
        let mut oracle = OracleBackend::new(gt.clone());
        let clicks = [Click::on_point(&cloud, 0, Polarity::Positive, 1)];
        let channels = encode_clicks(&cloud, &clicks, 0.05).unwrap();
        let req = SegmentRequest {
            session: "s",
            cloud: &cloud,
            clicks: &clicks,
            channels: &channels,
        };
        assert_eq!(segment(&mut oracle, &req).unwrap().binary(), gt);
    }

    #[test]
    fn in_process_backends_reject_adaptation() {
        let mut oracle = OracleBackend::new(vec![true]);
        assert!(matches!(
            oracle.adapt("s", &[]),
            Err(BackendError::Capability(_))
        ));
    }
}
