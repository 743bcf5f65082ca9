//! Line-delimited JSON protocol spoken with external segmentation backends
//! over the child's stdin/stdout.
//!
//! ```text
//! -> {"type":"init","version":"click3d/1","n_points":N,"c":C,"epsilon":e,"scene_blob":"<manifest path>"}
//! <- {"type":"ready","supports_adaptation":bool}
//! -> {"type":"segment","session":id,"clicks":[click records]}
//! <- {"type":"mask","session":id,"scores_b64":"<little-endian float32[N], base64>"}
//! -> {"type":"adapt","session":id,"clicks":[...]}
//! <- {"type":"ack"}
//! -> {"type":"shutdown"}
//! ```

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::clickmap::Click;

pub const PROTOCOL_VERSION: &str = "click3d/1";

/// Messages sent to the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Init {
        version: String,
        n_points: usize,
        c: usize,
        epsilon: f64,
        scene_blob: String,
    },
    Segment {
        session: String,
        clicks: Vec<Click>,
    },
    Adapt {
        session: String,
        clicks: Vec<Click>,
    },
    Shutdown,
}

/// Messages received from the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Ready {
        supports_adaptation: bool,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        needs_color: bool,
        /// Optional echo of the protocol version the child speaks.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        version: Option<String>,
    },
    Mask {
        session: String,
        scores_b64: String,
    },
    Ack,
}

pub fn encode_scores(scores: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(scores.len() * 4);
    for s in scores {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_scores(encoded: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| format!("invalid base64 scores: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!(
            "score payload of {} bytes is not float32-aligned",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clickmap::Polarity;
    use serde_json::json;

    #[test]
    fn wire_shapes() {
        let init = Request::Init {
            version: PROTOCOL_VERSION.into(),
            n_points: 3,
            c: 6,
            epsilon: 0.05,
            scene_blob: "/tmp/s.json".into(),
        };
        assert_eq!(
            serde_json::to_value(&init).unwrap(),
            json!({"type":"init","version":"click3d/1","n_points":3,"c":6,"epsilon":0.05,"scene_blob":"/tmp/s.json"})
        );
        assert_eq!(
            serde_json::to_value(Request::Shutdown).unwrap(),
            json!({"type":"shutdown"})
        );
        let seg = Request::Segment {
            session: "a".into(),
            clicks: vec![Click {
                ordinal: 1,
                polarity: Polarity::Positive,
                position: [0.0, 1.0, 2.0],
                point_index: Some(4),
            }],
        };
        assert_eq!(
            serde_json::to_value(&seg).unwrap(),
            json!({"type":"segment","session":"a","clicks":[{"ordinal":1,"polarity":"pos","x":0.0,"y":1.0,"z":2.0,"snapped_point_index":4}]})
        );
        let ready: Response =
            serde_json::from_str(r#"{"type":"ready","supports_adaptation":true}"#).unwrap();
        assert_eq!(
            ready,
            Response::Ready {
                supports_adaptation: true,
                needs_color: false,
                version: None
            }
        );
        assert_eq!(
            serde_json::from_str::<Response>(r#"{"type":"ack"}"#).unwrap(),
            Response::Ack
        );
    }

    #[test]
    fn scores_round_trip() {
        let scores = [0.0f32, 1.0, 0.25, 0.999];
        assert_eq!(decode_scores(&encode_scores(&scores)).unwrap(), scores);
        assert!(decode_scores("AAA=").is_err());
        assert!(decode_scores("not base64!").is_err());
    }
}
