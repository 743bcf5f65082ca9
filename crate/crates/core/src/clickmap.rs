//! User clicks and the two binary click channels appended to point features.
//!
//! A point is lit in the positive channel when it lies inside the closed cube
//! of half-width `epsilon` around any positive click; the negative channel is
//! built the same way from negative clicks. A point may be lit in both.

use serde::{Deserialize, Serialize};

use crate::scene_io::PointCloud;
use crate::{Error, Result};

/// Default cube half-width in meters: one 5 cm voxel.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "positive" => Ok(Polarity::Positive),
            "neg" | "negative" => Ok(Polarity::Negative),
            other => Err(Error::arg(format!("unknown polarity '{other}'"))),
        }
    }
}

/// One click. Serializes as the flat click record
/// `{ordinal, polarity, x, y, z, snapped_point_index}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "ClickRecord", into = "ClickRecord")]
pub struct Click {
    /// 1-based position in the click sequence.
    pub ordinal: u32,
    pub polarity: Polarity,
    pub position: [f64; 3],
    /// Scene point the click was snapped to, when known.
    pub point_index: Option<usize>,
}

impl Click {
    /// A click placed exactly on scene point `index`.
    pub fn on_point(cloud: &PointCloud, index: usize, polarity: Polarity, ordinal: u32) -> Self {
        Self {
            ordinal,
            polarity,
            position: cloud.positions()[index],
            point_index: Some(index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ClickRecord {
    ordinal: u32,
    polarity: Polarity,
    x: f64,
    y: f64,
    z: f64,
    snapped_point_index: Option<usize>,
}

impl From<ClickRecord> for Click {
    fn from(r: ClickRecord) -> Self {
        Click {
            ordinal: r.ordinal,
            polarity: r.polarity,
            position: [r.x, r.y, r.z],
            point_index: r.snapped_point_index,
        }
    }
}

impl From<Click> for ClickRecord {
    fn from(c: Click) -> Self {
        ClickRecord {
            ordinal: c.ordinal,
            polarity: c.polarity,
            x: c.position[0],
            y: c.position[1],
            z: c.position[2],
            snapped_point_index: c.point_index,
        }
    }
}

/// Checks that ordinals run 1, 2, ... in list order.
pub fn check_ordinals(clicks: &[Click]) -> Result<()> {
    for (i, click) in clicks.iter().enumerate() {
        if click.ordinal as usize != i + 1 {
            return Err(Error::arg(format!(
                "click {i} has ordinal {}, expected {}",
                click.ordinal,
                i + 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickChannels {
    pub t_p: Vec<bool>,
    pub t_n: Vec<bool>,
    pub epsilon: f64,
}

impl ClickChannels {
    pub fn empty(n: usize, epsilon: f64) -> Self {
        Self {
            t_p: vec![false; n],
            t_n: vec![false; n],
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.t_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_p.is_empty()
    }

    pub fn has_positive(&self) -> bool {
        self.t_p.iter().any(|&b| b)
    }
}

#[inline]
fn in_cube(p: &[f64; 3], q: &[f64; 3], epsilon: f64) -> bool {
    (p[0] - q[0]).abs() <= epsilon
        && (p[1] - q[1]).abs() <= epsilon
        && (p[2] - q[2]).abs() <= epsilon
}

pub fn encode_clicks(cloud: &PointCloud, clicks: &[Click], epsilon: f64) -> Result<ClickChannels> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(c) = clicks
        .iter()
        .find(|c| c.position.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::arg(format!(
            "click {} has a non-finite position",
            c.ordinal
        )));
    }
    let mut channels = ClickChannels::empty(cloud.len(), epsilon);
    for click in clicks {
        let channel = match click.polarity {
            Polarity::Positive => &mut channels.t_p,
            Polarity::Negative => &mut channels.t_n,
        };
        for (bit, p) in channel.iter_mut().zip(cloud.positions()) {
            if !*bit && in_cube(p, &click.position, epsilon) {
                *bit = true;
            }
        }
    }
    Ok(channels)
}

/// Row-major `N x (C + 2)` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(self.cols).copied()
    }
}

/// Columns: position (3), color (3, when present), positive channel, negative
/// channel.
pub fn assemble_input(cloud: &PointCloud, channels: &ClickChannels) -> Result<FeatureMatrix> {
    if channels.t_p.len() != cloud.len() || channels.t_n.len() != cloud.len() {
        return Err(Error::arg(format!(
            "click channels hold {}/{} entries for {} points",
            channels.t_p.len(),
            channels.t_n.len(),
            cloud.len()
        )));
    }
    let cols = cloud.channels() + 2;
    let mut data = Vec::with_capacity(cloud.len() * cols);
    for i in 0..cloud.len() {
        data.extend_from_slice(&cloud.positions()[i]);
        if let Some(colors) = cloud.colors() {
            data.extend(colors[i].iter().map(|&c| c as f64));
        }
        data.push(if channels.t_p[i] { 1.0 } else { 0.0 });
        data.push(if channels.t_n[i] { 1.0 } else { 0.0 });
    }
    Ok(FeatureMatrix {
        rows: cloud.len(),
        cols,
        data,
    })
}
