//! Classical reference segmenter: multi-source geodesic distances on the k-NN
//! graph with a virtual background at radius `background_radius`.
//!
//! Points with a positive bit (and no negative bit) seed `d_pos`; points with
//! a negative bit seed `d_neg`. A point is foreground iff
//! `d_pos <= d_neg && d_pos <= background_radius`; ties go to foreground.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clickmap::ClickChannels;
use crate::scene_io::{NeighborGraph, PointCloud};
use crate::segmenter::{BackendError, Capabilities, SegmentRequest, SegmenterBackend, SoftMask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicConfig {
    pub k: usize,
    /// Weight of the color difference in an edge cost (dimensionless).
    pub color_weight: f64,
    /// Geodesic radius in meters beyond which points default to background.
    pub background_radius: f64,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            k: 8,
            color_weight: 0.2,
            background_radius: 0.5,
        }
    }
}

impl GeodesicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("geodesic k must be at least 1"));
        }
        if !(self.background_radius > 0.0 && self.background_radius.is_finite()) {
            return Err(Error::arg("background radius must be positive"));
        }
        if !(self.color_weight >= 0.0 && self.color_weight.is_finite()) {
            return Err(Error::arg("color weight must be non-negative"));
        }
        Ok(())
    }
}

/// Neighbor graph with edge costs `length + color_weight * |delta color|`.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(cloud: &PointCloud, graph: &NeighborGraph, color_weight: f64) -> Result<Self> {
        if graph.n_points() != cloud.len() {
            return Err(Error::arg(format!(
                "graph has {} nodes for {} points",
                graph.n_points(),
                cloud.len()
            )));
        }
        let (offsets, targets, lengths) = graph.csr();
        let weights = match cloud.colors() {
            Some(colors) if color_weight > 0.0 => {
                let mut weights = Vec::with_capacity(lengths.len());
                for i in 0..cloud.len() {
                    for e in offsets[i]..offsets[i + 1] {
                        let j = targets[e] as usize;
                        let dc: f64 = (0..3)
                            .map(|a| (colors[i][a] as f64 - colors[j][a] as f64).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        weights.push(lengths[e] + color_weight * dc);
                    }
                }
                weights
            }
            _ => lengths.to_vec(),
        };
        Ok(Self {
            offsets: offsets.to_vec(),
            targets: targets.to_vec(),
            weights,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edges(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(&j, &w)| (j as usize, w))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Multi-source Dijkstra. Nodes farther than `limit` keep `INFINITY`. When
/// `stop_after` is given, the search ends once all flagged nodes are settled
/// (`remaining` of them), leaving other distances possibly unsettled.
fn dijkstra(
    graph: &WeightedGraph,
    sources: &[usize],
    limit: f64,
    stop_after: Option<(&[bool], usize)>,
) -> Vec<f64> {
    let n = graph.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Reverse((Dist(0.0), s as u32)));
    }
    let mut remaining = stop_after.map(|(_, r)| r);
    if remaining == Some(0) {
        return dist;
    }
    while let Some(Reverse((Dist(d), u))) = heap.pop() {
        let u = u as usize;
        if settled[u] || d > dist[u] {
            continue;
        }
        settled[u] = true;
        if let (Some((flags, _)), Some(left)) = (stop_after, remaining.as_mut()) {
            if flags[u] {
                *left -= 1;
                if *left == 0 {
                    break;
                }
            }
        }
        for (v, w) in graph.edges(u) {
            let nd = d + w;
            if nd < dist[v] && nd <= limit {
                dist[v] = nd;
                heap.push(Reverse((Dist(nd), v as u32)));
            }
        }
    }
    dist
}

const BELOW_HALF: f32 = 0.499_999_97;

/// Segments on a prepared weighted graph.
pub fn segment_weighted(
    graph: &WeightedGraph,
    channels: &ClickChannels,
    background_radius: f64,
) -> Result<SoftMask> {
    let n = graph.n_nodes();
    if channels.t_p.len() != n || channels.t_n.len() != n {
        return Err(Error::arg(format!(
            "click channels hold {} entries for {n} points",
            channels.t_p.len()
        )));
    }
    let positive: Vec<usize> = (0..n)
        .filter(|&i| channels.t_p[i] && !channels.t_n[i])
        .collect();
    if positive.is_empty() {
        return Ok(SoftMask::zeros(n));
    }
    let negative: Vec<usize> = (0..n).filter(|&i| channels.t_n[i]).collect();

    let d_pos = dijkstra(graph, &positive, background_radius, None);
    let in_ball: Vec<bool> = d_pos.iter().map(|&d| d <= background_radius).collect();
    let d_neg = if negative.is_empty() {
        vec![f64::INFINITY; n]
    } else {
        let count = in_ball.iter().filter(|&&b| b).count();
        dijkstra(graph, &negative, f64::INFINITY, Some((&in_ball, count)))
    };

    let mut scores = vec![0.0f32; n];
    for i in 0..n {
        if !in_ball[i] || channels.t_n[i] {
            continue;
        }
        let ratio = (d_pos[i] / d_neg[i].max(background_radius)).min(1.0);
        let raw = 1.0 - ratio;
        scores[i] = if d_pos[i] <= d_neg[i] {
            (0.5 + 0.5 * raw) as f32
        } else {
            ((0.5 * raw) as f32).min(BELOW_HALF)
        };
    }
    SoftMask::new(scores).map_err(|e| Error::arg(e.to_string()))
}

/// One-shot reference segmentation: weights the graph for `cloud` and runs
/// the geodesic labeling.
pub fn geodesic_segment(
    cloud: &PointCloud,
    graph: &NeighborGraph,
    channels: &ClickChannels,
    config: &GeodesicConfig,
) -> Result<SoftMask> {
    config.validate()?;
    let weighted = WeightedGraph::new(cloud, graph, config.color_weight)?;
    segment_weighted(&weighted, channels, config.background_radius)
}

/// The reference segmenter as a backend. Stateless and reentrant.
#[derive(Debug, Clone)]
pub struct GeodesicBackend {
    graph: Arc<WeightedGraph>,
    config: GeodesicConfig,
}

impl GeodesicBackend {
    pub fn new(cloud: &PointCloud, graph: &NeighborGraph, config: GeodesicConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            graph: Arc::new(WeightedGraph::new(cloud, graph, config.color_weight)?),
            config,
        })
    }

    /// Shares an already weighted graph (one per scene) between sessions.
    pub fn from_weighted(graph: Arc<WeightedGraph>, config: GeodesicConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { graph, config })
    }

    pub fn weighted_graph(&self) -> &Arc<WeightedGraph> {
        &self.graph
    }
}

impl SegmenterBackend for GeodesicBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError> {
        segment_weighted(&self.graph, request.channels, self.config.background_radius)
            .map_err(|e| BackendError::Rejected(e.to_string()))
    }

    fn name(&self) -> String {
        "ref".into()
    }
}
