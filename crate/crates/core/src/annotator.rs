//! Simulated annotator.
//!
//! Training clicks are drawn at random: positives uniformly on the target
//! instance, negatives uniformly among other points inside the instance's
//! bounding box enlarged by a random factor in `[1.0, 1.4]`.
//!
//! Test clicks follow the largest error: false negatives and false positives
//! are voxelized separately on the 5 cm grid, split into 26-connected
//! regions, and the next click goes to the interior-most point of the largest
//! region (positive for a missed region, negative for a spurious one).

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clickmap::{encode_clicks, Click, Polarity};
use crate::metrics::iou;
use crate::rle::MaskRuns;
use crate::scene_io::{bounds_of, squared_distance, PointCloud, Scene, VoxelGrid, VoxelKey};
use crate::segmenter::{segment, SegmentRequest, SegmenterBackend};
use crate::trace::{SessionStatus, SessionTrace, TraceHeader, TraceStep};
use crate::{Error, Result};

/// Seed for the simulator's random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Upper bound of the negative-sampling box scale.
pub const MAX_NEGATIVE_BOX_SCALE: f64 = 1.4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainClicks {
    /// Positives first (ordinals `1..=n_pos`), then negatives.
    pub clicks: Vec<Click>,
    /// Requested negatives that could not be drawn for lack of candidates.
    pub negative_shortfall: usize,
    /// Scale applied to the instance box for negative sampling.
    pub box_scale: f64,
}

pub fn sample_train_clicks(
    scene: &Scene,
    instance_id: u32,
    n_pos: usize,
    n_neg: usize,
    seed: RngSeed,
) -> Result<TrainClicks> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg(format!("scene {} has no instance labels", scene.scene_id)))?;
    let members = labels
        .points(instance_id)
        .ok_or_else(|| Error::arg(format!("unknown instance {instance_id}")))?;
    let cloud = &scene.cloud;
    let mut rng = seed.rng();

    let positives: Vec<usize> = if n_pos <= members.len() {
        index::sample(&mut rng, members.len(), n_pos)
            .into_iter()
            .map(|k| members[k])
            .collect()
    } else {
        (0..n_pos)
            .map(|_| members[rng.random_range(0..members.len())])
            .collect()
    };

    let box_scale = rng.random_range(1.0..=MAX_NEGATIVE_BOX_SCALE);
    let (lo, hi) = bounds_of(members.iter().map(|&i| &cloud.positions()[i]));
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let half = [0, 1, 2].map(|a| 0.5 * (hi[a] - lo[a]) * box_scale);
    let candidates: Vec<usize> = (0..cloud.len())
        .filter(|&i| labels.ids()[i] != instance_id)
        .filter(|&i| {
            let p = cloud.positions()[i];
            (0..3).all(|a| (p[a] - center[a]).abs() <= half[a])
        })
        .collect();
    let taken = n_neg.min(candidates.len());
    let negatives: Vec<usize> = index::sample(&mut rng, candidates.len(), taken)
        .into_iter()
        .map(|k| candidates[k])
        .collect();

    let clicks = positives
        .iter()
        .map(|&i| (i, Polarity::Positive))
        .chain(negatives.iter().map(|&i| (i, Polarity::Negative)))
        .enumerate()
        .map(|(k, (i, polarity))| Click::on_point(cloud, i, polarity, k as u32 + 1))
        .collect();
    Ok(TrainClicks {
        clicks,
        negative_shortfall: n_neg - taken,
        box_scale,
    })
}

/// Draws one training example with the default click counts: 1 to 10
/// positives and 0 to 10 negatives, uniformly.
pub fn sample_train_example(scene: &Scene, instance_id: u32, seed: RngSeed) -> Result<TrainClicks> {
    let mut rng = seed.rng();
    let n_pos = rng.random_range(1..=10);
    let n_neg = rng.random_range(0..=10);
    sample_train_clicks(scene, instance_id, n_pos, n_neg, RngSeed(rng.random()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    #[serde(rename = "fn")]
    FalseNegative,
    #[serde(rename = "fp")]
    FalsePositive,
}

impl ErrorKind {
    pub fn correction(self) -> Polarity {
        match self {
            ErrorKind::FalseNegative => Polarity::Positive,
            ErrorKind::FalsePositive => Polarity::Negative,
        }
    }
}

/// A 26-connected component of voxels holding misclassified points of one
/// kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRegion {
    pub kind: ErrorKind,
    /// Sorted ascending.
    pub voxels: Vec<VoxelKey>,
    /// Misclassified points of this kind inside the voxels, ascending.
    pub point_indices: Vec<usize>,
}

impl ErrorRegion {
    /// Size in voxels.
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

pub(crate) fn neighbors26(v: VoxelKey) -> impl Iterator<Item = VoxelKey> {
    (-1..=1).flat_map(move |dx| {
        (-1..=1).flat_map(move |dy| {
            (-1..=1)
                .filter(move |&dz| dx != 0 || dy != 0 || dz != 0)
                .map(move |dz| [v[0] + dx, v[1] + dy, v[2] + dz])
        })
    })
}

fn check_masks(gt: &[bool], pred: &[bool], grid: &VoxelGrid) -> Result<()> {
    if gt.len() != grid.n_points() || pred.len() != grid.n_points() {
        return Err(Error::arg(format!(
            "masks of length {}/{} for a grid over {} points",
            gt.len(),
            pred.len(),
            grid.n_points()
        )));
    }
    Ok(())
}

/// Error regions sorted by size (descending), then kind (missed before
/// spurious), then smallest voxel coordinate.
pub fn extract_error_regions(
    gt: &[bool],
    pred: &[bool],
    grid: &VoxelGrid,
) -> Result<Vec<ErrorRegion>> {
    check_masks(gt, pred, grid)?;
    let mut regions = Vec::new();
    for kind in [ErrorKind::FalseNegative, ErrorKind::FalsePositive] {
        let mut occupied: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
        for i in 0..gt.len() {
            let wrong = match kind {
                ErrorKind::FalseNegative => gt[i] && !pred[i],
                ErrorKind::FalsePositive => !gt[i] && pred[i],
            };
            if wrong {
                occupied.entry(grid.key_of_point(i)).or_default().push(i);
            }
        }
        let mut visited: HashSet<VoxelKey> = HashSet::with_capacity(occupied.len());
        for &start in occupied.keys() {
            if !visited.insert(start) {
                continue;
            }
            let mut voxels = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for n in neighbors26(v) {
                    if occupied.contains_key(&n) && visited.insert(n) {
                        voxels.push(n);
                        queue.push_back(n);
                    }
                }
            }
            voxels.sort_unstable();
            let mut point_indices: Vec<usize> = voxels
                .iter()
                .flat_map(|v| occupied[v].iter().copied())
                .collect();
            point_indices.sort_unstable();
            regions.push(ErrorRegion {
                kind,
                voxels,
                point_indices,
            });
        }
    }
    regions.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then(a.kind.cmp(&b.kind))
            .then(a.voxels[0].cmp(&b.voxels[0]))
    });
    Ok(regions)
}

/// Interior depth of every voxel of `region`: the number of 26-neighborhood
/// steps to the nearest voxel that touches an occupied voxel outside the
/// region (those touching voxels have depth 1). `None` when the region does
/// not touch any other occupied voxel.
pub fn interior_depths(region: &ErrorRegion, grid: &VoxelGrid) -> Option<BTreeMap<VoxelKey, u32>> {
    let members: HashSet<VoxelKey> = region.voxels.iter().copied().collect();
    let mut depth: BTreeMap<VoxelKey, u32> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for &v in &region.voxels {
        if neighbors26(v).any(|n| !members.contains(&n) && grid.is_occupied(&n)) {
            depth.insert(v, 1);
            queue.push_back(v);
        }
    }
    if queue.is_empty() {
        return None;
    }
    while let Some(v) = queue.pop_front() {
        let d = depth[&v];
        for n in neighbors26(v) {
            if members.contains(&n) && !depth.contains_key(&n) {
                depth.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    Some(depth)
}

/// The simulated annotator's next correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    pub point_index: usize,
    pub polarity: Polarity,
    /// Size in voxels of the region being corrected.
    pub region_size: usize,
}

impl Correction {
    pub fn into_click(self, cloud: &PointCloud, ordinal: u32) -> Click {
        Click::on_point(cloud, self.point_index, self.polarity, ordinal)
    }
}

/// Picks the next test click, or `None` when the prediction is error-free.
///
/// Within the largest region the click goes to a point in a deepest voxel
/// (see [`interior_depths`]); ties go to the point nearest the region's point
/// centroid, then to the lowest point index.
pub fn next_test_click(
    gt: &[bool],
    pred: &[bool],
    grid: &VoxelGrid,
    cloud: &PointCloud,
) -> Result<Option<Correction>> {
    if cloud.len() != grid.n_points() {
        return Err(Error::arg("voxel grid was built over a different cloud"));
    }
    let regions = extract_error_regions(gt, pred, grid)?;
    let Some(region) = regions.into_iter().next() else {
        return Ok(None);
    };
    let candidates: Vec<usize> = match interior_depths(&region, grid) {
        Some(depths) => {
            let deepest = *depths.values().max().unwrap();
            region
                .point_indices
                .iter()
                .copied()
                .filter(|&i| depths[&grid.key_of_point(i)] == deepest)
                .collect()
        }
        None => region.point_indices.clone(),
    };
    let positions = cloud.positions();
    let n = region.point_indices.len() as f64;
    let mut centroid = [0.0; 3];
    for &i in &region.point_indices {
        for a in 0..3 {
            centroid[a] += positions[i][a];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let point_index = candidates
        .iter()
        .copied()
        .min_by(|&a, &b| {
            squared_distance(&positions[a], &centroid)
                .total_cmp(&squared_distance(&positions[b], &centroid))
                .then(a.cmp(&b))
        })
        .expect("regions are never empty");
    Ok(Some(Correction {
        point_index,
        polarity: region.kind.correction(),
        region_size: region.size(),
    }))
}

/// Knobs of one simulated session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub max_clicks: u32,
    pub epsilon: f64,
    pub grid_resolution: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_clicks: 20,
            epsilon: crate::clickmap::DEFAULT_EPSILON,
            grid_resolution: 0.05,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clicks == 0 {
            return Err(Error::arg("max_clicks must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::arg("epsilon must be positive"));
        }
        if !(self.grid_resolution > 0.0 && self.grid_resolution.is_finite()) {
            return Err(Error::arg("grid resolution must be positive"));
        }
        Ok(())
    }
}

/// Runs the click-by-click loop for one instance until the prediction is
/// error-free or `max_clicks` clicks were placed.
///
/// `header` carries the logging metadata; its ground-truth field is filled
/// here. A backend failure ends the trace as aborted at the last good step.
pub fn run_simulated_session(
    scene: &Scene,
    grid: &VoxelGrid,
    instance_id: u32,
    backend: &mut dyn SegmenterBackend,
    config: &SessionConfig,
    mut header: TraceHeader,
) -> Result<SessionTrace> {
    config.validate()?;
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg(format!("scene {} has no instance labels", scene.scene_id)))?;
    let gt = labels
        .mask(instance_id)
        .ok_or_else(|| Error::arg(format!("unknown instance {instance_id}")))?;
    let cloud = &scene.cloud;
    header.gt = MaskRuns::encode(&gt);
    header.n_points = cloud.len();

    let session = format!("{}/{}", scene.scene_id, instance_id);
    let adaptive = backend.capabilities().supports_adaptation;
    let mut pred = vec![false; cloud.len()];
    let mut clicks: Vec<Click> = Vec::new();
    let mut steps = Vec::new();
    let mut status = SessionStatus::Capped;
    let mut abort_reason = None;

    while clicks.len() < config.max_clicks as usize {
        let Some(correction) = next_test_click(&gt, &pred, grid, cloud)? else {
            status = SessionStatus::Done;
            break;
        };
        clicks.push(correction.into_click(cloud, clicks.len() as u32 + 1));
        let channels = encode_clicks(cloud, &clicks, config.epsilon)?;
        let request = SegmentRequest {
            session: &session,
            cloud,
            clicks: &clicks,
            channels: &channels,
        };
        let outcome = if adaptive {
            backend
                .adapt(&session, &clicks)
                .and_then(|_| segment(backend, &request))
        } else {
            segment(backend, &request)
        };
        let mask = match outcome {
            Ok(mask) => mask,
            Err(e) => {
                status = SessionStatus::Aborted;
                abort_reason = Some(e.to_string());
                break;
            }
        };
        pred = mask.binary();
        let (n_fn, n_fp) = gt.iter().zip(&pred).fold((0, 0), |(f_n, f_p), (&g, &p)| {
            (f_n + usize::from(g && !p), f_p + usize::from(!g && p))
        });
        steps.push(TraceStep {
            step: clicks.len() as u32,
            click: *clicks.last().unwrap(),
            iou: iou(&gt, &pred)?,
            n_fn_points: n_fn,
            n_fp_points: n_fp,
            confidence: mask.confidence(),
            mask: MaskRuns::encode(&pred),
        });
    }
    if status == SessionStatus::Capped
        && steps
            .last()
            .is_some_and(|s| s.n_fn_points + s.n_fp_points == 0)
    {
        status = SessionStatus::Done;
    }
    Ok(SessionTrace {
        header,
        steps,
        status,
        abort_reason,
    })
}
