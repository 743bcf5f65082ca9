//! Point clouds with instance labels, plus the spatial indexes built on them.

use std::collections::BTreeMap;

use crate::{Error, Result};

mod knn;
mod ply;
mod store;
mod voxel;

pub use knn::{build_knn_graph, NeighborGraph};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyEncoding};
pub use store::{
    blob_path_for, decode_scene, encode_scene, load_scene, save_scene, SceneManifest,
    SCENE_FORMAT_VERSION,
};
pub use voxel::{voxelize, VoxelGrid, VoxelKey};

/// Positions in meters with optional per-point colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Option<Vec<[f32; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::arg("point cloud must contain at least one point"));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::arg(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(colors) = &colors {
            if colors.len() != positions.len() {
                return Err(Error::arg(format!(
                    "{} colors for {} points",
                    colors.len(),
                    positions.len()
                )));
            }
            if let Some(i) = colors
                .iter()
                .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
            {
                return Err(Error::arg(format!("color of point {i} is outside [0, 1]")));
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn has_color(&self) -> bool {
        self.colors.is_some()
    }

    /// Per-point feature dimensionality: 3 for positions only, 6 with color.
    pub fn channels(&self) -> usize {
        if self.has_color() {
            6
        } else {
            3
        }
    }

    /// Componentwise minimum and maximum of the positions.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        bounds_of(self.positions.iter())
    }

    /// Index of the point closest to `target`, lowest index on ties.
    pub fn nearest_point(&self, target: [f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.positions.iter().enumerate() {
            let d = squared_distance(p, &target);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

pub(crate) fn bounds_of<'a>(points: impl Iterator<Item = &'a [f64; 3]>) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(p[axis]);
            hi[axis] = hi[axis].max(p[axis]);
        }
    }
    (lo, hi)
}

#[inline]
pub(crate) fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Per-point instance ids. Id 0 is background / unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabeling {
    ids: Vec<u32>,
    index: BTreeMap<u32, Vec<usize>>,
}

impl InstanceLabeling {
    pub fn new(ids: Vec<u32>) -> Self {
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if id != 0 {
                index.entry(id).or_default().push(i);
            }
        }
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Nonzero instance ids in ascending order.
    pub fn instance_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.index.keys().copied()
    }

    pub fn contains(&self, instance_id: u32) -> bool {
        self.index.contains_key(&instance_id)
    }

    /// Point indices of an instance, ascending.
    pub fn points(&self, instance_id: u32) -> Option<&[usize]> {
        self.index.get(&instance_id).map(Vec::as_slice)
    }

    /// Binary foreground mask of one instance.
    pub fn mask(&self, instance_id: u32) -> Option<Vec<bool>> {
        self.contains(instance_id)
            .then(|| self.ids.iter().map(|&id| id == instance_id).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub cloud: PointCloud,
    pub labels: Option<InstanceLabeling>,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        cloud: PointCloud,
        labels: Option<InstanceLabeling>,
    ) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != cloud.len() {
                return Err(Error::arg(format!(
                    "{} instance labels for {} points",
                    labels.len(),
                    cloud.len()
                )));
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            cloud,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}
