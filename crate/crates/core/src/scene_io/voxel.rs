use std::collections::HashMap;

use crate::scene_io::PointCloud;
use crate::{Error, Result};

/// Integer voxel coordinate.
pub type VoxelKey = [i32; 3];

/// Sparse voxel hash over a point cloud, anchored at the cloud's minimum
/// corner so the grid is translation invariant.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    resolution: f64,
    origin: [f64; 3],
    cells: HashMap<VoxelKey, Vec<usize>>,
    point_keys: Vec<VoxelKey>,
}

impl VoxelGrid {
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn n_points(&self) -> usize {
        self.point_keys.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Voxel holding point `index`.
    pub fn key_of_point(&self, index: usize) -> VoxelKey {
        self.point_keys[index]
    }

    pub fn points_in(&self, key: &VoxelKey) -> Option<&[usize]> {
        self.cells.get(key).map(Vec::as_slice)
    }

    pub fn is_occupied(&self, key: &VoxelKey) -> bool {
        self.cells.contains_key(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&VoxelKey, &[usize])> {
        self.cells.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Voxel key of an arbitrary coordinate under this grid's origin and
    /// resolution.
    pub fn key_of(&self, position: &[f64; 3]) -> Option<VoxelKey> {
        key_for(position, &self.origin, self.resolution)
    }
}

fn key_for(position: &[f64; 3], origin: &[f64; 3], resolution: f64) -> Option<VoxelKey> {
    let mut key = [0i32; 3];
    for axis in 0..3 {
        let cell = ((position[axis] - origin[axis]) / resolution).floor();
        if !(i32::MIN as f64..=i32::MAX as f64).contains(&cell) {
            return None;
        }
        key[axis] = cell as i32;
    }
    Some(key)
}

pub fn voxelize(cloud: &PointCloud, resolution: f64) -> Result<VoxelGrid> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::arg(format!(
            "voxel resolution must be positive, got {resolution}"
        )));
    }
    let (origin, _) = cloud.bounds();
    let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
    let mut point_keys = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = key_for(p, &origin, resolution).ok_or_else(|| {
            Error::arg(format!(
                "point {i} lies outside the addressable voxel range"
            ))
        })?;
        cells.entry(key).or_default().push(i);
        point_keys.push(key);
    }
    Ok(VoxelGrid {
        resolution,
        origin,
        cells,
        point_keys,
    })
}
