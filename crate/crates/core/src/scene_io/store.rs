//! Internal scene format: a JSON manifest next to a little-endian blob with
//! the same stem and a `.bin` extension.
//!
//! Blob layout: `n_points` float64 xyz triples, then float32 rgb triples when
//! `has_color`, then uint32 instance ids when `has_labels`. The manifest's
//! checksum is the CRC32 of the whole blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scene_io::{InstanceLabeling, PointCloud, Scene};
use crate::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub scene_id: String,
    pub n_points: usize,
    pub has_color: bool,
    pub has_labels: bool,
    pub checksum: u32,
}

impl SceneManifest {
    fn blob_len(&self) -> usize {
        self.n_points
            * (24 + if self.has_color { 12 } else { 0 } + if self.has_labels { 4 } else { 0 })
    }
}

/// Blob path paired with a manifest path.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode_scene(scene: &Scene) -> (SceneManifest, Vec<u8>) {
    let cloud = &scene.cloud;
    let mut blob = Vec::with_capacity(cloud.len() * 40);
    for p in cloud.positions() {
        for c in p {
            blob.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(colors) = cloud.colors() {
        for rgb in colors {
            for c in rgb {
                blob.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    if let Some(labels) = &scene.labels {
        for id in labels.ids() {
            blob.extend_from_slice(&id.to_le_bytes());
        }
    }
    let manifest = SceneManifest {
        version: SCENE_FORMAT_VERSION,
        scene_id: scene.scene_id.clone(),
        n_points: cloud.len(),
        has_color: cloud.has_color(),
        has_labels: scene.labels.is_some(),
        checksum: crc32fast::hash(&blob),
    };
    (manifest, blob)
}

/// Rebuilds a scene from a manifest and its blob, verifying version, length
/// and checksum.
pub fn decode_scene(manifest: &SceneManifest, blob: &[u8], origin: &Path) -> Result<Scene> {
    let fail = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    if manifest.version != SCENE_FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported scene format version {} (expected {SCENE_FORMAT_VERSION})",
            manifest.version
        )));
    }
    if blob.len() != manifest.blob_len() {
        return Err(fail(format!(
            "blob holds {} bytes, manifest implies {}",
            blob.len(),
            manifest.blob_len()
        )));
    }
    let actual = crc32fast::hash(blob);
    if actual != manifest.checksum {
        return Err(fail(format!(
            "checksum mismatch: manifest {:08x}, blob {actual:08x}",
            manifest.checksum
        )));
    }

    let n = manifest.n_points;
    let (pos_bytes, rest) = blob.split_at(n * 24);
    let positions = pos_bytes
        .chunks_exact(24)
        .map(|c| [0, 1, 2].map(|a| f64::from_le_bytes(c[a * 8..a * 8 + 8].try_into().unwrap())))
        .collect();
    let (colors, rest) = if manifest.has_color {
        let (col_bytes, rest) = rest.split_at(n * 12);
        let colors = col_bytes
            .chunks_exact(12)
            .map(|c| [0, 1, 2].map(|a| f32::from_le_bytes(c[a * 4..a * 4 + 4].try_into().unwrap())))
            .collect();
        (Some(colors), rest)
    } else {
        (None, rest)
    };
    let labels = manifest.has_labels.then(|| {
        InstanceLabeling::new(
            rest.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    });
    let cloud = PointCloud::new(positions, colors).map_err(|e| fail(e.to_string()))?;
    Scene::new(manifest.scene_id.clone(), cloud, labels)
}

/// Writes `path` (manifest) and its sibling `.bin` blob.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<SceneManifest> {
    let (manifest, blob) = encode_scene(scene);
    fs::write(blob_path_for(path), &blob)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest: SceneManifest =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("invalid manifest: {e}"),
        })?;
    let blob_path = blob_path_for(path);
    let blob = fs::read(&blob_path)?;
    decode_scene(&manifest, &blob, &blob_path)
}
