//! Synthetic labeled scenes: a floor plane (background) and three solid
//! objects lifted off it and spaced apart, so every object is separable.
//! Used as the bundled regression suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::ClassMap;
use crate::scene_io::{save_scene, InstanceLabeling, PointCloud, Scene};
use crate::Result;

pub const DEFAULT_SUITE_SCENES: usize = 10;
pub const DEFAULT_SUITE_SEED: u64 = 7;

const SPACING: f64 = 0.035;
const JITTER: f64 = 0.007;
const FLOOR_SPACING: f64 = 0.04;
/// Clearance between the floor and the objects' bottoms.
const LIFT: f64 = 0.12;
const SLOTS: [f64; 3] = [-0.95, 0.0, 0.95];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { half: [f64; 3] },
    Ball { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    fn class(&self) -> &'static str {
        match self {
            Shape::Box { .. } => "box",
            Shape::Ball { .. } => "ball",
            Shape::Cylinder { .. } => "cylinder",
        }
    }

    /// Half extents of the bounding box.
    fn half_extents(&self) -> [f64; 3] {
        match *self {
            Shape::Box { half } => half,
            Shape::Ball { radius } => [radius; 3],
            Shape::Cylinder { radius, height } => [radius, radius, height / 2.0],
        }
    }

    /// Membership of an offset from the shape's center.
    fn contains(&self, d: [f64; 3]) -> bool {
        match *self {
            Shape::Box { half } => (0..3).all(|a| d[a].abs() <= half[a]),
            Shape::Ball { radius } => d.iter().map(|v| v * v).sum::<f64>() <= radius * radius,
            Shape::Cylinder { radius, height } => {
                d[0] * d[0] + d[1] * d[1] <= radius * radius && d[2].abs() <= height / 2.0
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Shape {
        match rng.random_range(0..3) {
            0 => Shape::Box {
                half: [
                    rng.random_range(0.1..0.25),
                    rng.random_range(0.1..0.45),
                    rng.random_range(0.1..0.25),
                ],
            },
            1 => Shape::Ball {
                radius: rng.random_range(0.12..0.25),
            },
            _ => Shape::Cylinder {
                radius: rng.random_range(0.1..0.2),
                height: rng.random_range(0.2..0.6),
            },
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.random_range(-amount..=amount)
}

fn tint(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-0.01f32..=0.01)).clamp(0.0, 1.0))
}

/// One synthetic scene and the classes of its three objects (ids 1 to 3).
pub fn synth_scene(index: usize, seed: u64) -> (Scene, BTreeMap<u32, String>) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut ids = Vec::new();

    let (nx, ny) = ((3.0 / FLOOR_SPACING) as i32, (2.0 / FLOOR_SPACING) as i32);
    for i in 0..=nx {
        for j in 0..=ny {
            positions.push([
                -1.5 + i as f64 * FLOOR_SPACING,
                -1.0 + j as f64 * FLOOR_SPACING,
                jitter(&mut rng, 0.003),
            ]);
            colors.push(tint(&mut rng, [0.5, 0.5, 0.5]));
            ids.push(0);
        }
    }

    let palette: [[f32; 3]; 3] = [[0.8, 0.2, 0.2], [0.2, 0.7, 0.3], [0.2, 0.3, 0.8]];
    let mut classes = BTreeMap::new();
    for (slot, &x) in SLOTS.iter().enumerate() {
        let shape = Shape::random(&mut rng);
        let half = shape.half_extents();
        let center = [x, rng.random_range(-0.2..0.2), LIFT + half[2]];
        let steps = half.map(|h| (h / SPACING).ceil() as i32);
        let id = slot as u32 + 1;
        for i in -steps[0]..=steps[0] {
            for j in -steps[1]..=steps[1] {
                for k in -steps[2]..=steps[2] {
                    let d = [
                        i as f64 * SPACING + jitter(&mut rng, JITTER),
                        j as f64 * SPACING + jitter(&mut rng, JITTER),
                        k as f64 * SPACING + jitter(&mut rng, JITTER),
                    ];
                    if shape.contains(d) {
                        positions.push([center[0] + d[0], center[1] + d[1], center[2] + d[2]]);
                        colors.push(tint(&mut rng, palette[slot]));
                        ids.push(id);
                    }
                }
            }
        }
        classes.insert(id, shape.class().to_string());
    }

    let cloud = PointCloud::new(positions, Some(colors)).expect("synthetic points are valid");
    let scene = Scene::new(
        format!("synth_{index:02}"),
        cloud,
        Some(InstanceLabeling::new(ids)),
    )
    .expect("labels match points");
    (scene, classes)
}

/// Writes `n_scenes` scenes in the internal format plus `classes.json` into
/// `dir`.
pub fn write_suite(dir: &Path, n_scenes: usize, seed: u64) -> Result<ClassMap> {
    fs::create_dir_all(dir)?;
    let mut class_map = ClassMap::new();
    for index in 0..n_scenes {
        let (scene, classes) = synth_scene(index, seed);
        save_scene(&scene, &dir.join(format!("{}.json", scene.scene_id)))?;
        class_map.insert(scene.scene_id, classes);
    }
    fs::write(
        dir.join("classes.json"),
        serde_json::to_string_pretty(&class_map)?,
    )?;
    Ok(class_map)
}
