//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.
//!
//! Set `CLICK3D_BLESS=1` to rewrite the frozen regression report after an
//! intended change to the reference segmenter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use click3d_core::annotator::{extract_error_regions, next_test_click, ErrorKind};
use click3d_core::clickmap::{encode_clicks, Click, Polarity, DEFAULT_EPSILON};
use click3d_core::metrics::{instance_ap, iou, iou_at_k, noc, Prediction};
use click3d_core::scene_io::{save_scene, voxelize, InstanceLabeling, PointCloud, Scene};
use click3d_core::segmenter::{ExternalBackend, ExternalInit, SegmentRequest, SegmenterBackend};
use click3d_core::synth::synth_scene;
use click3d_service::{ClickTarget, CreateSession, ServiceConfig, SessionManager};

const CLI: &str = env!("CARGO_BIN_EXE_click3d");
const TEST_BACKEND: &str = env!("CARGO_BIN_EXE_click3d-test-backend");

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn click3d(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(CLI).args(args).output().expect("click3d runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_suite(dir: &Path, scenes: usize) -> Result<(), String> {
    let (code, _, err) = click3d(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--scenes",
        &scenes.to_string(),
    ]);
    ensure!(code == 0, "synth failed: {err}");
    Ok(())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

// Click channel

fn in_cube(p: [f64; 3], c: [f64; 3], eps: f64) -> bool {
    (0..3).all(|a| (p[a] - c[a]).abs() <= eps)
}

fn oracle_channels(points: &[[f64; 3]], clicks: &[Click], eps: f64) -> (Vec<bool>, Vec<bool>) {
    let hit = |p: [f64; 3], pol: Polarity| {
        clicks
            .iter()
            .any(|c| c.polarity == pol && in_cube(p, c.position, eps))
    };
    (
        points.iter().map(|&p| hit(p, Polarity::Positive)).collect(),
        points.iter().map(|&p| hit(p, Polarity::Negative)).collect(),
    )
}

fn click_channel_oracle() -> Outcome {
    let mut r = rng(1);
    let mut spent = Duration::ZERO;
    let mut set_bits = 0usize;
    for case in 0..50 {
        let n = r.random_range(1..=1000);
        let extent = r.random_range(0.1..2.0);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| [0; 3].map(|_| r.random_range(0.0..extent)))
            .collect();
        let cloud = PointCloud::new(points.clone(), None).unwrap();
        let n_clicks = r.random_range(0..=10);
        let clicks: Vec<Click> = (0..n_clicks)
            .map(|k| {
                let polarity = if r.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                // Half the clicks sit on a point, some exactly one epsilon off it.
                let position = match r.random_range(0..3) {
                    0 => points[r.random_range(0..n)],
                    1 => {
                        let p = points[r.random_range(0..n)];
                        [p[0] + DEFAULT_EPSILON, p[1], p[2] - DEFAULT_EPSILON]
                    }
                    _ => [0; 3].map(|_| r.random_range(0.0..extent)),
                };
                Click {
                    ordinal: k + 1,
                    polarity,
                    position,
                    point_index: None,
                }
            })
            .collect();
        let start = Instant::now();
        let got = encode_clicks(&cloud, &clicks, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        spent += start.elapsed();
        let (t_p, t_n) = oracle_channels(&points, &clicks, DEFAULT_EPSILON);
        ensure!(
            got.t_p == t_p && got.t_n == t_n,
            "case {case}: channels differ from the oracle"
        );
        set_bits += t_p.iter().chain(&t_n).filter(|&&b| b).count();
    }
    ensure!(
        set_bits > 0,
        "degenerate cases: no point was ever inside a click cube"
    );
    ensure!(spent < Duration::from_secs(1), "took {spent:?}");
    Ok(format!("50 clouds exact, {set_bits} bits set, {spent:.1?}"))
}

// Error regions

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut x = x;
        while self.0[x] != root {
            let next = self.0[x];
            self.0[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

/// Components of one error kind as (sorted voxel set, sorted points).
fn union_find_regions(cells: &[[i32; 3]], wrong: &[bool]) -> BTreeSet<(Vec<[i32; 3]>, Vec<usize>)> {
    let mut voxels: Vec<[i32; 3]> = cells
        .iter()
        .zip(wrong)
        .filter(|(_, &w)| w)
        .map(|(c, _)| *c)
        .collect();
    voxels.sort_unstable();
    voxels.dedup();
    let index: HashMap<[i32; 3], usize> = voxels.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut dsu = Dsu((0..voxels.len()).collect());
    for (i, v) in voxels.iter().enumerate() {
        for d in 0..27 {
            let off = [d / 9 - 1, d / 3 % 3 - 1, d % 3 - 1];
            if let Some(&j) = index.get(&[v[0] + off[0], v[1] + off[1], v[2] + off[2]]) {
                dsu.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, (Vec<[i32; 3]>, Vec<usize>)> = BTreeMap::new();
    for (i, v) in voxels.iter().enumerate() {
        groups.entry(dsu.find(i)).or_default().0.push(*v);
    }
    for (p, c) in cells.iter().enumerate().filter(|&(p, _)| wrong[p]) {
        groups.get_mut(&dsu.find(index[c])).unwrap().1.push(p);
    }
    groups.into_values().collect()
}

fn random_boxes_mask(
    r: &mut ChaCha8Rng,
    cells: &[[i32; 3]],
    dims: [i32; 3],
    n: usize,
) -> Vec<bool> {
    let boxes: Vec<([i32; 3], [i32; 3])> = (0..n)
        .map(|_| {
            let lo = dims.map(|d| r.random_range(0..d));
            let hi = [0, 1, 2].map(|a| (lo[a] + r.random_range(0..=dims[a] / 2)).min(dims[a] - 1));
            (lo, hi)
        })
        .collect();
    cells
        .iter()
        .map(|c| {
            boxes
                .iter()
                .any(|(lo, hi)| (0..3).all(|a| lo[a] <= c[a] && c[a] <= hi[a]))
        })
        .collect()
}

fn error_region_oracle() -> Outcome {
    let mut r = rng(2);
    let res = 0.05;
    let mut spent = Duration::ZERO;
    let mut n_regions = 0;
    for case in 0..100 {
        let dims = [0; 3].map(|_| r.random_range(1..=21));
        let occupancy = r.random_range(0.3..1.0);
        // Anchor at the origin pins the grid; other points sit strictly
        // inside their cells.
        let mut points = vec![[0.0; 3]];
        let mut cells = vec![[0, 0, 0]];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    if !r.random_bool(occupancy) {
                        continue;
                    }
                    for _ in 0..r.random_range(1..=2) {
                        let c = [x, y, z];
                        points.push(c.map(|v| (v as f64 + r.random_range(0.1..0.9)) * res));
                        cells.push(c);
                    }
                }
            }
        }
        let cloud = PointCloud::new(points, None).unwrap();
        let (gt, pred): (Vec<bool>, Vec<bool>) = if case % 2 == 0 {
            let gt = random_boxes_mask(&mut r, &cells, dims, 2);
            let flip = random_boxes_mask(&mut r, &cells, dims, 3);
            let pred = gt.iter().zip(&flip).map(|(&g, &f)| g ^ f).collect();
            (gt, pred)
        } else {
            let gt: Vec<bool> = cells.iter().map(|_| r.random_bool(0.3)).collect();
            let pred = cells.iter().map(|_| r.random_bool(0.3)).collect();
            (gt, pred)
        };

        let start = Instant::now();
        let grid = voxelize(&cloud, res).map_err(|e| e.to_string())?;
        let regions = extract_error_regions(&gt, &pred, &grid).map_err(|e| e.to_string())?;
        let correction = next_test_click(&gt, &pred, &grid, &cloud).map_err(|e| e.to_string())?;
        spent += start.elapsed();

        for kind in [ErrorKind::FalseNegative, ErrorKind::FalsePositive] {
            let wrong: Vec<bool> = gt
                .iter()
                .zip(&pred)
                .map(|(&g, &p)| {
                    if kind == ErrorKind::FalseNegative {
                        g && !p
                    } else {
                        !g && p
                    }
                })
                .collect();
            let expected = union_find_regions(&cells, &wrong);
            let got: BTreeSet<_> = regions
                .iter()
                .filter(|g| g.kind == kind)
                .map(|g| (g.voxels.clone(), g.point_indices.clone()))
                .collect();
            ensure!(
                got == expected,
                "case {case}: {kind:?} regions differ from union-find"
            );
            n_regions += expected.len();
        }
        ensure!(
            regions.windows(2).all(|w| w[0].size() >= w[1].size()),
            "case {case}: regions not ordered by size"
        );
        match (correction, regions.first()) {
            (None, None) => {}
            (Some(c), Some(largest)) => {
                let i = c.point_index;
                ensure!(
                    gt[i] != pred[i],
                    "case {case}: click on a correctly labeled point"
                );
                let want = if gt[i] {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                ensure!(c.polarity == want, "case {case}: wrong polarity");
                ensure!(
                    c.region_size == largest.size(),
                    "case {case}: not in a largest region"
                );
            }
            _ => {
                return Err(format!(
                    "case {case}: click presence disagrees with regions"
                ))
            }
        }
    }
    ensure!(spent < Duration::from_secs(10), "took {spent:?}");
    Ok(format!("100 grids, {n_regions} regions match, {spent:.1?}"))
}

// Interior click

/// 9x9 one-voxel-thick plane of points, one per voxel, plus a point pinning
/// the grid origin. Returns the cloud and each point's cell.
fn plane(size: i32) -> (PointCloud, Vec<[i32; 3]>) {
    let res = 0.05;
    let mut points = vec![[0.0; 3]];
    let mut cells = vec![[0, 0, 0]];
    for x in 0..size {
        for y in 0..size {
            points.push([(x as f64 + 0.5) * res, (y as f64 + 0.5) * res, 0.5 * res]);
            cells.push([x, y, 0]);
        }
    }
    (PointCloud::new(points, None).unwrap(), cells)
}

fn chebyshev(a: [i32; 3], b: [i32; 3]) -> i32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).max().unwrap()
}

/// Exhaustive: the slab voxel farthest from every boundary voxel in `outside`.
fn deepest(slab: &BTreeSet<[i32; 3]>, outside: &BTreeSet<[i32; 3]>) -> Vec<[i32; 3]> {
    let dist = |v: [i32; 3]| outside.iter().map(|&o| chebyshev(v, o)).min().unwrap();
    let best = slab.iter().map(|&v| dist(v)).max().unwrap();
    slab.iter().copied().filter(|&v| dist(v) == best).collect()
}

fn center_rule() -> Outcome {
    let mut report = Vec::new();
    for (label, size, lo, kind) in [
        ("embedded missed slab", 9, 2, ErrorKind::FalseNegative),
        ("embedded spurious slab", 9, 2, ErrorKind::FalsePositive),
        ("isolated missed slab", 5, 0, ErrorKind::FalseNegative),
    ] {
        let (cloud, cells) = plane(size);
        let in_slab = |c: &[i32; 3]| (lo..lo + 5).contains(&c[0]) && (lo..lo + 5).contains(&c[1]);
        let slab_mask: Vec<bool> = cells.iter().map(in_slab).collect();
        let (gt, pred) = match kind {
            ErrorKind::FalseNegative => (slab_mask.clone(), vec![false; cells.len()]),
            ErrorKind::FalsePositive => (vec![false; cells.len()], slab_mask.clone()),
        };
        let slab: BTreeSet<[i32; 3]> = cells.iter().copied().filter(|c| in_slab(c)).collect();
        // Boundary: other occupied voxels when there are any, otherwise the
        // empty voxels around the slab in its plane.
        let occupied_outside: BTreeSet<[i32; 3]> =
            cells.iter().copied().filter(|c| !in_slab(c)).collect();
        let outside = if occupied_outside.is_empty() {
            (lo - 1..lo + 6)
                .flat_map(|x| (lo - 1..lo + 6).map(move |y| [x, y, 0]))
                .filter(|c| !slab.contains(c))
                .collect()
        } else {
            occupied_outside
        };
        let expected = deepest(&slab, &outside);
        ensure!(
            expected == vec![[lo + 2, lo + 2, 0]],
            "{label}: fixture has no unique center"
        );

        let grid = voxelize(&cloud, 0.05).unwrap();
        let c = next_test_click(&gt, &pred, &grid, &cloud)
            .map_err(|e| e.to_string())?
            .ok_or(format!("{label}: no click"))?;
        ensure!(
            cells[c.point_index] == expected[0],
            "{label}: clicked {:?}, expected {:?}",
            cells[c.point_index],
            expected[0]
        );
        ensure!(c.polarity == kind.correction(), "{label}: wrong polarity");
        report.push(label);
    }
    Ok(format!("center voxel chosen for {}", report.join(", ")))
}

// Metrics

/// Greedy matching, found by search: the unique assignment in which each
/// prediction, taken by confidence, holds the best still-free ground truth
/// when that clears the threshold.
fn brute_force_matches(preds: &[Prediction], gts: &[Vec<bool>], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    let table: Vec<Vec<f64>> = order
        .iter()
        .map(|&p| {
            gts.iter()
                .map(|g| iou(&preds[p].mask, g).unwrap())
                .collect()
        })
        .collect();
    let mut found: Vec<Vec<Option<usize>>> = Vec::new();
    let mut assignment = vec![None; order.len()];
    fn search(
        k: usize,
        table: &[Vec<f64>],
        n_gt: usize,
        assignment: &mut Vec<Option<usize>>,
        found: &mut Vec<Vec<Option<usize>>>,
    ) {
        if k == table.len() {
            found.push(assignment.clone());
            return;
        }
        for choice in std::iter::once(None).chain((0..n_gt).map(Some)) {
            if choice.is_some() && assignment[..k].contains(&choice) {
                continue;
            }
            assignment[k] = choice;
            search(k + 1, table, n_gt, assignment, found);
        }
    }
    search(0, &table, gts.len(), &mut assignment, &mut found);

    let consistent = |a: &Vec<Option<usize>>, t: f64| {
        (0..a.len()).all(|k| {
            let free: Vec<usize> = (0..gts.len())
                .filter(|g| !a[..k].contains(&Some(*g)))
                .collect();
            match a[k] {
                Some(g) => {
                    table[k][g] >= t
                        && free.iter().all(|&h| {
                            table[k][h] < table[k][g] || (table[k][h] == table[k][g] && g <= h)
                        })
                }
                None => free.iter().all(|&h| table[k][h] < t),
            }
        })
    };
    let matches: Vec<_> = found
        .into_iter()
        .filter(|a| consistent(a, threshold))
        .collect();
    assert_eq!(matches.len(), 1, "greedy matching must be unique");
    matches[0].iter().map(Option::is_some).collect()
}

/// Area under the interpolated precision-recall curve.
fn oracle_ap(preds: &[Prediction], gts: &[Vec<bool>], threshold: f64) -> f64 {
    let tp = brute_force_matches(preds, gts, threshold);
    let (mut recall, mut precision) = (vec![0.0], vec![1.0]);
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / gts.len() as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    let mut area = 0.0;
    for i in 1..recall.len() {
        let envelope = precision[i..].iter().cloned().fold(0.0, f64::max);
        area += (recall[i] - recall[i - 1]) * envelope;
    }
    area
}

fn random_instance(
    r: &mut ChaCha8Rng,
    n_points: usize,
    max: usize,
) -> (Vec<Prediction>, Vec<Vec<bool>>) {
    let mask = |r: &mut ChaCha8Rng| loop {
        let m: Vec<bool> = (0..n_points).map(|_| r.random_bool(0.4)).collect();
        if m.iter().any(|&b| b) {
            break m;
        }
    };
    let n_gt = r.random_range(1..=max);
    let gts: Vec<Vec<bool>> = (0..n_gt).map(|_| mask(r)).collect();
    let n_pred = r.random_range(0..=max);
    let preds = (0..n_pred)
        .map(|_| {
            // Perturb a ground truth so IoUs spread over the thresholds.
            let base = &gts[r.random_range(0..n_gt)];
            let flip = r.random_range(0.0..0.5);
            let m: Vec<bool> = base.iter().map(|&b| b ^ r.random_bool(flip)).collect();
            Prediction {
                mask: m,
                confidence: r.random_range(0..4) as f64 / 4.0,
            }
        })
        .collect();
    (preds, gts)
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let e = |e: click3d_core::Error| e.to_string();

    ensure!(
        close(
            iou(&[true, true, false, false], &[false, true, true, false]).map_err(e)?,
            1.0 / 3.0
        ),
        "iou"
    );
    ensure!(
        iou(&[false; 4], &[false; 4]).map_err(e)? == 1.0,
        "iou of empty masks"
    );
    let curve = [0.5, 0.82, 0.86, 0.91];
    ensure!(
        [80.0, 85.0, 90.0].map(|q| noc(&curve, q, 20).unwrap()) == [2, 3, 4],
        "noc of a rising curve"
    );
    ensure!(noc(&[0.1; 25], 80.0, 20).map_err(e)? == 20, "noc cap");
    ensure!(
        noc(&[0.1, 0.1, 0.95], 90.0, 2).map_err(e)? == 2,
        "noc past the cap"
    );
    ensure!(
        close(iou_at_k(&[&[0.5, 0.9], &[0.7]], 3).map_err(e)?, 0.8),
        "iou@k holds the last value"
    );

    let span = |lo: usize, hi: usize| {
        (0..10)
            .map(|i| (lo..hi).contains(&i))
            .collect::<Vec<bool>>()
    };
    let gts = vec![span(0, 5), span(5, 10)];
    let preds = vec![
        Prediction {
            mask: span(0, 5),
            confidence: 0.9,
        },
        Prediction {
            mask: span(5, 7),
            confidence: 0.8,
        },
        Prediction {
            mask: span(5, 10),
            confidence: 0.7,
        },
    ];
    let s = instance_ap(&preds, &gts).map_err(e)?.ok_or("no AP")?;
    ensure!(
        close(s.ap, 5.0 / 6.0) && close(s.ap50, 5.0 / 6.0) && close(s.ap25, 1.0),
        "hand AP example: {s:?}"
    );

    let mut r = rng(4);
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let mut exhaustive = 0;
    for case in 0..1000 {
        let (preds, gts) = random_instance(&mut r, 24, 5);
        let s = instance_ap(&preds, &gts).map_err(e)?.ok_or("no AP")?;
        ensure!(
            s.ap <= s.ap50 + 1e-12 && s.ap50 <= s.ap25 + 1e-12,
            "case {case}: ordering {s:?}"
        );
        if case < 300 {
            let ap = thresholds
                .iter()
                .map(|&t| oracle_ap(&preds, &gts, t))
                .sum::<f64>()
                / 10.0;
            let ap50 = oracle_ap(&preds, &gts, 0.5);
            let ap25 = oracle_ap(&preds, &gts, 0.25);
            ensure!(
                close(s.ap, ap) && close(s.ap50, ap50) && close(s.ap25, ap25),
                "case {case}: {s:?} vs oracle ({ap}, {ap50}, {ap25})"
            );
            exhaustive += 1;
        }
    }
    Ok(format!(
        "hand examples, {exhaustive} exhaustive matchings, 1000 orderings"
    ))
}

// End-to-end evaluation

fn eval(data: &Path, out: &Path, extra: &[&str]) -> Result<(i32, String), String> {
    let mut args = vec![
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let (code, _, err) = click3d(&args);
    Ok((code, err))
}

fn protocol_sanity(suite: &Path) -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let oracle = work.path().join("oracle");
    let (code, err) = eval(suite, &oracle, &["--backend", "oracle"])?;
    ensure!(code == 0, "oracle run exited {code}: {err}");
    let report = read_json(&oracle.join("report.json"))?;
    for q in ["80", "85", "90"] {
        ensure!(
            report["noc"][q] == 1.0,
            "oracle NoC@{q} = {}",
            report["noc"][q]
        );
    }
    let sweep = read_json(&oracle.join("ap_sweep.json"))?;
    for row in sweep.as_array().unwrap() {
        for key in ["ap", "ap50", "ap25"] {
            ensure!(
                row[key] == 1.0,
                "oracle {key} at budget {} = {}",
                row["budget"],
                row[key]
            );
        }
    }

    let empty = work.path().join("empty");
    let (code, err) = eval(suite, &empty, &["--backend", "empty"])?;
    ensure!(code == 0, "empty run exited {code}: {err}");
    let report = read_json(&empty.join("report.json"))?;
    for q in ["80", "85", "90"] {
        ensure!(
            report["noc"][q] == 20.0,
            "empty NoC@{q} = {}",
            report["noc"][q]
        );
    }
    Ok(format!(
        "oracle AP 1 at {} budgets and NoC 1, empty NoC 20",
        sweep.as_array().unwrap().len()
    ))
}

fn reference_regression(suite: &Path) -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let (code, err) = eval(suite, work.path(), &["--backend", "ref"])?;
    ensure!(code == 0, "ref run exited {code}: {err}");
    let bytes = fs::read(work.path().join("report.json")).unwrap();
    let report: Value = serde_json::from_slice(&bytes).unwrap();
    let noc90 = report["noc"]["90"].as_f64().unwrap();
    let iou3 = report["iou_at_k"]["3"].as_f64().unwrap();

    let frozen = fixtures().join("synth_ref_report.json");
    if std::env::var_os("CLICK3D_BLESS").is_some() {
        fs::create_dir_all(fixtures()).unwrap();
        fs::write(&frozen, &bytes).unwrap();
    }
    let expected = fs::read(&frozen).map_err(|e| format!("{}: {e}", frozen.display()))?;
    ensure!(noc90 <= 3.0, "NoC@90 = {noc90}");
    ensure!(iou3 >= 0.95, "IoU@3 = {iou3}");
    ensure!(
        bytes == expected,
        "report.json differs from the frozen fixture"
    );
    Ok(format!(
        "NoC@90 {noc90:.3}, IoU@3 {iou3:.4}, report matches the fixture"
    ))
}

fn determinism(suite: &Path) -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let runs = [("a", "3"), ("b", "3"), ("serial", "1")];
    for (name, threads) in runs {
        let (code, err) = eval(
            suite,
            &work.path().join(name),
            &["--threads", threads, "--seed", "11"],
        )?;
        ensure!(code == 0, "run {name} exited {code}: {err}");
    }
    let a = tree(&work.path().join("a"));
    ensure!(
        a.keys().any(|p| p.starts_with("traces")),
        "no traces written"
    );
    ensure!(
        a == tree(&work.path().join("b")),
        "repeated parallel runs differ"
    );
    ensure!(
        a == tree(&work.path().join("serial")),
        "parallel and serial runs differ"
    );
    Ok(format!("{} files identical across 3 runs", a.len()))
}

// Latency

/// A 6.4 m square floor at 1 cm spacing with boxes standing on it.
fn large_room() -> (Scene, Vec<u32>) {
    let mut r = rng(8);
    let mut positions = Vec::with_capacity(510_000);
    let mut colors = Vec::with_capacity(510_000);
    let mut ids = Vec::with_capacity(510_000);
    for x in 0..640 {
        for y in 0..640 {
            positions.push([
                x as f64 * 0.01,
                y as f64 * 0.01,
                r.random_range(-0.002..0.002),
            ]);
            colors.push([0.55, 0.5, 0.45]);
            ids.push(0);
        }
    }
    let mut objects = Vec::new();
    for id in 1..=8u32 {
        let center = [
            0.6 + ((id - 1) % 4) as f64 * 1.5,
            1.5 + ((id - 1) / 4) as f64 * 3.0,
        ];
        let half = [
            r.random_range(0.2..0.4),
            r.random_range(0.2..0.4),
            r.random_range(0.2..0.5),
        ];
        let color = [0; 3].map(|_| r.random_range(0.0..1.0f32));
        // Surface samples at roughly 1 cm spacing.
        let area =
            2.0 * (4.0 * half[0] * half[1] + 4.0 * half[0] * half[2] + 4.0 * half[1] * half[2]);
        for _ in 0..(area * 1e4 * 0.9) as usize {
            let mut p = [0; 3].map(|_| r.random_range(-1.0..1.0));
            let face = r.random_range(0..3);
            p[face] = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            positions.push([
                center[0] + p[0] * half[0],
                center[1] + p[1] * half[1],
                0.01 + half[2] * (1.0 + p[2]),
            ]);
            colors.push(color);
            ids.push(id);
        }
        objects.push(id);
    }
    let cloud = PointCloud::new(positions, Some(colors)).unwrap();
    (
        Scene::new("room", cloud, Some(InstanceLabeling::new(ids))).unwrap(),
        objects,
    )
}

fn latency() -> Outcome {
    let (scene, objects) = large_room();
    let n = scene.len();
    ensure!(n >= 500_000, "room has only {n} points");
    let grid = voxelize(&scene.cloud, 0.05).unwrap();
    let labels = scene.labels.clone().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manager = SessionManager::new(ServiceConfig::new(dir.path())).map_err(|e| e.to_string())?;
    let cloud = scene.cloud.clone();
    manager.add_scene(scene, None).map_err(|e| e.to_string())?;

    let mut samples = Vec::new();
    for &id in &objects[..4] {
        let gt = labels.mask(id).unwrap();
        let session = manager
            .create_session(&CreateSession {
                scene_id: "room".into(),
                instance_id: Some(id),
                ..Default::default()
            })
            .map_err(|e| e.to_string())?;
        let mut pred = vec![false; n];
        for _ in 0..8 {
            let Some(c) = next_test_click(&gt, &pred, &grid, &cloud).map_err(|e| e.to_string())?
            else {
                break;
            };
            let target = ClickTarget::Position(cloud.positions()[c.point_index]);
            let start = Instant::now();
            let outcome = manager
                .add_click(&session.session_id, target, c.polarity)
                .map_err(|e| e.to_string())?;
            samples.push(start.elapsed());
            pred = outcome.state.mask.binary();
        }
    }
    samples.sort();
    let p95 = samples[(samples.len() * 95).div_ceil(100) - 1];
    ensure!(
        p95 <= Duration::from_millis(500),
        "p95 {p95:?} over {} clicks",
        samples.len()
    );
    Ok(format!(
        "{n} points, p95 {p95:.1?} over {} clicks",
        samples.len()
    ))
}

// Wire protocol

fn scripted_session() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = synth_scene(0, 7);
    let manifest = dir.path().join("scene.json");
    save_scene(&scene, &manifest).map_err(|e| e.to_string())?;
    let log = dir.path().join("messages.log");
    let command = format!("'{TEST_BACKEND}' --mode echo --log '{}'", log.display());
    let init = ExternalInit {
        n_points: scene.len(),
        channels: scene.cloud.channels(),
        epsilon: DEFAULT_EPSILON,
        scene_blob: manifest,
    };
    let mut backend = ExternalBackend::connect(&command, &init, Duration::from_secs(20))
        .map_err(|e| e.to_string())?;
    ensure!(
        !backend.capabilities().supports_adaptation,
        "echo backend claims adaptation"
    );

    let points = scene.cloud.positions();
    let mut r = rng(9);
    let mut clicks = Vec::new();
    for k in 0..5u32 {
        let i = r.random_range(0..scene.len());
        let polarity = if k % 2 == 0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        clicks.push(Click::on_point(&scene.cloud, i, polarity, k + 1));
        let channels =
            encode_clicks(&scene.cloud, &clicks, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let mask = backend
            .segment(&SegmentRequest {
                session: "scripted",
                cloud: &scene.cloud,
                clicks: &clicks,
                channels: &channels,
            })
            .map_err(|e| e.to_string())?;
        let (t_p, _) = oracle_channels(points, &clicks, DEFAULT_EPSILON);
        ensure!(
            mask.binary() == t_p,
            "step {}: mask differs from the positive channel",
            k + 1
        );
    }
    drop(backend);
    let messages = fs::read_to_string(&log).map_err(|e| e.to_string())?;
    let expected = [
        "init", "segment", "segment", "segment", "segment", "segment", "shutdown",
    ];
    ensure!(
        messages.lines().collect::<Vec<_>>() == expected,
        "backend saw {:?}",
        messages.lines().collect::<Vec<_>>()
    );
    Ok("handshake, 5 masks equal to the positive channel, shutdown".into())
}

fn crash_injection(suite: &Path) -> Result<String, String> {
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("crash");
    let backend = format!("cmd:'{TEST_BACKEND}' --mode crash --crash-after 2");
    let (code, err) = eval(suite, &out, &["--backend", &backend, "--timeout", "20"])?;
    ensure!(
        code == 2,
        "crashing backend exited {code}, expected the partial status: {err}"
    );
    let traces = out.join("traces");
    let mut n = 0;
    for entry in fs::read_dir(&traces).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap();
        let lines: Vec<Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let end = lines.last().unwrap();
        ensure!(
            end["status"] == "aborted",
            "trace not marked aborted: {end}"
        );
        ensure!(
            end["abort_reason"]
                .as_str()
                .is_some_and(|s| s.contains("injected crash")),
            "abort reason lacks the backend's stderr: {end}"
        );
        ensure!(
            lines.len() == 4,
            "expected header, 2 steps and end, got {} lines",
            lines.len()
        );
        n += 1;
    }
    let summary = read_json(&out.join("summary.json"))?;
    ensure!(summary["partial"] == true, "summary not partial");
    let (code, _, err) = click3d(&["replay", "--traces", traces.to_str().unwrap()]);
    ensure!(code == 0, "aborted traces do not replay cleanly: {err}");

    for mode in ["bad-version", "garbage"] {
        let out = work.path().join(mode);
        let backend = format!("cmd:'{TEST_BACKEND}' --mode {mode}");
        // Nothing to report on: fatal, but the aborted traces remain.
        let (code, _) = eval(suite, &out, &["--backend", &backend, "--timeout", "20"])?;
        ensure!(code == 1, "{mode} backend exited {code}");
        let summary = read_json(&out.join("summary.json"))?;
        ensure!(
            summary["sessions_aborted"] == summary["instances_evaluated"],
            "{mode}: not every session aborted"
        );
        let (code, _, err) = click3d(&["replay", "--traces", out.join("traces").to_str().unwrap()]);
        ensure!(
            code == 1 && err.contains("no session produced a mask"),
            "{mode}: replay exited {code}: {err}"
        );
    }
    Ok(format!(
        "{n} aborted traces replay cleanly, handshake failures abort"
    ))
}

fn wire_protocol(suite: &Path) -> Outcome {
    let scripted = scripted_session()?;
    let crash = crash_injection(suite)?;
    Ok(format!("{scripted}; {crash}"))
}

fn main() {
    let suite = tempfile::tempdir().unwrap();
    let small = tempfile::tempdir().unwrap();
    let setup = write_suite(suite.path(), 10).and_then(|_| write_suite(small.path(), 2));
    let (suite, small) = (suite.path(), small.path());

    let criteria: Vec<(&str, Check)> = vec![
        (
            "click channels match the brute-force oracle",
            Box::new(click_channel_oracle),
        ),
        (
            "error regions match union-find",
            Box::new(error_region_oracle),
        ),
        (
            "simulated clicks land on the region center",
            Box::new(center_rule),
        ),
        (
            "metrics match hand examples and the exhaustive matcher",
            Box::new(metric_oracles),
        ),
        (
            "oracle and empty backends give the extreme scores",
            Box::new(move || protocol_sanity(suite)),
        ),
        (
            "reference backend regression on the synthetic suite",
            Box::new(move || reference_regression(suite)),
        ),
        (
            "evaluation is deterministic and thread-count independent",
            Box::new(move || determinism(suite)),
        ),
        (
            "add_click p95 latency on a 500k-point scene",
            Box::new(latency),
        ),
        (
            "external backend wire protocol",
            Box::new(move || wire_protocol(small)),
        ),
    ];

    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = match &setup {
            Err(e) => Err(format!("setup: {e}")),
            Ok(()) => catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            }),
        };
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({detail}) [{took:.1?}]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason} [{took:.1?}]");
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
