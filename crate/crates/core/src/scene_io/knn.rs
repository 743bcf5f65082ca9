use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;

use crate::scene_io::{squared_distance, PointCloud};
use crate::{Error, Result};

/// Exact k-nearest-neighbor graph over point positions.
///
/// `nearest(i)` holds the directed k-NN list of point `i` (exactly
/// `min(k, N - 1)` entries, ordered by distance then index). `neighbors(i)`
/// is the symmetrized adjacency used for graph searches: `j` is a neighbor of
/// `i` iff `j` is among the k nearest of `i` or vice versa.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    k: usize,
    stride: usize,
    nearest: Vec<u32>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    lengths: Vec<f64>,
}

impl NeighborGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_points(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nearest(&self, i: usize) -> &[u32] {
        &self.nearest[i * self.stride..(i + 1) * self.stride]
    }

    /// Symmetrized neighbors of `i` with Euclidean edge lengths, ascending by
    /// neighbor index.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.lengths[range])
            .map(|(&j, &d)| (j as usize, d))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.targets.len() / 2
    }

    /// CSR view: `(offsets, targets, lengths)`.
    pub fn csr(&self) -> (&[usize], &[u32], &[f64]) {
        (&self.offsets, &self.targets, &self.lengths)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

type CellKey = [i64; 3];

struct Buckets {
    size: f64,
    origin: [f64; 3],
    cells: HashMap<CellKey, Vec<u32>>,
    lo: CellKey,
    hi: CellKey,
}

impl Buckets {
    fn build(cloud: &PointCloud, k: usize) -> Self {
        let (lo, hi) = cloud.bounds();
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        let floor = if max_extent > 0.0 {
            max_extent * 1e-3
        } else {
            1.0
        };
        let volume: f64 = extent.iter().map(|e| e.max(floor)).product();
        let size = (volume * k as f64 / cloud.len() as f64)
            .cbrt()
            .max(f64::MIN_POSITIVE);

        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut key_lo = [i64::MAX; 3];
        let mut key_hi = [i64::MIN; 3];
        for (i, p) in cloud.positions().iter().enumerate() {
            let key = Self::key(p, &lo, size);
            for axis in 0..3 {
                key_lo[axis] = key_lo[axis].min(key[axis]);
                key_hi[axis] = key_hi[axis].max(key[axis]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Self {
            size,
            origin: lo,
            cells,
            lo: key_lo,
            hi: key_hi,
        }
    }

    fn key(p: &[f64; 3], origin: &[f64; 3], size: f64) -> CellKey {
        [0, 1, 2].map(|a| ((p[a] - origin[a]) / size).floor() as i64)
    }

    fn shell_len(r: i64) -> i64 {
        if r == 0 {
            1
        } else {
            (2 * r + 1).pow(3) - (2 * r - 1).pow(3)
        }
    }

    /// Exact `m` nearest neighbors of point `query` (excluding itself).
    fn query(&self, cloud: &PointCloud, query: usize, m: usize) -> Vec<u32> {
        let positions = cloud.positions();
        let q = &positions[query];
        let center = Self::key(q, &self.origin, self.size);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(m + 1);
        let offer = |heap: &mut BinaryHeap<Candidate>, j: u32| {
            if j as usize == query {
                return;
            }
            let c = Candidate {
                d2: squared_distance(q, &positions[j as usize]),
                index: j,
            };
            if heap.len() < m {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        };

        let max_ring = (0..3)
            .map(|a| (center[a] - self.lo[a]).max(self.hi[a] - center[a]))
            .max()
            .unwrap_or(0);
        let mut r = 0i64;
        loop {
            if Self::shell_len(r) as usize > self.cells.len() {
                // Remaining shells are sparser than the occupied set; finish
                // with a scan of every cell not yet visited.
                for (key, pts) in &self.cells {
                    let cheb = (0..3).map(|a| (key[a] - center[a]).abs()).max().unwrap();
                    if cheb >= r {
                        for &j in pts {
                            offer(&mut heap, j);
                        }
                    }
                }
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let on_face = dx.abs() == r || dy.abs() == r;
                    let dzs: Box<dyn Iterator<Item = i64>> = if on_face {
                        Box::new(-r..=r)
                    } else if r == 0 {
                        Box::new(std::iter::once(0))
                    } else {
                        Box::new([-r, r].into_iter())
                    };
                    for dz in dzs {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(pts) = self.cells.get(&key) {
                            for &j in pts {
                                offer(&mut heap, j);
                            }
                        }
                    }
                }
            }
            // Every unvisited point is more than r * size away along some axis.
            let bound = r as f64 * self.size;
            if r >= max_ring
                || (heap.len() == m && heap.peek().unwrap().d2 < bound * bound * (1.0 - 1e-12))
            {
                break;
            }
            r += 1;
        }

        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| c.index).collect()
    }
}

/// Builds the symmetrized exact k-NN graph. Ties in distance go to the lower
/// point index.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if n < 2 {
        return Err(Error::arg("a neighbor graph needs at least two points"));
    }
    if n > u32::MAX as usize {
        return Err(Error::arg("too many points for a neighbor graph"));
    }
    let stride = k.min(n - 1);
    let buckets = Buckets::build(cloud, stride);
    let lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| buckets.query(cloud, i, stride))
        .collect();

    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            adjacency[i].push(j);
            adjacency[j as usize].push(i as u32);
        }
    }
    let positions = cloud.positions();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut targets = Vec::new();
    let mut lengths = Vec::new();
    offsets.push(0);
    for (i, mut adj) in adjacency.into_iter().enumerate() {
        adj.sort_unstable();
        adj.dedup();
        for j in adj {
            targets.push(j);
            lengths.push(squared_distance(&positions[i], &positions[j as usize]).sqrt());
        }
        offsets.push(targets.len());
    }

    Ok(NeighborGraph {
        k,
        stride,
        nearest: lists.into_iter().flatten().collect(),
        offsets,
        targets,
        lengths,
    })
}
