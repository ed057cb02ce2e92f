//! Farthest point sampling and exact k-nearest-neighbor search.
//!
//! All comparisons use squared Euclidean distance evaluated in `f64`, with
//! ties broken by ascending point index, so every backend returns the same
//! answer for the same input.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::bail;
use crate::{Point3, Result};

#[inline]
pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Greedy maximin subsampling of `m` indices starting from `start`.
pub fn farthest_point_sample(cloud: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        bail!(Argument, "farthest point sampling on an empty cloud");
    }
    if m == 0 || m > cloud.len() {
        bail!(Argument, "cannot sample {m} of {} points", cloud.len());
    }
    if start >= cloud.len() {
        bail!(Argument, "start index {start} outside {} points", cloud.len());
    }
    let mut min_dist = vec![f64::INFINITY; cloud.len()];
    let mut taken = vec![false; cloud.len()];
    let mut out = Vec::with_capacity(m);
    let mut current = start;
    loop {
        out.push(current);
        taken[current] = true;
        if out.len() == m {
            break;
        }
        let anchor = cloud[current];
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in cloud.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = squared_distance(p, &anchor).min(min_dist[i]);
            min_dist[i] = d;
            // strict comparison keeps the lowest index on ties
            if best.map_or(true, |(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        current = best.expect("m <= n leaves a candidate").1;
    }
    Ok(out)
}

/// Neighbors ordered by ascending squared distance, ties by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborResult {
    fn from_pairs(pairs: Vec<(f64, usize)>) -> Self {
        let (distances, indices) = pairs.into_iter().unzip();
        Self { indices, distances }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    Brute,
    #[default]
    Grid,
}

pub fn knn_brute(query: &Point3, cloud: &[Point3], k: usize) -> NeighborResult {
    let mut pairs: Vec<(f64, usize)> = cloud
        .iter()
        .enumerate()
        .map(|(i, p)| (squared_distance(query, p), i))
        .collect();
    let k = k.min(pairs.len());
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, by_distance_then_index);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(by_distance_then_index);
    NeighborResult::from_pairs(pairs)
}

/// Uniform hash grid over a fixed cloud.
#[derive(Debug, Clone)]
pub struct GridIndex<'a> {
    cloud: &'a [Point3],
    origin: [f64; 3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    /// Builds with the default cell size, bounding-box diagonal / cbrt(N).
    pub fn build(cloud: &'a [Point3]) -> Result<Self> {
        if cloud.is_empty() {
            bail!(Argument, "cannot index an empty cloud");
        }
        let (min, max) = bounds(cloud);
        let diag = (0..3).map(|i| (max[i] - min[i]).powi(2)).sum::<f64>().sqrt();
        let cell = diag / (cloud.len() as f64).cbrt();
        Self::with_cell_size(cloud, if cell > 0.0 { cell } else { 1.0 })
    }

    pub fn with_cell_size(cloud: &'a [Point3], cell: f64) -> Result<Self> {
        if cloud.is_empty() {
            bail!(Argument, "cannot index an empty cloud");
        }
        if !(cell > 0.0) || !cell.is_finite() {
            bail!(Argument, "grid cell size must be positive, got {cell}");
        }
        let (origin, _) = bounds(cloud);
        let mut index = Self {
            cloud,
            origin,
            cell,
            cells: HashMap::new(),
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        };
        for (i, p) in cloud.iter().enumerate() {
            let key = index.cell_of(p);
            for a in 0..3 {
                index.lo[a] = index.lo[a].min(key[a]);
                index.hi[a] = index.hi[a].max(key[a]);
            }
            index.cells.entry(key).or_default().push(i as u32);
        }
        Ok(index)
    }

    pub fn cloud(&self) -> &'a [Point3] {
        self.cloud
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn cell_of(&self, p: &Point3) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] as f64 - self.origin[a]) / self.cell).floor() as i64)
    }

    pub fn knn(&self, query: &Point3, k: usize) -> NeighborResult {
        let k = k.min(self.cloud.len());
        let qc = self.cell_of(query);
        // Chebyshev ring distance from the query cell to the occupied box.
        let gap = |a: usize| (self.lo[a] - qc[a]).max(qc[a] - self.hi[a]).max(0);
        let far = |a: usize| (qc[a] - self.lo[a]).abs().max((self.hi[a] - qc[a]).abs());
        let r_first = (0..3).map(gap).max().unwrap();
        let r_last = (0..3).map(far).max().unwrap();

        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let visit = |best: &mut Vec<(f64, usize)>, key: [i64; 3]| {
            if let Some(bucket) = self.cells.get(&key) {
                for &i in bucket {
                    let cand = (squared_distance(query, &self.cloud[i as usize]), i as usize);
                    if best.len() == k
                        && by_distance_then_index(&cand, &best[k - 1]) != Ordering::Less
                    {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|e| by_distance_then_index(e, &cand))
                        .unwrap_or_else(|e| e);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
        };

        for r in r_first..=r_last {
            let xs = (qc[0] - r).max(self.lo[0])..=(qc[0] + r).min(self.hi[0]);
            for x in xs {
                let ys = (qc[1] - r).max(self.lo[1])..=(qc[1] + r).min(self.hi[1]);
                for y in ys {
                    if (x - qc[0]).abs() == r || (y - qc[1]).abs() == r {
                        let zs = (qc[2] - r).max(self.lo[2])..=(qc[2] + r).min(self.hi[2]);
                        for z in zs {
                            visit(&mut best, [x, y, z]);
                        }
                    } else {
                        // interior column: only the two shell faces
                        for z in [qc[2] - r, qc[2] + r] {
                            if z >= self.lo[2] && z <= self.hi[2] {
                                visit(&mut best, [x, y, z]);
                            }
                        }
                    }
                }
            }
            if best.len() == k {
                // Any point outside rings 0..=r lies at least r cells away
                // along some axis. The margin absorbs floor() rounding.
                let reach = r as f64 * self.cell * (1.0 - 1e-9);
                if best[k - 1].0 < reach * reach {
                    break;
                }
            }
        }
        NeighborResult::from_pairs(best)
    }

    pub fn nearest(&self, query: &Point3) -> usize {
        self.knn(query, 1).indices[0]
    }
}

fn bounds(cloud: &[Point3]) -> ([f64; 3], [f64; 3]) {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in cloud {
        for a in 0..3 {
            min[a] = min[a].min(p[a] as f64);
            max[a] = max[a].max(p[a] as f64);
        }
    }
    (min, max)
}

/// A search structure over one cloud, chosen by [`Backend`].
#[derive(Debug, Clone)]
pub enum Searcher<'a> {
    Brute(&'a [Point3]),
    Grid(GridIndex<'a>),
}

impl<'a> Searcher<'a> {
    pub fn new(cloud: &'a [Point3], backend: Backend) -> Result<Self> {
        if cloud.is_empty() {
            bail!(Argument, "cannot search an empty cloud");
        }
        Ok(match backend {
            Backend::Brute => Searcher::Brute(cloud),
            Backend::Grid => Searcher::Grid(GridIndex::build(cloud)?),
        })
    }

    pub fn cloud(&self) -> &'a [Point3] {
        match self {
            Searcher::Brute(c) => c,
            Searcher::Grid(g) => g.cloud(),
        }
    }

    pub fn knn(&self, query: &Point3, k: usize) -> NeighborResult {
        match self {
            Searcher::Brute(c) => knn_brute(query, c, k),
            Searcher::Grid(g) => g.knn(query, k),
        }
    }

    pub fn nearest(&self, query: &Point3) -> usize {
        self.knn(query, 1).indices[0]
    }
}

/// k nearest neighbors of `query`; returns all points when `k > N`.
pub fn knn(query: &Point3, cloud: &[Point3], k: usize, backend: Backend) -> Result<NeighborResult> {
    if k == 0 {
        bail!(Argument, "k must be >= 1");
    }
    Ok(Searcher::new(cloud, backend)?.knn(query, k))
}

pub fn nearest_neighbor(query: &Point3, cloud: &[Point3], backend: Backend) -> Result<usize> {
    Ok(knn(query, cloud, 1, backend)?.indices[0])
}
