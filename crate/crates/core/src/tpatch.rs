//! t-patch extraction: k-neighbor patches tracked through a clip by
//! following each query point's nearest neighbor into the next frame.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::bail;
use crate::pcseq::PointCloudSequence;
use crate::sampling::{farthest_point_sample, Backend, Searcher};
use crate::{Point3, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// How a [`TPatchSet`] was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// All patches seeded on the first frame and tracked forward.
    Forward,
    /// Half the patches seeded on the first frame, half on the last frame
    /// and tracked backward.
    Bidirectional,
    /// Every patch carries the concatenation of a forward and a reverse
    /// neighbor set (2k points per frame).
    BidirectionalUnion,
    /// Queries follow the ground-truth correspondence.
    GroundTruth,
}

/// One query trajectory with its per-frame neighbor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TPatch {
    /// Index of the seed point in the seed frame (frame 0 for forward
    /// patches, the last frame for reverse ones).
    pub origin: usize,
    pub direction: Direction,
    /// Per frame, the index of the query point within that frame.
    pub query_index: Vec<u32>,
    pub query: Vec<Point3>,
    /// Per frame, neighbor indices into that frame, nearest first.
    pub neighbors: Vec<Vec<u32>>,
}

impl TPatch {
    pub fn frame_count(&self) -> usize {
        self.query.len()
    }

    /// Neighbor coordinates at frame `t` centered on the frame-`t` query.
    pub fn relative(&self, frames: &[Vec<Point3>], t: usize) -> Vec<Point3> {
        let q = self.query[t];
        self.neighbors[t]
            .iter()
            .map(|&j| {
                let p = frames[t][j as usize];
                [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
            })
            .collect()
    }
}

/// The M t-patches extracted from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TPatchSet {
    pub patches: Vec<TPatch>,
    /// Neighbors per patch per frame.
    pub k: usize,
    pub variant: Variant,
    pub jitter_sigma: f64,
    pub seed: u64,
    /// Point count of every frame of the source clip.
    pub point_counts: Vec<usize>,
}

impl TPatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.point_counts.len()
    }
}

/// Extraction parameters shared by the tracked variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractParams {
    pub m: usize,
    pub k: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
    pub backend: Backend,
    /// Start FPS from a seed-derived index instead of index 0.
    pub random_fps_start: bool,
}

impl ExtractParams {
    pub fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            jitter_sigma: 0.0,
            seed: 0,
            backend: Backend::Grid,
            random_fps_start: false,
        }
    }

    pub fn jitter(mut self, sigma: f64, seed: u64) -> Self {
        self.jitter_sigma = sigma;
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!(Argument, "k must be >= 1");
        }
        if self.m == 0 {
            bail!(Argument, "M must be >= 1");
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            bail!(Argument, "jitter sigma must be finite and >= 0, got {}", self.jitter_sigma);
        }
        Ok(())
    }

    fn fps_start(&self, n: usize, salt: u64) -> usize {
        if self.random_fps_start {
            ChaCha8Rng::seed_from_u64(self.seed ^ salt.rotate_left(17)).gen_range(0..n)
        } else {
            0
        }
    }
}

pub fn extract(seq: &PointCloudSequence, params: &ExtractParams, variant: Variant) -> Result<TPatchSet> {
    match variant {
        Variant::Forward => extract_forward(seq, params),
        Variant::Bidirectional => extract_bidirectional(seq, params),
        Variant::BidirectionalUnion => extract_bidirectional_union(seq, params),
        Variant::GroundTruth => extract_with_correspondence(seq, params.m, params.k, params.backend),
    }
}

fn searchers<'a>(seq: &'a PointCloudSequence, backend: Backend) -> Result<Vec<Searcher<'a>>> {
    seq.frames()
        .iter()
        .map(|f| Searcher::new(f, backend))
        .collect()
}

fn check_seed_frame(seq: &PointCloudSequence, m: usize, t: usize) -> Result<()> {
    if m > seq.point_count(t) {
        bail!(
            Argument,
            "cannot seed {m} patches in frame {t} with {} points",
            seq.point_count(t)
        );
    }
    Ok(())
}

/// Jitter for one (patch, frame) step, drawn from a generator keyed only by
/// `(seed, patch, frame)`.
fn jitter(seed: u64, patch: usize, frame: usize, sigma: f64) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(patch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(frame as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    std::array::from_fn(|_| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn padded(mut idx: Vec<usize>, k: usize) -> Vec<u32> {
    let first = idx[0];
    idx.resize(k, first);
    idx.into_iter().map(|i| i as u32).collect()
}

/// Tracks one patch from `seed_frame` in `direction` using nearest
/// neighbors of the (optionally jittered) previous query.
fn track(
    search: &[Searcher<'_>],
    origin: usize,
    direction: Direction,
    k: usize,
    sigma: f64,
    seed: u64,
    patch_id: usize,
) -> TPatch {
    let n_frames = search.len();
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n_frames).collect(),
        Direction::Reverse => (0..n_frames).rev().collect(),
    };
    let mut query_index = vec![0u32; n_frames];
    let mut query = vec![[0.0f32; 3]; n_frames];
    let mut neighbors = vec![Vec::new(); n_frames];

    let s = order[0];
    let x0 = search[s].cloud()[origin];
    query_index[s] = origin as u32;
    query[s] = x0;
    neighbors[s] = padded(search[s].knn(&x0, k).indices, k);

    for w in order.windows(2) {
        let (prev, t) = (w[0], w[1]);
        let eps = jitter(seed, patch_id, t, sigma);
        let q = query[prev];
        let probe = std::array::from_fn(|a| (q[a] as f64 + eps[a]) as f32);
        let hits = search[t].knn(&probe, k).indices;
        query_index[t] = hits[0] as u32;
        query[t] = search[t].cloud()[hits[0]];
        neighbors[t] = padded(hits, k);
    }
    TPatch {
        origin,
        direction,
        query_index,
        query,
        neighbors,
    }
}

fn tracked_patches(
    search: &[Searcher<'_>],
    origins: &[usize],
    direction: Direction,
    params: &ExtractParams,
    id_offset: usize,
) -> Vec<TPatch> {
    origins
        .par_iter()
        .enumerate()
        .map(|(i, &o)| {
            track(
                search,
                o,
                direction,
                params.k,
                params.jitter_sigma,
                params.seed,
                id_offset + i,
            )
        })
        .collect()
}

fn finish(seq: &PointCloudSequence, patches: Vec<TPatch>, k: usize, variant: Variant, params: &ExtractParams) -> TPatchSet {
    TPatchSet {
        patches,
        k,
        variant,
        jitter_sigma: params.jitter_sigma,
        seed: params.seed,
        point_counts: (0..seq.frame_count()).map(|t| seq.point_count(t)).collect(),
    }
}

/// Forward t-patches seeded by FPS on the first frame.
pub fn extract_forward(seq: &PointCloudSequence, params: &ExtractParams) -> Result<TPatchSet> {
    params.validate()?;
    check_seed_frame(seq, params.m, 0)?;
    let search = searchers(seq, params.backend)?;
    let origins = farthest_point_sample(seq.frame(0), params.m, params.fps_start(seq.point_count(0), 0))?;
    let patches = tracked_patches(&search, &origins, Direction::Forward, params, 0);
    Ok(finish(seq, patches, params.k, Variant::Forward, params))
}

/// ceil(M/2) forward patches seeded on the first frame followed by
/// floor(M/2) reverse patches seeded on the last frame.
pub fn extract_bidirectional(seq: &PointCloudSequence, params: &ExtractParams) -> Result<TPatchSet> {
    params.validate()?;
    let last = seq.frame_count() - 1;
    check_seed_frame(seq, params.m, 0)?;
    check_seed_frame(seq, params.m, last)?;
    let search = searchers(seq, params.backend)?;
    let n_fwd = params.m.div_ceil(2);
    let n_rev = params.m / 2;
    let fwd = farthest_point_sample(seq.frame(0), n_fwd, params.fps_start(seq.point_count(0), 0))?;
    let mut patches = tracked_patches(&search, &fwd, Direction::Forward, params, 0);
    if n_rev > 0 {
        let rev = farthest_point_sample(
            seq.frame(last),
            n_rev,
            params.fps_start(seq.point_count(last), 1),
        )?;
        patches.extend(tracked_patches(&search, &rev, Direction::Reverse, params, n_fwd));
    }
    Ok(finish(seq, patches, params.k, Variant::Bidirectional, params))
}

/// M forward and M reverse patches paired by FPS rank; each output patch
/// keeps the forward trajectory and concatenates both neighbor sets.
pub fn extract_bidirectional_union(seq: &PointCloudSequence, params: &ExtractParams) -> Result<TPatchSet> {
    params.validate()?;
    let last = seq.frame_count() - 1;
    check_seed_frame(seq, params.m, 0)?;
    check_seed_frame(seq, params.m, last)?;
    let search = searchers(seq, params.backend)?;
    let fwd = farthest_point_sample(seq.frame(0), params.m, params.fps_start(seq.point_count(0), 0))?;
    let rev = farthest_point_sample(
        seq.frame(last),
        params.m,
        params.fps_start(seq.point_count(last), 1),
    )?;
    let mut patches = tracked_patches(&search, &fwd, Direction::Forward, params, 0);
    let reverse = tracked_patches(&search, &rev, Direction::Reverse, params, params.m);
    for (p, r) in patches.iter_mut().zip(reverse) {
        for (a, b) in p.neighbors.iter_mut().zip(r.neighbors) {
            a.extend(b);
        }
    }
    Ok(finish(seq, patches, 2 * params.k, Variant::BidirectionalUnion, params))
}

/// Forward patches whose query follows the ground-truth correspondence of
/// its origin point instead of nearest neighbors.
pub fn extract_with_correspondence(
    seq: &PointCloudSequence,
    m: usize,
    k: usize,
    backend: Backend,
) -> Result<TPatchSet> {
    let params = ExtractParams {
        backend,
        ..ExtractParams::new(m, k)
    };
    params.validate()?;
    let Some(maps) = seq.correspondence() else {
        bail!(Precondition, "ground-truth extraction needs correspondence maps");
    };
    check_seed_frame(seq, m, 0)?;
    let search = searchers(seq, backend)?;
    let origins = farthest_point_sample(seq.frame(0), m, 0)?;
    let patches = origins
        .par_iter()
        .map(|&origin| {
            let n_frames = seq.frame_count();
            let mut query_index = Vec::with_capacity(n_frames);
            let mut idx = origin as u32;
            query_index.push(idx);
            for map in maps {
                idx = map[idx as usize];
                query_index.push(idx);
            }
            let query: Vec<Point3> = query_index
                .iter()
                .enumerate()
                .map(|(t, &i)| seq.frame(t)[i as usize])
                .collect();
            let neighbors = query
                .iter()
                .enumerate()
                .map(|(t, q)| padded(search[t].knn(q, k).indices, k))
                .collect();
            TPatch {
                origin,
                direction: Direction::Forward,
                query_index,
                query,
                neighbors,
            }
        })
        .collect();
    Ok(finish(seq, patches, k, Variant::GroundTruth, &params))
}

/// Per-frame collapse and coverage statistics for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCollapse {
    pub frame: usize,
    pub distinct_queries: usize,
    pub coverage_ratio: f64,
    /// Unordered patch pairs sharing a query position in this frame.
    pub collapse_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub frames: Vec<FrameCollapse>,
    /// Unordered patch pairs that share a query position in at least one frame.
    pub collapsed_pairs: usize,
}

fn position_key(p: &Point3) -> [u32; 3] {
    // +0.0 and -0.0 are the same position
    p.map(|c| if c == 0.0 { 0 } else { c.to_bits() })
}

pub fn collapse_report(tps: &TPatchSet) -> CollapseReport {
    let n_frames = tps.frame_count();
    let mut frames = Vec::with_capacity(n_frames);
    let mut any_pair = vec![false; tps.len() * tps.len()];
    for t in 0..n_frames {
        let mut groups: HashMap<[u32; 3], Vec<usize>> = HashMap::new();
        for (i, p) in tps.patches.iter().enumerate() {
            groups.entry(position_key(&p.query[t])).or_default().push(i);
        }
        let mut pairs = 0;
        for members in groups.values() {
            pairs += members.len() * (members.len() - 1) / 2;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[..a] {
                    any_pair[i * tps.len() + j] = true;
                }
            }
        }
        let mut covered = vec![false; tps.point_counts[t]];
        for p in &tps.patches {
            for &j in &p.neighbors[t] {
                covered[j as usize] = true;
            }
        }
        let n_covered = covered.iter().filter(|&&c| c).count();
        frames.push(FrameCollapse {
            frame: t,
            distinct_queries: groups.len(),
            coverage_ratio: n_covered as f64 / tps.point_counts[t] as f64,
            collapse_pairs: pairs,
        });
    }
    CollapseReport {
        frames,
        collapsed_pairs: any_pair.iter().filter(|&&b| b).count(),
    }
}

impl CollapseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,distinct_queries,coverage_ratio,collapse_pairs\n");
        for f in &self.frames {
            writeln!(
                out,
                "{},{},{:.6},{}",
                f.frame, f.distinct_queries, f.coverage_ratio, f.collapse_pairs
            )
            .unwrap();
        }
        out
    }
}

/// Fraction of points of frame `t - 1` whose nearest neighbor in frame `t`
/// is their ground-truth image, one entry per consecutive frame pair.
pub fn correspondence_accuracy(seq: &PointCloudSequence, backend: Backend) -> Result<Vec<f64>> {
    let Some(maps) = seq.correspondence() else {
        bail!(Precondition, "correspondence accuracy needs ground-truth maps");
    };
    let search = searchers(seq, backend)?;
    Ok(maps
        .iter()
        .enumerate()
        .map(|(i, map)| {
            let hits = seq
                .frame(i)
                .par_iter()
                .zip(map.par_iter())
                .filter(|(p, &gt)| search[i + 1].nearest(p) == gt as usize)
                .count();
            hits as f64 / map.len() as f64
        })
        .collect())
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_spacing(cloud: &[Point3]) -> Result<f64> {
    if cloud.len() < 2 {
        bail!(Argument, "spacing needs at least two points");
    }
    let search = Searcher::new(cloud, Backend::Grid)?;
    let total: f64 = cloud
        .iter()
        .map(|p| search.knn(p, 2).distances[1].sqrt())
        .sum();
    Ok(total / cloud.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn lattice(n: usize, spacing: f32) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push([i as f32 * spacing, j as f32 * spacing, ((i * 7 + j * 3) % 5) as f32 * 0.01]);
            }
        }
        pts
    }

    fn static_seq(frames: usize) -> PointCloudSequence {
        let f = lattice(6, 1.0);
        let n = f.len();
        PointCloudSequence::new(vec![f; frames])
            .unwrap()
            .with_correspondence(vec![(0..n as u32).collect(); frames - 1])
            .unwrap()
    }

    #[test]
    fn static_sequence_is_a_fixed_point() {
        let seq = static_seq(5);
        let set = extract_forward(&seq, &ExtractParams::new(6, 4)).unwrap();
        for p in &set.patches {
            for t in 1..5 {
                assert_eq!(p.query[t], p.query[0]);
                assert_eq!(p.neighbors[t], p.neighbors[0]);
            }
        }
        let rep = collapse_report(&set);
        assert_eq!(rep.collapsed_pairs, 0);
        assert!(rep.frames.iter().all(|f| f.distinct_queries == 6 && f.collapse_pairs == 0));
    }

    #[test]
    fn rigid_translation_is_tracked() {
        // Planar cloud moving along its normal: every distance d becomes
        // sqrt(d^2 + 0.01), so neighbor order is preserved exactly.
        let base: Vec<Point3> = lattice(5, 1.0).iter().map(|p| [0.0, p[0], p[1]]).collect();
        let frames: Vec<Vec<Point3>> = (0..6)
            .map(|t| base.iter().map(|p| [p[0] + 0.1 * t as f32, p[1], p[2]]).collect())
            .collect();
        let seq = PointCloudSequence::new(frames.clone()).unwrap();
        let set = extract_forward(&seq, &ExtractParams::new(5, 3)).unwrap();
        for p in &set.patches {
            for t in 0..6 {
                assert_eq!(p.query_index[t], p.origin as u32);
                assert_eq!(p.neighbors[t], p.neighbors[0]);
                assert_eq!(p.query[t], frames[t][p.origin]);
            }
        }
    }

    #[test]
    fn short_frames_are_padded_with_the_nearest_point() {
        let seq = PointCloudSequence::new(vec![
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0.0; 3], [3.0, 0.0, 0.0]],
        ])
        .unwrap();
        let set = extract_forward(&seq, &ExtractParams::new(1, 4)).unwrap();
        assert_eq!(set.patches[0].neighbors[0], vec![0, 1, 2, 0]);
        assert_eq!(set.patches[0].neighbors[1], vec![0, 1, 0, 0]);
    }

    #[test]
    fn argument_errors() {
        let seq = static_seq(3);
        assert!(extract_forward(&seq, &ExtractParams::new(37, 4)).is_err());
        assert!(extract_forward(&seq, &ExtractParams::new(3, 0)).is_err());
        assert!(extract_forward(&seq, &ExtractParams::new(3, 2).jitter(-1.0, 0)).is_err());
        let no_gt = PointCloudSequence::new(vec![lattice(3, 1.0); 2]).unwrap();
        assert!(matches!(
            extract_with_correspondence(&no_gt, 2, 2, Backend::Grid),
            Err(crate::Error::Precondition(_))
        ));
        assert!(matches!(
            correspondence_accuracy(&no_gt, Backend::Grid),
            Err(crate::Error::Precondition(_))
        ));
    }

    #[test]
    fn bidirectional_split_and_static_symmetry() {
        let seq = static_seq(4);
        let set = extract_bidirectional(&seq, &ExtractParams::new(8, 3)).unwrap();
        let fwd: Vec<_> = set.patches.iter().filter(|p| p.direction == Direction::Forward).collect();
        let rev: Vec<_> = set.patches.iter().filter(|p| p.direction == Direction::Reverse).collect();
        assert_eq!((fwd.len(), rev.len()), (4, 4));
        // Same FPS seeds on identical end frames give identical patches.
        for (f, r) in fwd.iter().zip(&rev) {
            assert_eq!(f.query, r.query);
            assert_eq!(f.neighbors, r.neighbors);
        }
        let odd = extract_bidirectional(&seq, &ExtractParams::new(7, 3)).unwrap();
        assert_eq!(odd.patches.iter().filter(|p| p.direction == Direction::Forward).count(), 4);
    }

    #[test]
    fn union_variant_doubles_patch_size() {
        let seq = static_seq(3);
        let set = extract_bidirectional_union(&seq, &ExtractParams::new(4, 3)).unwrap();
        assert_eq!(set.k, 6);
        assert_eq!(set.len(), 4);
        assert!(set.patches.iter().all(|p| p.neighbors.iter().all(|n| n.len() == 6)));
    }

    #[test]
    fn identity_correspondence_matches_forward() {
        let seq = static_seq(4);
        let gt = extract_with_correspondence(&seq, 5, 4, Backend::Grid).unwrap();
        let fw = extract_forward(&seq, &ExtractParams::new(5, 4)).unwrap();
        assert_eq!(gt.patches, fw.patches);
    }

    #[test]
    fn jitter_is_deterministic_and_order_independent() {
        let seq = static_seq(6);
        let p = ExtractParams::new(6, 4).jitter(0.4, 11);
        let a = extract_forward(&seq, &p).unwrap();
        let b = extract_forward(&seq, &p).unwrap();
        assert_eq!(a, b);
        // Running on a dedicated single-thread pool gives the same result.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| extract_forward(&seq, &p).unwrap());
        assert_eq!(a, c);
        let other = extract_forward(&seq, &p.jitter(0.4, 12)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn jittered_forward_queries_are_cloud_points() {
        let seq = static_seq(5);
        let set = extract_forward(&seq, &ExtractParams::new(8, 4).jitter(0.7, 3)).unwrap();
        for p in &set.patches {
            for t in 0..5 {
                assert_eq!(seq.frame(t)[p.query_index[t] as usize], p.query[t]);
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let seq = static_seq(3);
        let set = extract_forward(&seq, &ExtractParams::new(4, 2)).unwrap();
        let csv = collapse_report(&set).to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("frame,distinct_queries,coverage_ratio,collapse_pairs\n"));
    }

    #[test]
    fn identical_frames_have_perfect_correspondence() {
        let seq = static_seq(3);
        assert_eq!(correspondence_accuracy(&seq, Backend::Grid).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn random_start_depends_on_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<Point3> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let seq = PointCloudSequence::new(vec![f; 2]).unwrap();
        let mut p = ExtractParams::new(3, 2);
        p.random_fps_start = true;
        let starts: std::collections::HashSet<_> = (0..8)
            .map(|s| extract_forward(&seq, &ExtractParams { seed: s, ..p }).unwrap().patches[0].origin)
            .collect();
        assert!(starts.len() > 1);
    }
}
