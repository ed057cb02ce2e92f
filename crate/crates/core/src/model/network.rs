use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{HeadMode, LevelConfig, ModelConfig};
use crate::error::bail;
use crate::nnkit::{
    BatchNorm, Checkpoint, DepthwiseTemporalConv, Dropout, Layer, Linear, MaxPool, Mode, NamedTensor, Param,
    Relu, Scalar, SharedMlp, Tensor, TemporalConv,
};
use crate::pcseq::PointCloudSequence;
use crate::sampling::{farthest_point_sample, Searcher};
use crate::tpatch::{extract, TPatchSet};
use crate::{Point3, Result};

/// Upper bound on elements in one chunk of MLP activations during inference.
const CHUNK_ELEMS: usize = 1 << 22;

/// Patch trajectories and neighborhoods of one level for one clip.
///
/// Level 1 indexes points of the input clip; deeper levels index the
/// patches of the level below.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    pub m: usize,
    pub k: usize,
    pub frames: usize,
    /// Query position of patch `q` at frame `t` at `q * frames + t`.
    pub centers: Vec<Point3>,
    /// Neighbor indices at `(q * frames + t) * k + j`.
    pub neighbors: Vec<u32>,
    /// Neighbor positions relative to the query, same layout.
    pub rel: Vec<Point3>,
}

impl LevelGeometry {
    fn from_tpatches(tps: &TPatchSet, seq: &PointCloudSequence) -> Self {
        let frames = seq.frame_count();
        let (m, k) = (tps.len(), tps.k);
        let mut g = Self {
            m,
            k,
            frames,
            centers: Vec::with_capacity(m * frames),
            neighbors: Vec::with_capacity(m * frames * k),
            rel: Vec::with_capacity(m * frames * k),
        };
        for p in &tps.patches {
            for t in 0..frames {
                g.centers.push(p.query[t]);
                g.neighbors.extend_from_slice(&p.neighbors[t]);
                g.rel.extend(p.relative(seq.frames(), t));
            }
        }
        g
    }

    pub fn center(&self, q: usize, t: usize) -> Point3 {
        self.centers[q * self.frames + t]
    }

    pub fn frame_centers(&self, t: usize) -> Vec<Point3> {
        (0..self.m).map(|q| self.center(q, t)).collect()
    }

    pub fn neighbors_at(&self, q: usize, t: usize) -> &[u32] {
        let s = (q * self.frames + t) * self.k;
        &self.neighbors[s..s + self.k]
    }
}

/// All geometry the network needs for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipGeometry {
    pub tpatches: TPatchSet,
    /// One entry per level planned so far.
    pub levels: Vec<LevelGeometry>,
}

impl ClipGeometry {
    pub fn frames(&self) -> usize {
        self.tpatches.frame_count()
    }
}

fn padded(mut idx: Vec<u32>, k: usize) -> Vec<u32> {
    let first = idx[0];
    idx.resize(k, first);
    idx
}

/// Next level's patches: FPS over the previous centers on frame 0, each
/// query following its own center trajectory (identity correspondence),
/// neighbors gathered per frame among the previous centers.
fn plan_deeper<F: Scalar>(
    level: &LevelConfig,
    prev: &LevelGeometry,
    features: Option<&[F]>,
    backend: crate::sampling::Backend,
) -> Result<LevelGeometry> {
    let (m, k, frames) = (level.m, level.k, prev.frames);
    if m > prev.m {
        bail!(Argument, "cannot sample {m} patches from {} previous ones", prev.m);
    }
    let origins = farthest_point_sample(&prev.frame_centers(0), m, 0)?;
    let frame_pts: Vec<Vec<Point3>> = (0..frames).map(|t| prev.frame_centers(t)).collect();
    let search = frame_pts
        .iter()
        .map(|f| Searcher::new(f, backend))
        .collect::<Result<Vec<_>>>()?;
    let c = features.map_or(0, |f| f.len() / (prev.m * frames));
    let per_patch: Vec<(Vec<Point3>, Vec<u32>, Vec<Point3>)> = origins
        .par_iter()
        .map(|&o| {
            let mut centers = Vec::with_capacity(frames);
            let mut nbrs = Vec::with_capacity(frames * k);
            let mut rel = Vec::with_capacity(frames * k);
            for t in 0..frames {
                let q = prev.center(o, t);
                let idx: Vec<u32> = match features {
                    None => search[t].knn(&q, k).indices.into_iter().map(|i| i as u32).collect(),
                    Some(f) => {
                        let row = |p: usize| &f[(p * frames + t) * c..(p * frames + t + 1) * c];
                        let fq = row(o);
                        let mut d: Vec<(f64, u32)> = (0..prev.m)
                            .map(|p| {
                                let s = row(p)
                                    .iter()
                                    .zip(fq)
                                    .map(|(a, b)| {
                                        let x = (*a - *b).to_f64().unwrap();
                                        x * x
                                    })
                                    .sum::<f64>();
                                (s, p as u32)
                            })
                            .collect();
                        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        d.into_iter().take(k).map(|(_, p)| p).collect()
                    }
                };
                let idx = padded(idx, k);
                for &j in &idx {
                    let p = frame_pts[t][j as usize];
                    rel.push([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
                }
                nbrs.extend(idx);
                centers.push(q);
            }
            (centers, nbrs, rel)
        })
        .collect();
    let mut g = LevelGeometry {
        m,
        k,
        frames,
        centers: Vec::with_capacity(m * frames),
        neighbors: Vec::with_capacity(m * frames * k),
        rel: Vec::with_capacity(m * frames * k),
    };
    for (c, n, r) in per_patch {
        g.centers.extend(c);
        g.neighbors.extend(n);
        g.rel.extend(r);
    }
    Ok(g)
}

/// Builds `[patches * frames * k, 3 + C_prev]` rows for global patches in
/// `range` (patch `g` belongs to clip `g / m`).
fn gather<F: Scalar>(geoms: &[&LevelGeometry], prev: Option<&Tensor<F>>, range: Range<usize>) -> Result<Tensor<F>> {
    let g0 = geoms[0];
    let (m, k, frames) = (g0.m, g0.k, g0.frames);
    let c_prev = prev.map_or(0, |p| p.channels());
    let m_prev = prev.map_or(0, |p| p.shape()[0] / geoms.len());
    let width = 3 + c_prev;
    let n = range.len();
    let mut data = Vec::with_capacity(n * frames * k * width);
    for g in range {
        let (b, q) = (g / m, g % m);
        let geo = geoms[b];
        for t in 0..frames {
            for j in 0..k {
                let e = (q * frames + t) * k + j;
                data.extend(geo.rel[e].iter().map(|&v| F::lit(v as f64)));
                if let Some(p) = prev {
                    let src = geo.neighbors[e] as usize;
                    let row = ((b * m_prev + src) * frames + t) * c_prev;
                    data.extend_from_slice(&p.data()[row..row + c_prev]);
                }
            }
        }
    }
    Tensor::from_vec(&[n * frames * k, width], data)
}

/// Adds the feature part of `dx` back onto the previous level's outputs.
fn scatter<F: Scalar>(geoms: &[&LevelGeometry], dx: &Tensor<F>, dprev: &mut Tensor<F>) {
    let g0 = geoms[0];
    let (m, k, frames) = (g0.m, g0.k, g0.frames);
    let c_prev = dprev.channels();
    let m_prev = dprev.shape()[0] / geoms.len();
    let width = dx.channels();
    let src = dx.data();
    let dst = dprev.data_mut();
    for (g, rows) in src.chunks_exact(frames * k * width).enumerate() {
        let (b, q) = (g / m, g % m);
        let geo = geoms[b];
        for t in 0..frames {
            for j in 0..k {
                let e = (q * frames + t) * k + j;
                let r = &rows[(t * k + j) * width + 3..(t * k + j + 1) * width];
                let row = ((b * m_prev + geo.neighbors[e] as usize) * frames + t) * c_prev;
                for (d, &v) in dst[row..row + c_prev].iter_mut().zip(r) {
                    *d += v;
                }
            }
        }
    }
}

/// Shared MLP over neighbors, max over neighbors, temporal convolution,
/// batch norm and ReLU.
#[derive(Debug, Clone)]
struct TPatchModule<F> {
    mlp: SharedMlp<F>,
    pool: MaxPool,
    conv: TemporalConv<F>,
    norm: Option<BatchNorm<F>>,
    relu: Relu,
    dims: (usize, usize, usize),
}

impl<F: Scalar> TPatchModule<F> {
    fn new(name: &str, cfg: &LevelConfig, batch_norm: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.out_channels();
        Ok(Self {
            mlp: SharedMlp::new(&format!("{name}.mlp"), cfg.in_channels, &cfg.mlp, batch_norm, rng),
            pool: MaxPool::new(1),
            conv: TemporalConv::new(&format!("{name}.tconv"), c, c, cfg.temporal_kernel, rng)?,
            norm: batch_norm.then(|| BatchNorm::new(&format!("{name}.bn"), c)),
            relu: Relu::default(),
            dims: (0, 0, 0),
        })
    }

    /// `x`: `[patches * frames * k, C_in]` -> `[patches, frames, C_out]`.
    fn forward(&mut self, x: Tensor<F>, patches: usize, frames: usize, mode: Mode) -> Result<Tensor<F>> {
        let k = x.rows() / (patches * frames).max(1);
        self.dims = (patches, frames, k);
        let h = self.mlp.forward(x, mode)?;
        let c = h.channels();
        let h = self.pool.forward(h.reshape(&[patches * frames, k, c])?, mode)?;
        let mut y = self.conv.forward(h.reshape(&[patches, frames, c])?, mode)?;
        if let Some(n) = &mut self.norm {
            y = n.forward(y, mode)?;
        }
        self.relu.forward(y, mode)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let (patches, frames, k) = self.dims;
        let mut d = self.relu.backward(dy)?;
        if let Some(n) = &mut self.norm {
            d = n.backward(&d)?;
        }
        let d = self.conv.backward(&d)?;
        let c = d.channels();
        let d = self.pool.backward(&d.reshape(&[patches * frames, c])?)?;
        self.mlp.backward(&d.reshape(&[patches * frames * k, c])?)
    }

    fn infer(
        &self,
        patches: usize,
        frames: usize,
        k: usize,
        build: impl Fn(Range<usize>) -> Result<Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let c = self.mlp.c_out();
        let widest = c.max(self.mlp.c_in()).max(512);
        let chunk = (CHUNK_ELEMS / (frames * k * widest).max(1)).max(1);
        let mut pooled = Vec::with_capacity(patches * frames * c);
        let mut start = 0;
        while start < patches {
            let end = (start + chunk).min(patches);
            let h = self.mlp.infer(build(start..end)?)?;
            let (p, _) = self.pool.pool(&h.reshape(&[(end - start) * frames, k, c])?)?;
            pooled.extend_from_slice(p.data());
            start = end;
        }
        let mut y = self.conv.apply(&Tensor::from_vec(&[patches, frames, c], pooled)?)?;
        if let Some(n) = &self.norm {
            y = n.apply_eval(y)?;
        }
        Ok(Relu::apply(y))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.mlp.params_mut();
        v.extend(self.conv.params_mut());
        if let Some(n) = &mut self.norm {
            v.extend(n.params_mut());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = self.mlp.buffers_mut();
        if let Some(n) = &mut self.norm {
            v.extend(n.buffers_mut());
        }
        v
    }
}

#[derive(Debug, Clone)]
struct FcBlock<F> {
    linear: Linear<F>,
    norm: Option<BatchNorm<F>>,
    relu: Relu,
    dropout: Dropout<F>,
}

#[derive(Debug, Clone)]
enum Head<F> {
    PerFrame {
        blocks: Vec<FcBlock<F>>,
        smooth: DepthwiseTemporalConv<F>,
        out: Linear<F>,
    },
    PerClip {
        fc: Linear<F>,
        pool: MaxPool,
    },
}

/// Network outputs for a batch of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<F> {
    /// `[clips, frames, classes]`; absent for the per-clip head.
    pub frame_logits: Option<Tensor<F>>,
    /// `[clips, classes]`; the frame mean for the per-frame head.
    pub clip_logits: Tensor<F>,
}

impl<F: Scalar> Outputs<F> {
    /// Frame logits of clip `b` as `[frames, classes]`.
    pub fn clip_frames(&self, b: usize) -> Option<Tensor<F>> {
        let f = self.frame_logits.as_ref()?;
        let (t, c) = (f.shape()[1], f.shape()[2]);
        Some(Tensor::from_vec(&[t, c], f.data()[b * t * c..(b + 1) * t * c].to_vec()).unwrap())
    }

    pub fn clip(&self, b: usize) -> &[F] {
        let c = self.clip_logits.channels();
        &self.clip_logits.data()[b * c..(b + 1) * c]
    }
}

#[derive(Debug, Clone)]
struct Cache<F> {
    batch: usize,
    frames: usize,
    geometry: Vec<ClipGeometry>,
    outputs: Vec<Tensor<F>>,
    patch_pool: MaxPool,
}

/// The hierarchical t-patch network.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    levels: Vec<TPatchModule<F>>,
    head: Head<F>,
    param_count: usize,
    cache: Option<Cache<F>>,
}

fn mean_frames<F: Scalar>(frame_logits: &Tensor<F>) -> Result<Tensor<F>> {
    let &[b, t, c] = frame_logits.shape() else {
        bail!(Shape, "frame logits must be [clips, frames, classes]");
    };
    let mut out = vec![F::zero(); b * c];
    let inv = F::lit(1.0 / t as f64);
    for (i, row) in frame_logits.data().chunks_exact(c).enumerate() {
        let o = &mut out[(i / t) * c..(i / t + 1) * c];
        for (a, &v) in o.iter_mut().zip(row) {
            *a += v * inv;
        }
    }
    Tensor::from_vec(&[b, c], out)
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let levels = config
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| TPatchModule::new(&format!("level{}", i + 1), l, config.batch_norm, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let c_feat = config.feature_channels();
        let head = match config.head {
            HeadMode::PerFrame => {
                let mut blocks = Vec::new();
                let mut c = c_feat;
                for (i, &w) in config.classifier.iter().enumerate() {
                    let name = format!("head.fc{}", i + 1);
                    blocks.push(FcBlock {
                        linear: Linear::new(&name, c, w, &mut rng),
                        norm: config.batch_norm.then(|| BatchNorm::new(&format!("head.bn{}", i + 1), w)),
                        relu: Relu::default(),
                        dropout: Dropout::new(config.dropout, config.init_seed ^ (0x5eed_d000 + i as u64))?,
                    });
                    c = w;
                }
                Head::PerFrame {
                    blocks,
                    smooth: DepthwiseTemporalConv::new("head.smooth", c, config.smoothing_len())?,
                    out: Linear::new("head.out", c, config.num_classes, &mut rng),
                }
            }
            HeadMode::PerClip => Head::PerClip {
                fc: Linear::new("head.out", c_feat, config.num_classes, &mut rng),
                pool: MaxPool::new(1),
            },
        };
        let mut model = Self {
            config,
            levels,
            head,
            param_count: 0,
            cache: None,
        };
        model.param_count = model.params_mut().iter().map(|p| p.value.len()).sum();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Trainable scalars per stage: one entry per level, then the head.
    pub fn param_count_by_stage(&mut self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self
            .levels
            .iter_mut()
            .enumerate()
            .map(|(i, l)| {
                (
                    format!("level{}", i + 1),
                    l.params_mut().iter().map(|p| p.value.len()).sum(),
                )
            })
            .collect();
        let total: usize = v.iter().map(|x| x.1).sum();
        v.push(("head".into(), self.param_count - total));
        v
    }

    /// Jitter standard deviation used for `seq`.
    pub fn jitter_sigma(&self, seq: &PointCloudSequence) -> Result<f64> {
        self.config.extraction.jitter_sigma(seq)
    }

    /// Extracts level-1 t-patches and, unless neighbors are searched in
    /// feature space, the deeper levels too.
    pub fn plan(&self, seq: &PointCloudSequence, seed: u64) -> Result<ClipGeometry> {
        let frames = seq.frame_count();
        let longest = self
            .config
            .levels
            .iter()
            .map(|l| l.temporal_kernel)
            .max()
            .unwrap_or(1);
        if frames < longest {
            bail!(Argument, "clip has {frames} frames, temporal kernel needs {longest}");
        }
        let ex = &self.config.extraction;
        let l1 = &self.config.levels[0];
        let params = ex.params(l1, seq, seed)?;
        let tpatches = extract(seq, &params, ex.variant)?;
        let mut levels = vec![LevelGeometry::from_tpatches(&tpatches, seq)];
        if !ex.feature_metric {
            for cfg in &self.config.levels[1..] {
                let next = plan_deeper::<F>(cfg, levels.last().unwrap(), None, ex.backend)?;
                levels.push(next);
            }
        }
        Ok(ClipGeometry { tpatches, levels })
    }

    pub fn plan_batch(&self, clips: &[&PointCloudSequence], seeds: &[u64]) -> Result<Vec<ClipGeometry>> {
        if clips.len() != seeds.len() {
            bail!(Argument, "{} clips but {} seeds", clips.len(), seeds.len());
        }
        clips.par_iter().zip(seeds).map(|(c, &s)| self.plan(c, s)).collect()
    }

    /// Cached forward pass; `backward` may follow.
    pub fn forward(&mut self, clips: &[&PointCloudSequence], seeds: &[u64], mode: Mode) -> Result<Outputs<F>> {
        let g = self.plan_batch(clips, seeds)?;
        self.forward_geometry(g, mode)
    }

    fn ensure_level(&self, geometry: &mut [ClipGeometry], l: usize, prev: Option<&Tensor<F>>) -> Result<()> {
        if geometry.iter().all(|g| g.levels.len() > l) {
            return Ok(());
        }
        let prev = prev.expect("level 1 is always planned");
        let per_clip = prev.len() / geometry.len();
        for (b, g) in geometry.iter_mut().enumerate() {
            if g.levels.len() <= l {
                let f = &prev.data()[b * per_clip..(b + 1) * per_clip];
                let next = plan_deeper(&self.config.levels[l], &g.levels[l - 1], Some(f), self.config.extraction.backend)?;
                g.levels.push(next);
            }
        }
        Ok(())
    }

    fn check_batch(&self, geometry: &[ClipGeometry]) -> Result<usize> {
        let Some(first) = geometry.first() else {
            bail!(Argument, "empty batch");
        };
        let frames = first.frames();
        for g in geometry {
            if g.frames() != frames {
                bail!(Shape, "all clips in a batch need the same frame count");
            }
            if g.levels[0].k != first.levels[0].k || g.levels[0].m != first.levels[0].m {
                bail!(Shape, "all clips in a batch need the same patch layout");
            }
        }
        if self.config.head == HeadMode::PerFrame && frames < 2 {
            bail!(Argument, "per-frame classification needs at least 2 frames, got {frames}");
        }
        if self.config.head == HeadMode::PerFrame && self.config.smoothing_len() > frames {
            bail!(
                Argument,
                "smoothing kernel {} longer than the {frames}-frame clip",
                self.config.smoothing_len()
            );
        }
        Ok(frames)
    }

    /// Cached forward pass over precomputed geometry.
    pub fn forward_geometry(&mut self, mut geometry: Vec<ClipGeometry>, mode: Mode) -> Result<Outputs<F>> {
        let frames = self.check_batch(&geometry)?;
        let batch = geometry.len();
        let mut outputs: Vec<Tensor<F>> = Vec::with_capacity(self.levels.len());
        for l in 0..self.levels.len() {
            self.ensure_level(&mut geometry, l, outputs.last())?;
            let geoms: Vec<&LevelGeometry> = geometry.iter().map(|g| &g.levels[l]).collect();
            let patches = batch * geoms[0].m;
            let x = gather(&geoms, outputs.last(), 0..patches)?;
            let y = self.levels[l].forward(x, patches, frames, mode)?;
            outputs.push(y);
        }
        let last = outputs.last().unwrap();
        let c = last.channels();
        let m = last.shape()[0] / batch;
        let mut patch_pool = MaxPool::new(1);
        let pooled = patch_pool.forward(last.clone().reshape(&[batch, m, frames * c])?, mode)?;
        let feats = pooled.reshape(&[batch * frames, c])?;
        let out = self.head_forward(feats, batch, frames, mode)?;
        self.cache = Some(Cache {
            batch,
            frames,
            geometry,
            outputs,
            patch_pool,
        });
        Ok(out)
    }

    fn head_forward(&mut self, mut x: Tensor<F>, batch: usize, frames: usize, mode: Mode) -> Result<Outputs<F>> {
        match &mut self.head {
            Head::PerFrame { blocks, smooth, out } => {
                for b in blocks.iter_mut() {
                    x = b.linear.forward(x, mode)?;
                    if let Some(n) = &mut b.norm {
                        x = n.forward(x, mode)?;
                    }
                    x = b.relu.forward(x, mode)?;
                    x = b.dropout.forward(x, mode)?;
                }
                let c = x.channels();
                let x = smooth.forward(x.reshape(&[batch, frames, c])?, mode)?;
                let logits = out.forward(x.reshape(&[batch * frames, c])?, mode)?;
                let k = logits.channels();
                let frame_logits = logits.reshape(&[batch, frames, k])?;
                Ok(Outputs {
                    clip_logits: mean_frames(&frame_logits)?,
                    frame_logits: Some(frame_logits),
                })
            }
            Head::PerClip { fc, pool } => {
                let logits = fc.forward(x, mode)?;
                let k = logits.channels();
                let clip_logits = pool.forward(logits.reshape(&[batch, frames, k])?, mode)?;
                Ok(Outputs {
                    frame_logits: None,
                    clip_logits,
                })
            }
        }
    }

    /// Back-propagates `d_logits` (`[clips, frames, classes]` for the
    /// per-frame head, `[clips, classes]` for the per-clip head) and
    /// accumulates parameter gradients.
    pub fn backward(&mut self, d_logits: &Tensor<F>) -> Result<()> {
        self.backward_impl(d_logits, true).map(|_| ())
    }

    /// Like [`Model::backward`] but stops at the level-1 output and returns
    /// its gradient `[clips * M1, frames, C1]`.
    pub fn backward_to_level1(&mut self, d_logits: &Tensor<F>) -> Result<Tensor<F>> {
        self.backward_impl(d_logits, false)
    }

    fn backward_impl(&mut self, d_logits: &Tensor<F>, full: bool) -> Result<Tensor<F>> {
        let Some(mut cache) = self.cache.take() else {
            bail!(Precondition, "backward called before forward");
        };
        let result = self.backward_cached(&mut cache, d_logits, full);
        self.cache = Some(cache);
        result
    }

    fn backward_cached(&mut self, cache: &mut Cache<F>, d_logits: &Tensor<F>, full: bool) -> Result<Tensor<F>> {
        let (batch, frames) = (cache.batch, cache.frames);
        let k = self.config.num_classes;
        let d_feat = match &mut self.head {
            Head::PerFrame { blocks, smooth, out } => {
                if d_logits.shape() != [batch, frames, k] {
                    bail!(Shape, "expected frame-logit gradient {:?}", [batch, frames, k]);
                }
                let d = out.backward(&d_logits.clone().reshape(&[batch * frames, k])?)?;
                let c = d.channels();
                let mut d = smooth.backward(&d.reshape(&[batch, frames, c])?)?.reshape(&[batch * frames, c])?;
                for b in blocks.iter_mut().rev() {
                    d = b.dropout.backward(&d)?;
                    d = b.relu.backward(&d)?;
                    if let Some(n) = &mut b.norm {
                        d = n.backward(&d)?;
                    }
                    d = b.linear.backward(&d)?;
                }
                d
            }
            Head::PerClip { fc, pool } => {
                if d_logits.shape() != [batch, k] {
                    bail!(Shape, "expected clip-logit gradient {:?}", [batch, k]);
                }
                let d = pool.backward(d_logits)?;
                fc.backward(&d.reshape(&[batch * frames, k])?)?
            }
        };
        let c = d_feat.channels();
        let d = cache.patch_pool.backward(&d_feat.reshape(&[batch, frames * c])?)?;
        let mut d = d.reshape(cache.outputs.last().unwrap().shape())?;
        for l in (0..self.levels.len()).rev() {
            if l == 0 && !full {
                return Ok(d);
            }
            let dx = self.levels[l].backward(&d)?;
            if l == 0 {
                return Ok(d);
            }
            let mut dprev = Tensor::zeros(cache.outputs[l - 1].shape());
            let geoms: Vec<&LevelGeometry> = cache.geometry.iter().map(|g| &g.levels[l]).collect();
            scatter(&geoms, &dx, &mut dprev);
            d = dprev;
        }
        unreachable!("at least one level")
    }

    /// Geometry of the last cached forward pass.
    pub fn cached_geometry(&self) -> Option<&[ClipGeometry]> {
        self.cache.as_ref().map(|c| c.geometry.as_slice())
    }

    /// Output `[clips * M, frames, C]` of level `l` (0-based) from the last
    /// cached forward pass.
    pub fn cached_level_output(&self, l: usize) -> Option<&Tensor<F>> {
        self.cache.as_ref().and_then(|c| c.outputs.get(l))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Eval-mode inference for one clip without caches; activations are
    /// built in chunks of patches.
    pub fn infer(&self, seq: &PointCloudSequence, seed: u64) -> Result<Outputs<F>> {
        self.infer_geometry(self.plan(seq, seed)?)
    }

    pub fn infer_geometry(&self, geometry: ClipGeometry) -> Result<Outputs<F>> {
        let feats = self.infer_features(geometry)?;
        self.infer_head(feats)
    }

    /// Feature stage of [`Model::infer`]: all t-patch levels and the max
    /// over patches, giving `[frames, C]`.
    pub fn infer_features(&self, geometry: ClipGeometry) -> Result<Tensor<F>> {
        let mut geometry = vec![geometry];
        let frames = self.check_batch(&geometry)?;
        let mut prev: Option<Tensor<F>> = None;
        for l in 0..self.levels.len() {
            self.ensure_level(&mut geometry, l, prev.as_ref())?;
            let geo = &geometry[0].levels[l];
            let geoms = [geo];
            let y = self.levels[l].infer(geo.m, frames, geo.k, |r| gather(&geoms, prev.as_ref(), r))?;
            prev = Some(y);
        }
        let last = prev.unwrap();
        let c = last.channels();
        let m = last.shape()[0];
        let (pooled, _) = MaxPool::new(1).pool(&last.reshape(&[1, m, frames * c])?)?;
        pooled.reshape(&[frames, c])
    }

    /// Classifier stage of [`Model::infer`] on `[frames, C]` features.
    pub fn infer_head(&self, mut x: Tensor<F>) -> Result<Outputs<F>> {
        let frames = x.shape()[0];
        match &self.head {
            Head::PerFrame { blocks, smooth, out } => {
                for b in blocks {
                    x = b.linear.apply(&x)?;
                    if let Some(n) = &b.norm {
                        x = n.apply_eval(x)?;
                    }
                    x = Relu::apply(x);
                }
                let c = x.channels();
                let x = smooth.apply(&x.reshape(&[1, frames, c])?)?;
                let logits = out.apply(&x.reshape(&[frames, c])?)?;
                let k = logits.channels();
                let frame_logits = logits.reshape(&[1, frames, k])?;
                Ok(Outputs {
                    clip_logits: mean_frames(&frame_logits)?,
                    frame_logits: Some(frame_logits),
                })
            }
            Head::PerClip { fc, .. } => {
                let logits = fc.apply(&x)?;
                let k = logits.channels();
                let (clip_logits, _) = MaxPool::new(1).pool(&logits.reshape(&[1, frames, k])?)?;
                Ok(Outputs {
                    frame_logits: None,
                    clip_logits,
                })
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = self.levels.iter_mut().flat_map(|l| l.params_mut()).collect();
        match &mut self.head {
            Head::PerFrame { blocks, smooth, out } => {
                for b in blocks {
                    v.extend(b.linear.params_mut());
                    if let Some(n) = &mut b.norm {
                        v.extend(n.params_mut());
                    }
                }
                v.extend(smooth.params_mut());
                v.extend(out.params_mut());
            }
            Head::PerClip { fc, .. } => v.extend(fc.params_mut()),
        }
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v: Vec<_> = self.levels.iter_mut().flat_map(|l| l.buffers_mut()).collect();
        if let Head::PerFrame { blocks, .. } = &mut self.head {
            for b in blocks {
                if let Some(n) = &mut b.norm {
                    v.extend(n.buffers_mut());
                }
            }
        }
        v
    }

    /// Resets every batch-norm running mean to 0, variance to 1 and batch
    /// count to 0.
    pub fn reset_running_stats(&mut self) {
        for (name, t) in self.buffers_mut() {
            t.fill(if name.ends_with(".running_var") { F::one() } else { F::zero() });
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(F::zero());
        }
    }

    /// The final classification layer (the smoothing output feeds it).
    pub fn output_layer_mut(&mut self) -> &mut Linear<F> {
        match &mut self.head {
            Head::PerFrame { out, .. } => out,
            Head::PerClip { fc, .. } => fc,
        }
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state_dict(&mut self) -> Vec<NamedTensor> {
        let mut v: Vec<NamedTensor> = self
            .params_mut()
            .into_iter()
            .map(|p| NamedTensor::from_tensor(p.name.clone(), &p.value))
            .collect();
        v.extend(self.buffers_mut().into_iter().map(|(n, t)| NamedTensor::from_tensor(n, t)));
        v
    }

    /// Loads every parameter and buffer; names and shapes must match exactly.
    pub fn load_state_dict(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let lookup = |name: &str, shape: &[usize]| -> Result<&NamedTensor> {
            let Some(t) = tensors.iter().find(|t| t.name == name) else {
                bail!(Validation, "checkpoint is missing tensor {name}");
            };
            if t.shape != shape {
                bail!(Validation, "tensor {name} has shape {:?}, model expects {shape:?}", t.shape);
            }
            Ok(t)
        };
        let mut used = 0;
        for p in self.params_mut() {
            let t = lookup(&p.name, p.value.shape())?;
            p.value = t.to_tensor()?;
            used += 1;
        }
        for (name, buf) in self.buffers_mut() {
            let t = lookup(&name, buf.shape())?;
            *buf = t.to_tensor()?;
            used += 1;
        }
        if used != tensors.len() {
            bail!(Validation, "checkpoint has {} tensors, model uses {used}", tensors.len());
        }
        self.cache = None;
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        Checkpoint {
            tensors: self.state_dict(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.load_state_dict(&ckpt.tensors)?;
        Ok(m)
    }
}
