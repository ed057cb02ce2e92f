//! Point cloud sequences, clips and the PCSQ binary format.
//!
//! PCSQ layout (all little-endian):
//!
//! ```text
//! "PCSQ" | version u32 (=1) | flags u32 | frame_count u32
//! per frame: point_count u32, point_count * 3 * f32
//! if flags & 1: for t >= 1, N^{t-1} * u32 target indices into frame t
//! if flags & 2: frame_count * u32 class indices
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::bail;
use crate::{Error, Point3, Result};

pub const MAGIC: &[u8; 4] = b"PCSQ";
pub const VERSION: u32 = 1;
const FLAG_CORRESPONDENCE: u32 = 1;
const FLAG_LABELS: u32 = 2;

/// An ordered sequence of point cloud frames.
///
/// Point counts may differ between frames. Optional forward correspondence
/// maps each point of frame `t - 1` to a point of frame `t`; optional labels
/// give one class index per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    frames: Vec<Vec<Point3>>,
    correspondence: Option<Vec<Vec<u32>>>,
    labels: Option<Vec<u32>>,
}

impl PointCloudSequence {
    pub fn new(frames: Vec<Vec<Point3>>) -> Result<Self> {
        if frames.is_empty() {
            bail!(Validation, "sequence has no frames");
        }
        for (t, frame) in frames.iter().enumerate() {
            if frame.is_empty() {
                bail!(Validation, "frame {t} has no points");
            }
            if frame.iter().flatten().any(|c| !c.is_finite()) {
                bail!(Validation, "frame {t} contains a non-finite coordinate");
            }
        }
        Ok(Self {
            frames,
            correspondence: None,
            labels: None,
        })
    }

    /// Attaches forward correspondence: `maps[t - 1][i]` is the index in frame
    /// `t` of point `i` of frame `t - 1`.
    pub fn with_correspondence(mut self, maps: Vec<Vec<u32>>) -> Result<Self> {
        if maps.len() + 1 != self.frames.len() {
            bail!(
                Validation,
                "expected {} correspondence maps, got {}",
                self.frames.len() - 1,
                maps.len()
            );
        }
        for (i, map) in maps.iter().enumerate() {
            let (src, dst) = (self.frames[i].len(), self.frames[i + 1].len());
            if map.len() != src {
                bail!(
                    Validation,
                    "correspondence {}->{} covers {} of {} points",
                    i,
                    i + 1,
                    map.len(),
                    src
                );
            }
            if let Some(&bad) = map.iter().find(|&&j| j as usize >= dst) {
                bail!(
                    Validation,
                    "correspondence {}->{} target {} out of range (frame has {} points)",
                    i,
                    i + 1,
                    bad,
                    dst
                );
            }
        }
        self.correspondence = Some(maps);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.frames.len() {
            bail!(
                Validation,
                "expected {} labels, got {}",
                self.frames.len(),
                labels.len()
            );
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks every label against a class count.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                bail!(Validation, "label {bad} outside [0, {num_classes})");
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Vec<Point3>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Point3] {
        &self.frames[t]
    }

    pub fn point_count(&self, t: usize) -> usize {
        self.frames[t].len()
    }

    pub fn correspondence(&self) -> Option<&[Vec<u32>]> {
        self.correspondence.as_deref()
    }

    /// Map from frame `t - 1` into frame `t`.
    pub fn forward_map(&self, t: usize) -> Option<&[u32]> {
        assert!(t >= 1 && t < self.frames.len(), "frame {t} has no incoming map");
        self.correspondence.as_ref().map(|m| m[t - 1].as_slice())
    }

    /// Reverse lookup from frame `t` into frame `t - 1`. Entries are `None`
    /// for points of frame `t` that no point maps to; when several points
    /// merge, the lowest source index wins.
    pub fn reverse_map(&self, t: usize) -> Option<Vec<Option<u32>>> {
        let fwd = self.forward_map(t)?;
        let mut rev = vec![None; self.frames[t].len()];
        for (src, &dst) in fwd.iter().enumerate() {
            let slot = &mut rev[dst as usize];
            if slot.is_none() {
                *slot = Some(src as u32);
            }
        }
        Some(rev)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Copies frames `[start, start + len)` with labels and correspondence
    /// sliced to match.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            bail!(
                Argument,
                "slice [{start}, {}) outside {} frames",
                start + len,
                self.frames.len()
            );
        }
        Ok(Self {
            frames: self.frames[start..start + len].to_vec(),
            correspondence: self
                .correspondence
                .as_ref()
                .map(|m| m[start..start + len - 1].to_vec()),
            labels: self.labels.as_ref().map(|l| l[start..start + len].to_vec()),
        })
    }

    /// Returns a copy with every frame replaced by `f(t, frame)`. Point
    /// counts must be preserved.
    pub fn map_frames(&self, mut f: impl FnMut(usize, &[Point3]) -> Vec<Point3>) -> Result<Self> {
        let frames: Vec<Vec<Point3>> = self
            .frames
            .iter()
            .enumerate()
            .map(|(t, fr)| f(t, fr))
            .collect();
        if frames.iter().zip(&self.frames).any(|(a, b)| a.len() != b.len()) {
            bail!(Shape, "frame mapping changed a point count");
        }
        let mut out = Self::new(frames)?;
        out.correspondence = self.correspondence.clone();
        out.labels = self.labels.clone();
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let points: usize = self.frames.iter().map(Vec::len).sum();
        let mut buf = Vec::with_capacity(16 + 4 * self.frames.len() * 3 + 12 * points);
        buf.extend_from_slice(MAGIC);
        let mut flags = 0;
        if self.correspondence.is_some() {
            flags |= FLAG_CORRESPONDENCE;
        }
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        for word in [VERSION, flags, self.frames.len() as u32] {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        for frame in &self.frames {
            buf.extend_from_slice(&(frame.len() as u32).to_le_bytes());
            for c in frame.iter().flatten() {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        if let Some(maps) = &self.correspondence {
            for j in maps.iter().flatten() {
                buf.extend_from_slice(&j.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        buf
    }

    /// Decodes a PCSQ byte buffer. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            bail!(Format, "bad magic, expected PCSQ");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported PCSQ version {version}");
        }
        let flags = r.u32()?;
        if flags & !(FLAG_CORRESPONDENCE | FLAG_LABELS) != 0 {
            bail!(Format, "unknown flag bits {flags:#x}");
        }
        let frame_count = r.u32()? as usize;
        // Each frame needs at least its point count word.
        r.ensure(frame_count.saturating_mul(4))?;
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let n = r.u32()? as usize;
            r.ensure(n.saturating_mul(12))?;
            let mut frame = Vec::with_capacity(n);
            for _ in 0..n {
                frame.push([r.f32()?, r.f32()?, r.f32()?]);
            }
            frames.push(frame);
        }
        let correspondence = if flags & FLAG_CORRESPONDENCE != 0 {
            let mut maps = Vec::with_capacity(frame_count.saturating_sub(1));
            for t in 1..frame_count {
                let n = frames[t - 1].len();
                r.ensure(n * 4)?;
                maps.push((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            Some(maps)
        } else {
            None
        };
        let labels = if flags & FLAG_LABELS != 0 {
            r.ensure(frame_count * 4)?;
            Some((0..frame_count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if r.remaining() != 0 {
            bail!(Format, "{} trailing bytes after payload", r.remaining());
        }
        let mut seq = Self::new(frames)?;
        if let Some(maps) = correspondence {
            seq = seq.with_correspondence(maps)?;
        }
        if let Some(labels) = labels {
            seq = seq.with_labels(labels)?;
        }
        Ok(seq)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<PointCloudSequence> {
    PointCloudSequence::decode(&fs::read(path)?)
}

pub fn save_sequence(seq: &PointCloudSequence, path: impl AsRef<Path>) -> Result<()> {
    seq.save(path)
}

/// Little-endian cursor with truncation errors instead of panics.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn ensure(&self, n: usize) -> Result<()> {
        if self.remaining() < n {
            bail!(
                Truncated,
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            );
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.ensure(n)?;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A fixed-length window of consecutive frames cut from a source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub seq: PointCloudSequence,
    pub source_id: String,
    pub start: usize,
}

impl Clip {
    /// Wraps a whole sequence as a clip starting at frame 0.
    pub fn whole(seq: PointCloudSequence, source_id: impl Into<String>) -> Self {
        Self {
            seq,
            source_id: source_id.into(),
            start: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.seq.frame_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Cuts windows `[i * stride, i * stride + length)`; a trailing partial
/// window is dropped, and a sequence shorter than `length` yields no clips.
pub fn clip_sequence(
    seq: &PointCloudSequence,
    source_id: &str,
    length: usize,
    stride: usize,
) -> Result<Vec<Clip>> {
    if length < 2 {
        bail!(Argument, "clip length must be >= 2, got {length}");
    }
    if stride == 0 {
        bail!(Argument, "clip stride must be >= 1");
    }
    let total = seq.frame_count();
    let mut clips = Vec::new();
    let mut start = 0;
    while start + length <= total {
        clips.push(Clip {
            seq: seq.slice(start, length)?,
            source_id: source_id.to_string(),
            start,
        });
        start += stride;
    }
    Ok(clips)
}

/// Perturbs every coordinate with independent N(0, sigma^2) noise.
///
/// Frame structure, labels and correspondence are carried over unchanged.
/// `sigma == 0` returns an exact copy.
pub fn add_gaussian_noise(
    seq: &PointCloudSequence,
    sigma: f64,
    seed: u64,
) -> Result<PointCloudSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seq.map_frames(|_, frame| {
        frame
            .iter()
            .map(|p| p.map(|c| (c as f64 + normal.sample(&mut rng)) as f32))
            .collect()
    })
}
