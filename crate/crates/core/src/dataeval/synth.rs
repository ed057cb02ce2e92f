//! Procedural two-cluster "body + limb" shapes driven by simple motions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::error::bail;
use crate::pcseq::{add_gaussian_noise, PointCloudSequence};
use crate::{Error, Point3, Result};

/// Motion family that defines a synthetic action class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    /// The limb swings about its attachment joint; the body stays still.
    OscillateLimb,
    /// The whole shape spins about an axis through its centroid.
    RotateRigid,
    /// The whole shape moves with constant velocity: `x_t = x_0 + t v`.
    TranslateRigid,
    /// The shape breathes about its centroid.
    ExpandContract,
    /// The shape shrinks steadily towards its centroid.
    Converge,
}

impl Motion {
    pub const ALL: [Motion; 5] = [
        Motion::OscillateLimb,
        Motion::RotateRigid,
        Motion::TranslateRigid,
        Motion::ExpandContract,
        Motion::Converge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::OscillateLimb => "oscillate-limb",
            Motion::RotateRigid => "rotate-rigid",
            Motion::TranslateRigid => "translate-rigid",
            Motion::ExpandContract => "expand-contract",
            Motion::Converge => "converge",
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Motion::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub points: usize,
    /// One motion family per class; empty picks the first `num_classes`
    /// of [`Motion::ALL`].
    pub motions: Vec<Motion>,
    pub noise_sigma: f64,
    /// Share of points that belong to the limb cluster.
    pub limb_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clips_per_class: 8,
            frames: 64,
            points: 1024,
            motions: Vec::new(),
            noise_sigma: 0.0,
            limb_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn motions(&self) -> Vec<Motion> {
        if self.motions.is_empty() {
            Motion::ALL.iter().copied().take(self.num_classes).collect()
        } else {
            self.motions.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Argument, "synthetic dataset needs at least 2 classes, got {}", self.num_classes);
        }
        let motions = self.motions();
        if motions.len() != self.num_classes {
            bail!(
                Argument,
                "{} motion families for {} classes",
                motions.len(),
                self.num_classes
            );
        }
        for (i, m) in motions.iter().enumerate() {
            if motions[..i].contains(m) {
                bail!(Argument, "motion family {m} used by two classes");
            }
        }
        if self.frames < 2 {
            bail!(Argument, "clips need at least 2 frames");
        }
        if self.points < 8 {
            bail!(Argument, "need at least 8 points per frame, got {}", self.points);
        }
        if self.clips_per_class == 0 {
            bail!(Argument, "clips per class must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            bail!(Argument, "noise sigma must be finite and >= 0");
        }
        if !(self.limb_fraction > 0.0 && self.limb_fraction < 1.0) {
            bail!(Argument, "limb fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// A generated clip: exact identity correspondence, one label per frame,
/// and which points form the limb.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub class: u32,
    pub seq: PointCloudSequence,
    /// `true` for limb points; empty when unknown.
    pub limb: Vec<bool>,
}

/// Frame-0 shape: an ellipsoidal body and a smaller limb blob attached to
/// its side, scaled so the longest bounding-box side is 1 and the minimum
/// corner sits at the origin. Returns points, limb mask and joint position.
fn shape(points: usize, limb_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<bool>, [f64; 3]) {
    let n_limb = ((points as f64 * limb_fraction).round() as usize).clamp(1, points - 1);
    let body_r = [0.35, 0.25 + 0.1 * rng.gen::<f64>(), 0.2 + 0.1 * rng.gen::<f64>()];
    let joint = [body_r[0], 0.0, 0.0];
    let limb_len = 0.45 + 0.15 * rng.gen::<f64>();
    let mut pts = Vec::with_capacity(points);
    let mut limb = Vec::with_capacity(points);
    for i in 0..points {
        let is_limb = i >= points - n_limb;
        let u: f64 = rng.gen::<f64>().cbrt();
        let d: [f64; 3] = UnitSphere.sample(rng);
        let p = if is_limb {
            let s = rng.gen::<f64>();
            [
                joint[0] + s * limb_len,
                0.06 * u * d[1],
                0.06 * u * d[2],
            ]
        } else {
            [body_r[0] * u * d[0], body_r[1] * u * d[1], body_r[2] * u * d[2]]
        };
        pts.push(p);
        limb.push(is_limb);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let scale = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let norm = |p: [f64; 3]| [(p[0] - lo[0]) / scale, (p[1] - lo[1]) / scale, (p[2] - lo[2]) / scale];
    let joint = norm(joint);
    (pts.into_iter().map(norm).collect(), limb, joint)
}

/// Rodrigues rotation of `v` about unit `axis` by `angle`.
fn rotate(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let dot = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [0, 1, 2].map(|a| v[a] * c + cross[a] * s + axis[a] * dot * (1.0 - c))
}

fn centroid(p: &[[f64; 3]]) -> [f64; 3] {
    let n = p.len() as f64;
    [0, 1, 2].map(|a| p.iter().map(|x| x[a]).sum::<f64>() / n)
}

fn to_f32(p: [f64; 3]) -> Point3 {
    p.map(|c| c as f32)
}

/// One clip of `motion` over `frames` frames.
pub fn generate_clip(
    motion: Motion,
    frames: usize,
    points: usize,
    limb_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<Point3>>, Vec<bool>) {
    let (base, limb, joint) = shape(points, limb_fraction, rng);
    let c = centroid(&base);
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let span = (frames - 1).max(1) as f64;
    let frame0: Vec<Point3> = base.iter().map(|&p| to_f32(p)).collect();
    let out = match motion {
        Motion::OscillateLimb => {
            let amp = 0.6 + 0.3 * rng.gen::<f64>();
            let cycles = 1.0 + rng.gen::<f64>();
            (0..frames)
                .map(|t| {
                    let a = amp * ((2.0 * PI * cycles * t as f64 / span + phase).sin() - phase.sin());
                    base.iter()
                        .zip(&limb)
                        .zip(&frame0)
                        .map(|((&p, &is_limb), &p0)| {
                            if is_limb {
                                let r = rotate([0, 1, 2].map(|i| p[i] - joint[i]), axis, a);
                                to_f32([0, 1, 2].map(|i| joint[i] + r[i]))
                            } else {
                                p0
                            }
                        })
                        .collect()
                })
                .collect()
        }
        Motion::RotateRigid => {
            let total = (0.5 + 0.5 * rng.gen::<f64>()) * PI;
            (0..frames)
                .map(|t| {
                    let a = total * t as f64 / span;
                    base.iter()
                        .map(|&p| {
                            let r = rotate([0, 1, 2].map(|i| p[i] - c[i]), axis, a);
                            to_f32([0, 1, 2].map(|i| c[i] + r[i]))
                        })
                        .collect()
                })
                .collect()
        }
        Motion::TranslateRigid => {
            let speed = (0.3 + 0.3 * rng.gen::<f64>()) / span;
            let v = to_f32(axis.map(|a| a * speed));
            (0..frames)
                .map(|t| {
                    let tf = t as f32;
                    frame0
                        .iter()
                        .map(|p| [p[0] + tf * v[0], p[1] + tf * v[1], p[2] + tf * v[2]])
                        .collect()
                })
                .collect()
        }
        Motion::ExpandContract => {
            let amp = 0.25 + 0.15 * rng.gen::<f64>();
            let cycles = 1.0 + rng.gen::<f64>();
            (0..frames)
                .map(|t| {
                    let s = 1.0 + amp * (2.0 * PI * cycles * t as f64 / span).sin();
                    base.iter()
                        .map(|&p| to_f32([0, 1, 2].map(|i| c[i] + (p[i] - c[i]) * s)))
                        .collect()
                })
                .collect()
        }
        Motion::Converge => {
            let shrink = 0.85 + 0.1 * rng.gen::<f64>();
            (0..frames)
                .map(|t| {
                    let s = 1.0 - shrink * t as f64 / span;
                    base.iter()
                        .map(|&p| to_f32([0, 1, 2].map(|i| c[i] + (p[i] - c[i]) * s)))
                        .collect()
                })
                .collect()
        }
    };
    (out, limb)
}

fn clip_seed(seed: u64, class: usize, index: usize) -> u64 {
    seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Generates `clips_per_class` clips for every class, class-major.
/// Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<LabeledClip>> {
    spec.validate()?;
    let motions = spec.motions();
    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    for (class, &motion) in motions.iter().enumerate() {
        for i in 0..spec.clips_per_class {
            let s = clip_seed(spec.seed, class, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (frames, limb) = generate_clip(motion, spec.frames, spec.points, spec.limb_fraction, &mut rng);
            let identity: Vec<u32> = (0..spec.points as u32).collect();
            let seq = PointCloudSequence::new(frames)?
                .with_correspondence(vec![identity; spec.frames - 1])?
                .with_labels(vec![class as u32; spec.frames])?;
            let seq = add_gaussian_noise(&seq, spec.noise_sigma, s ^ 0x6e6f_6973_65)?;
            clips.push(LabeledClip {
                id: format!("c{class}_{i:04}"),
                class: class as u32,
                seq,
                limb,
            });
        }
    }
    Ok(clips)
}

/// Clips that contract towards their centroid, so nearest-neighbor
/// tracking collapses many queries onto few points.
pub fn converging_suite(count: usize, frames: usize, points: usize, noise_sigma: f64, seed: u64) -> Result<Vec<PointCloudSequence>> {
    if frames < 2 || points < 8 {
        bail!(Argument, "converging suite needs >= 2 frames and >= 8 points");
    }
    (0..count)
        .map(|i| {
            let s = clip_seed(seed, usize::MAX - 1, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (f, _) = generate_clip(Motion::Converge, frames, points, 0.25, &mut rng);
            let identity: Vec<u32> = (0..points as u32).collect();
            let seq = PointCloudSequence::new(f)?.with_correspondence(vec![identity; frames - 1])?;
            add_gaussian_noise(&seq, noise_sigma, s ^ 0x6e6f_6973_65)
        })
        .collect()
}

/// Per class, the first `n_train` clips, the next `n_val`, then the rest.
pub fn split_by_class(
    clips: Vec<LabeledClip>,
    n_train: usize,
    n_val: usize,
) -> (Vec<LabeledClip>, Vec<LabeledClip>, Vec<LabeledClip>) {
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in clips {
        let n = seen.entry(c.class).or_insert(0usize);
        if *n < n_train {
            train.push(c);
        } else if *n < n_train + n_val {
            val.push(c);
        } else {
            test.push(c);
        }
        *n += 1;
    }
    (train, val, test)
}
