//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys, repeated
//! keys and malformed values are errors. [`RunConfig::render`] writes every
//! key, so a rendered file reproduces the run exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataeval::{Motion, SyntheticSpec};
use crate::error::bail;
use crate::model::{HeadMode, Jitter, LevelConfig, ModelConfig, TrainConfig};
use crate::nnkit::AdamConfig;
use crate::sampling::Backend;
use crate::tpatch::Variant;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub synth: SyntheticSpec,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Stride between clip windows cut from loaded sequences; windows are
    /// `model.clip_length` long. 0 means non-overlapping.
    pub clip_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub batch_size: usize,
    pub frames: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Checkpoint read by eval and saliency; empty means `<out>/best.ckpt`.
    pub checkpoint: PathBuf,
    /// PCSQ input for extract and saliency; empty means the first test clip.
    pub input: PathBuf,
    /// Saliency target class; `None` uses the clip's majority label.
    pub saliency_target: Option<usize>,
    pub bench: BenchConfig,
    pub gradcheck_per_tensor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::paper_default(3);
        Self {
            seed: 0,
            data: DataConfig {
                dir: PathBuf::from("data"),
                synth: SyntheticSpec::default(),
                train_per_class: 5,
                val_per_class: 1,
                clip_stride: 0,
            },
            model,
            train: TrainConfig::default(),
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            saliency_target: None,
            bench: BenchConfig {
                runs: 50,
                batch_size: 4,
                frames: 64,
                points: 1024,
            },
            gradcheck_per_tensor: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "invalid boolean {v:?} for {key}"),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Forward => "forward",
        Variant::Bidirectional => "bidirectional",
        Variant::BidirectionalUnion => "union",
        Variant::GroundTruth => "gt",
    }
}

/// Splits `text` into `(line, key, value)` triples.
fn pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "line {}: expected `key = value`", i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!(Config, "line {}: empty key", i + 1);
        }
        if !seen.insert(k.to_string()) {
            bail!(Config, "line {}: key {k} given twice", i + 1);
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = pairs(text)?;
        // The level count must be known before per-level keys apply.
        if let Some((_, k, v)) = pairs.iter().find(|p| p.1 == "model.levels") {
            cfg.set(k, v)?;
        }
        let mut explicit_in = false;
        for (line, k, v) in &pairs {
            if k == "model.levels" {
                continue;
            }
            explicit_in |= k.ends_with(".in_channels");
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        if !explicit_in {
            cfg.model = cfg.model.chain_widths();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.data.synth;
        if s.num_classes != self.model.num_classes {
            bail!(
                Config,
                "data.classes = {} but model.num_classes = {}",
                s.num_classes,
                self.model.num_classes
            );
        }
        if self.train.batch_size == 0 || self.bench.batch_size == 0 || self.bench.runs == 0 {
            bail!(Config, "batch sizes and bench.runs must be >= 1");
        }
        if let Some(t) = self.saliency_target {
            if t >= self.model.num_classes {
                bail!(Config, "saliency.target {t} out of range");
            }
        }
        Ok(())
    }

    fn level_mut(&mut self, n: usize) -> Result<&mut LevelConfig> {
        let count = self.model.levels.len();
        match n.checked_sub(1).and_then(|i| self.model.levels.get_mut(i)) {
            Some(l) => Ok(l),
            None => bail!(Config, "level{n} does not exist (model.levels = {count})"),
        }
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("level") {
            if let Some((n, field)) = rest.split_once('.') {
                let n: usize = parse(key, n)?;
                let l = self.level_mut(n)?;
                match field {
                    "m" => l.m = parse(key, v)?,
                    "k" => l.k = parse(key, v)?,
                    "mlp" => l.mlp = parse_list(key, v)?,
                    "temporal_kernel" => l.temporal_kernel = parse(key, v)?,
                    "in_channels" => l.in_channels = parse(key, v)?,
                    _ => bail!(Config, "unknown key {key}"),
                }
                return Ok(());
            }
        }
        let m = &mut self.model;
        let ex = &mut m.extraction;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => d.dir = PathBuf::from(v),
            "data.classes" => d.synth.num_classes = parse(key, v)?,
            "data.clips_per_class" => d.synth.clips_per_class = parse(key, v)?,
            "data.frames" => d.synth.frames = parse(key, v)?,
            "data.points" => d.synth.points = parse(key, v)?,
            "data.motions" => {
                d.synth.motions = if v.is_empty() || v == "auto" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Motion>>>()?
                }
            }
            "data.noise_sigma" => d.synth.noise_sigma = parse(key, v)?,
            "data.limb_fraction" => d.synth.limb_fraction = parse(key, v)?,
            "data.train_per_class" => d.train_per_class = parse(key, v)?,
            "data.val_per_class" => d.val_per_class = parse(key, v)?,
            "data.clip_stride" => d.clip_stride = parse(key, v)?,
            "model.levels" => {
                let n: usize = parse(key, v)?;
                if !(1..=8).contains(&n) {
                    bail!(Config, "model.levels must be in 1..=8");
                }
                let last = m.levels.last().cloned().unwrap();
                m.levels.resize(n, last);
            }
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.clip_length" => m.clip_length = parse(key, v)?,
            "model.classifier" => m.classifier = parse_list(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.smoothing_kernel" => {
                let s: usize = parse(key, v)?;
                m.smoothing_kernel = (s > 0).then_some(s);
            }
            "model.head" => {
                m.head = match v {
                    "per-frame" => HeadMode::PerFrame,
                    "per-clip" => HeadMode::PerClip,
                    _ => bail!(Config, "model.head must be per-frame or per-clip"),
                }
            }
            "model.batch_norm" => m.batch_norm = parse_bool(key, v)?,
            "extract.variant" => {
                ex.variant = match v {
                    "forward" => Variant::Forward,
                    "bidirectional" => Variant::Bidirectional,
                    "union" => Variant::BidirectionalUnion,
                    "gt" => Variant::GroundTruth,
                    _ => bail!(Config, "extract.variant must be forward, bidirectional, union or gt"),
                }
            }
            "extract.jitter" => {
                ex.jitter = match v.split_once(':') {
                    None if v == "off" => Jitter::Off,
                    Some(("fixed", s)) => Jitter::Fixed(parse(key, s)?),
                    Some(("spacing", s)) => Jitter::SpacingFactor(parse(key, s)?),
                    _ => bail!(Config, "extract.jitter must be off, fixed:<sigma> or spacing:<factor>"),
                }
            }
            "extract.backend" => {
                ex.backend = match v {
                    "grid" => Backend::Grid,
                    "brute" => Backend::Brute,
                    _ => bail!(Config, "extract.backend must be grid or brute"),
                }
            }
            "extract.random_fps_start" => ex.random_fps_start = parse_bool(key, v)?,
            "extract.feature_metric" => ex.feature_metric = parse_bool(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps_per_epoch" => {
                let s: usize = parse(key, v)?;
                t.steps_per_epoch = (s > 0).then_some(s);
            }
            "train.lr" => t.adam.lr = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.eps" => t.adam.eps = parse(key, v)?,
            "train.recalibrate_bn" => t.recalibrate_bn = parse_bool(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "input" => self.input = PathBuf::from(v),
            "saliency.target" => {
                self.saliency_target = if v == "label" { None } else { Some(parse(key, v)?) }
            }
            "bench.runs" => self.bench.runs = parse(key, v)?,
            "bench.batch_size" => self.bench.batch_size = parse(key, v)?,
            "bench.frames" => self.bench.frames = parse(key, v)?,
            "bench.points" => self.bench.points = parse(key, v)?,
            "gradcheck.per_tensor" => self.gradcheck_per_tensor = parse(key, v)?,
            _ => bail!(Config, "unknown key {key}"),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let a: &AdamConfig = &t.adam;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data.dir", d.dir.display().to_string());
        kv("data.classes", d.synth.num_classes.to_string());
        kv("data.clips_per_class", d.synth.clips_per_class.to_string());
        kv("data.frames", d.synth.frames.to_string());
        kv("data.points", d.synth.points.to_string());
        kv(
            "data.motions",
            if d.synth.motions.is_empty() {
                "auto".into()
            } else {
                d.synth.motions.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
            },
        );
        kv("data.noise_sigma", d.synth.noise_sigma.to_string());
        kv("data.limb_fraction", d.synth.limb_fraction.to_string());
        kv("data.train_per_class", d.train_per_class.to_string());
        kv("data.val_per_class", d.val_per_class.to_string());
        kv("data.clip_stride", d.clip_stride.to_string());
        kv("model.levels", m.levels.len().to_string());
        for (i, l) in m.levels.iter().enumerate() {
            let n = i + 1;
            kv(&format!("level{n}.m"), l.m.to_string());
            kv(&format!("level{n}.k"), l.k.to_string());
            kv(&format!("level{n}.in_channels"), l.in_channels.to_string());
            kv(&format!("level{n}.mlp"), join(&l.mlp));
            kv(&format!("level{n}.temporal_kernel"), l.temporal_kernel.to_string());
        }
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.clip_length", m.clip_length.to_string());
        kv("model.classifier", join(&m.classifier));
        kv("model.dropout", m.dropout.to_string());
        kv("model.smoothing_kernel", m.smoothing_kernel.unwrap_or(0).to_string());
        kv(
            "model.head",
            match m.head {
                HeadMode::PerFrame => "per-frame",
                HeadMode::PerClip => "per-clip",
            }
            .into(),
        );
        kv("model.batch_norm", m.batch_norm.to_string());
        let ex = &m.extraction;
        kv("extract.variant", variant_name(ex.variant).into());
        kv(
            "extract.jitter",
            match ex.jitter {
                Jitter::Off => "off".into(),
                Jitter::Fixed(s) => format!("fixed:{s}"),
                Jitter::SpacingFactor(f) => format!("spacing:{f}"),
            },
        );
        kv(
            "extract.backend",
            match ex.backend {
                Backend::Grid => "grid",
                Backend::Brute => "brute",
            }
            .into(),
        );
        kv("extract.random_fps_start", ex.random_fps_start.to_string());
        kv("extract.feature_metric", ex.feature_metric.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.steps_per_epoch", t.steps_per_epoch.unwrap_or(0).to_string());
        kv("train.lr", a.lr.to_string());
        kv("train.beta1", a.beta1.to_string());
        kv("train.beta2", a.beta2.to_string());
        kv("train.eps", a.eps.to_string());
        kv("train.recalibrate_bn", t.recalibrate_bn.to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("input", self.input.display().to_string());
        kv(
            "saliency.target",
            self.saliency_target.map_or("label".into(), |t| t.to_string()),
        );
        kv("bench.runs", self.bench.runs.to_string());
        kv("bench.batch_size", self.bench.batch_size.to_string());
        kv("bench.frames", self.bench.frames.to_string());
        kv("bench.points", self.bench.points.to_string());
        kv("gradcheck.per_tensor", self.gradcheck_per_tensor.to_string());
        s
    }

    /// The model config with seeds derived from the run seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.synth.clone()
        }
    }

    pub fn clip_stride(&self) -> usize {
        if self.data.clip_stride == 0 {
            self.model.clip_length
        } else {
            self.data.clip_stride
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# toy\nseed = 7\nlevel1.m = 64  # fewer\nlevel2.m=16\nlevel3.m = 16\nmodel.head = per-clip\n\
                    extract.jitter = fixed:0.02\nextract.variant = union\ntrain.steps_per_epoch = 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.levels[0].m, 64);
        assert_eq!(cfg.model.head, HeadMode::PerClip);
        assert_eq!(cfg.model.extraction.jitter, Jitter::Fixed(0.02));
        assert_eq!(cfg.model.extraction.variant, Variant::BidirectionalUnion);
        assert_eq!(cfg.train.steps_per_epoch, Some(3));
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn level_count_and_width_chain() {
        let cfg = RunConfig::parse("model.levels = 2\nlevel2.mlp = 32,48\nlevel1.mlp = 16").unwrap();
        assert_eq!(cfg.model.levels.len(), 2);
        assert_eq!(cfg.model.levels[1].in_channels, 19);
        assert_eq!(cfg.model.feature_channels(), 48);
        assert!(RunConfig::parse("model.levels = 2\nlevel3.m = 4").is_err());
        assert!(RunConfig::parse("level2.in_channels = 100").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense = 1",
            "seed 4",
            "seed = -1",
            "seed = 1\nseed = 2",
            "= 3",
            "model.head = sideways",
            "model.batch_norm = maybe",
            "level1.mlp = 4,,5",
            "levelx.m = 3",
            "level1.colour = red",
            "data.motions = wobble",
            "data.classes = 4",
            "saliency.target = 9",
            "extract.jitter = loud",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
