use crate::error::bail;
use crate::sampling::Backend;
use crate::pcseq::PointCloudSequence;
use crate::tpatch::{mean_nn_spacing, ExtractParams, Variant};
use crate::Result;

/// One hierarchical t-patch module.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    /// Number of t-patches (query points) at this level.
    pub m: usize,
    /// Neighbors per patch per frame.
    pub k: usize,
    /// Channels entering the shared MLP: 3 relative coordinates plus the
    /// previous level's output channels.
    pub in_channels: usize,
    pub mlp: Vec<usize>,
    pub temporal_kernel: usize,
}

impl LevelConfig {
    pub fn out_channels(&self) -> usize {
        self.mlp.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Two FC blocks, temporal smoothing, final FC; one prediction per frame.
    PerFrame,
    /// One FC per frame followed by a max over frames.
    PerClip,
}

/// Query jitter used while tracking level-1 patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    Off,
    /// Fixed standard deviation in length units.
    Fixed(f64),
    /// Multiple of the mean nearest-neighbor spacing of the clip's first frame.
    SpacingFactor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig {
    pub variant: Variant,
    pub jitter: Jitter,
    pub backend: Backend,
    pub random_fps_start: bool,
    /// Search level-2+ neighbors by feature distance instead of position.
    pub feature_metric: bool,
}

impl ExtractionConfig {
    /// Query jitter standard deviation for `seq`.
    pub fn jitter_sigma(&self, seq: &PointCloudSequence) -> Result<f64> {
        Ok(match self.jitter {
            Jitter::Off => 0.0,
            Jitter::Fixed(s) => s,
            Jitter::SpacingFactor(f) => f * mean_nn_spacing(seq.frame(0))?,
        })
    }

    /// Level-1 extraction parameters for `seq`.
    pub fn params(&self, level: &LevelConfig, seq: &PointCloudSequence, seed: u64) -> Result<ExtractParams> {
        Ok(ExtractParams {
            m: level.m,
            k: level.k,
            jitter_sigma: self.jitter_sigma(seq)?,
            seed,
            backend: self.backend,
            random_fps_start: self.random_fps_start,
        })
    }
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bidirectional,
            jitter: Jitter::SpacingFactor(0.5),
            backend: Backend::Grid,
            random_fps_start: false,
            feature_metric: false,
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub levels: Vec<LevelConfig>,
    /// Hidden classifier widths before the final class layer.
    pub classifier: Vec<usize>,
    pub dropout: f64,
    pub clip_length: usize,
    /// Smoothing kernel length; `None` spans the whole clip.
    pub smoothing_kernel: Option<usize>,
    pub num_classes: usize,
    pub head: HeadMode,
    pub batch_norm: bool,
    pub extraction: ExtractionConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Three levels of 512/128/128 patches with 16 neighbors, MLPs
    /// (64,64,128), (128,128,256), (256,512,1024), temporal kernels 8/4/8,
    /// classifier (512, 256, classes), dropout 0.4, 64-frame clips.
    pub fn paper_default(num_classes: usize) -> Self {
        Self {
            levels: vec![
                LevelConfig {
                    m: 512,
                    k: 16,
                    in_channels: 3,
                    mlp: vec![64, 64, 128],
                    temporal_kernel: 8,
                },
                LevelConfig {
                    m: 128,
                    k: 16,
                    in_channels: 128 + 3,
                    mlp: vec![128, 128, 256],
                    temporal_kernel: 4,
                },
                LevelConfig {
                    m: 128,
                    k: 16,
                    in_channels: 256 + 3,
                    mlp: vec![256, 512, 1024],
                    temporal_kernel: 8,
                },
            ],
            classifier: vec![512, 256],
            dropout: 0.4,
            clip_length: 64,
            smoothing_kernel: None,
            num_classes,
            head: HeadMode::PerFrame,
            batch_norm: true,
            extraction: ExtractionConfig::default(),
            init_seed: 0,
        }
    }

    /// Recomputes every level's input width from the level below.
    pub fn chain_widths(mut self) -> Self {
        let mut prev = 0;
        for level in &mut self.levels {
            level.in_channels = prev + 3;
            prev = level.out_channels();
        }
        self
    }

    pub fn smoothing_len(&self) -> usize {
        self.smoothing_kernel.unwrap_or(self.clip_length)
    }

    pub fn feature_channels(&self) -> usize {
        self.levels.last().map_or(0, LevelConfig::out_channels)
    }

    /// `(patches, channels)` produced by each level, per frame.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.m, l.out_channels())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            bail!(Config, "model needs at least one t-patch level");
        }
        let mut prev_out = 0;
        let mut prev_m = usize::MAX;
        for (i, l) in self.levels.iter().enumerate() {
            let n = i + 1;
            if l.m == 0 || l.k == 0 {
                bail!(Config, "level {n}: M and k must be >= 1");
            }
            if l.m > prev_m {
                bail!(Config, "level {n}: M = {} exceeds previous level's {prev_m}", l.m);
            }
            if l.mlp.is_empty() || l.mlp.contains(&0) {
                bail!(Config, "level {n}: MLP widths must be non-empty and positive");
            }
            if l.temporal_kernel == 0 {
                bail!(Config, "level {n}: temporal kernel must be >= 1");
            }
            if l.temporal_kernel > self.clip_length {
                bail!(
                    Config,
                    "level {n}: temporal kernel {} exceeds clip length {}",
                    l.temporal_kernel,
                    self.clip_length
                );
            }
            if l.in_channels != prev_out + 3 {
                bail!(
                    Config,
                    "level {n}: input width {} does not equal previous output {prev_out} + 3",
                    l.in_channels
                );
            }
            prev_out = l.out_channels();
            prev_m = l.m;
        }
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.head == HeadMode::PerFrame && (self.classifier.is_empty() || self.classifier.contains(&0)) {
            bail!(Config, "per-frame head needs positive classifier widths");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must be in [0, 1), got {}", self.dropout);
        }
        if self.clip_length < 2 {
            bail!(Config, "clip length must be >= 2");
        }
        let s = self.smoothing_len();
        if s == 0 || s > self.clip_length {
            bail!(Config, "smoothing kernel {s} must be in [1, {}]", self.clip_length);
        }
        match self.extraction.jitter {
            Jitter::Fixed(v) | Jitter::SpacingFactor(v) if !(v >= 0.0) || !v.is_finite() => {
                bail!(Config, "jitter must be finite and >= 0, got {v}")
            }
            _ => {}
        }
        Ok(())
    }
}
