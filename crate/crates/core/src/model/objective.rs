use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadMode, LevelConfig, ModelConfig};
use super::network::{ClipGeometry, Model, Outputs};
use crate::error::bail;
use crate::dataeval::{generate, SyntheticSpec};
use crate::nnkit::gradcheck::{layer_suite, relative_error, STEP};
use crate::nnkit::{cross_entropy, loss_total, majority_label, Mode, Scalar, Tensor};
use crate::pcseq::PointCloudSequence;
use crate::Result;

/// Batch-averaged loss terms and the gradient with respect to the logits
/// the head produces.
#[derive(Debug, Clone)]
pub struct BatchLoss<F> {
    pub frame: f64,
    pub seq: f64,
    pub total: f64,
    pub grad: Tensor<F>,
}

/// Mean over clips of `L_frame + L_seq` (per-frame head) or of the clip
/// cross-entropy against the majority label (per-clip head).
pub fn batch_loss<F: Scalar>(out: &Outputs<F>, labels: &[&[u32]], head: HeadMode) -> Result<BatchLoss<F>> {
    let batch = out.clip_logits.shape()[0];
    if labels.len() != batch {
        bail!(Argument, "{} label rows for {batch} clips", labels.len());
    }
    let inv_b = F::lit(1.0 / batch as f64);
    match head {
        HeadMode::PerFrame => {
            let Some(fl) = &out.frame_logits else {
                bail!(Precondition, "per-frame loss needs frame logits");
            };
            let (frames, c) = (fl.shape()[1], fl.shape()[2]);
            let mut grad = Vec::with_capacity(fl.len());
            let (mut lf, mut ls) = (0.0, 0.0);
            for (b, lab) in labels.iter().enumerate() {
                if lab.len() != frames {
                    bail!(Argument, "clip {b} has {} labels for {frames} frames", lab.len());
                }
                let clip = Tensor::from_vec(&[c], out.clip(b).to_vec())?;
                let l = loss_total(&out.clip_frames(b).unwrap(), &clip, lab)?;
                lf += l.frame.to_f64().unwrap();
                ls += l.seq.to_f64().unwrap();
                let inv_t = F::lit(1.0 / frames as f64);
                for row in l.d_frame_logits.data().chunks_exact(c) {
                    grad.extend(
                        row.iter()
                            .zip(l.d_clip_logits.data())
                            .map(|(&df, &dc)| (df + dc * inv_t) * inv_b),
                    );
                }
            }
            let n = batch as f64;
            Ok(BatchLoss {
                frame: lf / n,
                seq: ls / n,
                total: (lf + ls) / n,
                grad: Tensor::from_vec(&[batch, frames, c], grad)?,
            })
        }
        HeadMode::PerClip => {
            let targets = labels
                .iter()
                .map(|l| majority_label(l).map(|x| x as usize))
                .collect::<Option<Vec<_>>>();
            let Some(targets) = targets else {
                bail!(Argument, "clip has no labels");
            };
            let (l, grad) = cross_entropy(&out.clip_logits, &targets)?;
            let l = l.to_f64().unwrap();
            Ok(BatchLoss {
                frame: 0.0,
                seq: l,
                total: l,
                grad,
            })
        }
    }
}

/// Worst relative errors of the analytic parameter gradients of the full
/// network against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradReport {
    /// `(parameter name, max relative error)` per checked tensor.
    pub params: Vec<(String, f64)>,
    pub checked: usize,
}

impl ModelGradReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// Finite-difference check of the whole network in `f64`, in train mode
/// with geometry held fixed. Dropout is forced to 0 so the objective is
/// deterministic. Up to `per_tensor` entries of each parameter are probed.
pub fn check_model_gradients(
    config: &ModelConfig,
    clips: &[&PointCloudSequence],
    seed: u64,
    per_tensor: usize,
) -> Result<ModelGradReport> {
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut model = Model::<f64>::new(cfg.clone())?;
    let seeds: Vec<u64> = (0..clips.len() as u64).map(|i| seed.wrapping_add(i)).collect();
    let geometry = model.plan_batch(clips, &seeds)?;
    let labels: Vec<&[u32]> = clips
        .iter()
        .map(|c| c.labels().ok_or_else(|| crate::Error::Precondition("gradient check needs labels".into())))
        .collect::<Result<_>>()?;

    let eval = |model: &mut Model<f64>, g: &[ClipGeometry]| -> Result<BatchLoss<f64>> {
        let out = model.forward_geometry(g.to_vec(), Mode::Train)?;
        batch_loss(&out, &labels, cfg.head)
    };
    // Deeper levels searched in feature space are planned during the first
    // pass; reuse that geometry so perturbations cannot change neighbors.
    model.forward_geometry(geometry, Mode::Train)?;
    let geometry = model.cached_geometry().unwrap().to_vec();

    model.zero_grad();
    let l = eval(&mut model, &geometry)?;
    model.backward(&l.grad)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let mut report = ModelGradReport {
        params: Vec::new(),
        checked: 0,
    };
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let picks = sample(&mut rng, n, per_tensor.min(n)).into_vec();
        let mut worst: f64 = 0.0;
        for i in picks {
            let orig = model.params_mut()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + STEP;
            let up = eval(&mut model, &geometry)?.total;
            model.params_mut()[pi].value.data_mut()[i] = orig - STEP;
            let down = eval(&mut model, &geometry)?.total;
            model.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[i], numeric));
            report.checked += 1;
        }
        report.params.push((name.clone(), worst));
    }
    Ok(report)
}

/// One line of [`gradient_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// A tiny two-level model: T = 4, N = 32, M = (8, 4), k = 4.
pub fn tiny_config(num_classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        levels: vec![
            LevelConfig {
                m: 8,
                k: 4,
                in_channels: 3,
                mlp: vec![6, 8],
                temporal_kernel: 2,
            },
            LevelConfig {
                m: 4,
                k: 4,
                in_channels: 11,
                mlp: vec![8, 10],
                temporal_kernel: 2,
            },
        ],
        classifier: vec![12, 8],
        dropout: 0.0,
        clip_length: 4,
        smoothing_kernel: None,
        num_classes,
        head: HeadMode::PerFrame,
        batch_norm: true,
        extraction: Default::default(),
        init_seed: seed,
    }
}

/// Every layer, one full t-patch module (a single level under a per-clip
/// linear head) and the tiny end-to-end model, all in 64-bit.
pub fn gradient_suite(seed: u64, per_tensor: usize) -> Result<Vec<GradCheckRow>> {
    let mut rows: Vec<GradCheckRow> = layer_suite(seed)?
        .into_iter()
        .map(|(name, r)| GradCheckRow {
            name: name.to_string(),
            max_error: r.max_error(),
            tolerance: LAYER_TOLERANCE,
            checked: r.checked,
        })
        .collect();
    let data = generate(&SyntheticSpec {
        num_classes: 3,
        clips_per_class: 1,
        frames: 4,
        points: 32,
        seed,
        ..Default::default()
    })?;
    let seqs: Vec<&PointCloudSequence> = data.iter().map(|c| &c.seq).collect();

    let mut module = tiny_config(3, seed);
    module.levels.truncate(1);
    module.classifier.clear();
    module.head = HeadMode::PerClip;
    let r = check_model_gradients(&module, &seqs, seed, per_tensor)?;
    rows.push(GradCheckRow {
        name: "tpatch_module".into(),
        max_error: r.max_error(),
        tolerance: LAYER_TOLERANCE,
        checked: r.checked,
    });
    let r = check_model_gradients(&tiny_config(3, seed), &seqs, seed, per_tensor)?;
    rows.push(GradCheckRow {
        name: "end_to_end".into(),
        max_error: r.max_error(),
        tolerance: MODEL_TOLERANCE,
        checked: r.checked,
    });
    Ok(rows)
}
