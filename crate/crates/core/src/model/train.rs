use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::network::{Model, Outputs};
use super::objective::batch_loss;
use crate::dataeval::{metrics, weighted_sampler, EvalReport, LabeledClip, VideoScores};
use crate::error::bail;
use crate::nnkit::{majority_label, softmax, Adam, AdamConfig, Checkpoint, Mode, OptimizerState};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to one pass worth of clips: `ceil(clips / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Best checkpoint is written here whenever it improves.
    pub checkpoint: Option<PathBuf>,
    /// Metrics CSV, rewritten after every epoch.
    pub log: Option<PathBuf>,
    /// Re-estimate batch-norm running statistics over the training clips
    /// with the end-of-epoch weights before evaluating.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            steps_per_epoch: None,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint: None,
            log: None,
            recalibrate_bn: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub report: EvalReport,
    pub l_frame: f64,
    pub l_seq: f64,
}

pub const LOG_HEADER: &str = "epoch,split,top1,top3,macro_recall,mAP,L_frame,L_seq";

/// The metrics log as CSV.
pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in logs {
        let r = &l.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            l.epoch, l.split, r.top1, r.top3, r.macro_recall, r.map, l.l_frame, l.l_seq
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_map: f64,
    /// Weights and optimizer state at the best epoch.
    pub best: Checkpoint,
    /// Per-step training loss, in order.
    pub step_losses: Vec<f64>,
}

/// Seed used to extract the t-patches of evaluation clip `i`.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    seed ^ 0xe7a1_0000_0000 ^ i as u64
}

/// Per-frame class probabilities of one clip.
pub fn frame_probabilities(out: &Outputs<f32>, b: usize, frames: usize) -> Vec<Vec<f64>> {
    let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    match out.clip_frames(b) {
        Some(f) => f.data().chunks_exact(f.channels()).map(|r| to64(softmax(r))).collect(),
        None => vec![to64(softmax(out.clip(b))); frames],
    }
}

/// Eval-mode predictions for every clip, with the mean loss terms.
pub struct Evaluation {
    pub report: EvalReport,
    pub l_frame: f64,
    pub l_seq: f64,
    pub videos: Vec<VideoScores>,
}

pub fn evaluate(model: &Model<f32>, clips: &[LabeledClip], seed: u64) -> Result<Evaluation> {
    if clips.is_empty() {
        bail!(Argument, "no clips to evaluate");
    }
    let head = model.config().head;
    let per_clip: Vec<(VideoScores, f64, f64)> = clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let labels = c.seq.labels().unwrap_or_default().to_vec();
            let out = model.infer(&c.seq, eval_seed(seed, i))?;
            let l = batch_loss(&out, &[&labels], head)?;
            let scores = frame_probabilities(&out, 0, c.seq.frame_count());
            Ok((VideoScores { scores, labels }, l.frame, l.seq))
        })
        .collect::<Result<_>>()?;
    let n = per_clip.len() as f64;
    let l_frame = per_clip.iter().map(|x| x.1).sum::<f64>() / n;
    let l_seq = per_clip.iter().map(|x| x.2).sum::<f64>() / n;
    let videos: Vec<VideoScores> = per_clip.into_iter().map(|x| x.0).collect();
    Ok(Evaluation {
        report: metrics(&videos, model.config().num_classes)?,
        l_frame,
        l_seq,
        videos,
    })
}

/// Recomputes batch-norm running statistics from train-mode passes over
/// `clips` in order, `batch_size` at a time. With at most ten batches the
/// result is their exact average.
pub fn recalibrate_bn(model: &mut Model<f32>, clips: &[LabeledClip], batch_size: usize, seed: u64) -> Result<()> {
    model.reset_running_stats();
    for (i, chunk) in clips.chunks(batch_size.max(1)).enumerate() {
        let seqs: Vec<_> = chunk.iter().map(|c| &c.seq).collect();
        let seeds: Vec<u64> = (0..seqs.len()).map(|j| eval_seed(seed, i * batch_size + j)).collect();
        model.forward(&seqs, &seeds, Mode::Train)?;
    }
    model.clear_cache();
    Ok(())
}

fn snapshot(model: &mut Model<f32>, adam: &Adam<f32>) -> Checkpoint {
    let (names, shapes): (Vec<String>, Vec<Vec<usize>>) = model
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .unzip();
    Checkpoint {
        tensors: model.state_dict(),
        optimizer: Some(OptimizerState {
            step: adam.step,
            tensors: adam.export(&names, &shapes),
        }),
    }
}

/// Trains with Adam on batches drawn by the class-balanced sampler. After
/// every epoch the training-batch metrics and (if any) validation metrics
/// are logged; the best validation mAP (training mAP without a validation
/// set) selects the kept checkpoint.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[LabeledClip],
    val_set: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        bail!(Argument, "empty training set");
    }
    if cfg.batch_size == 0 {
        bail!(Argument, "batch size must be >= 1");
    }
    let classes = model.config().num_classes;
    let frames = train_set[0].seq.frame_count();
    let mut clip_class = Vec::with_capacity(train_set.len());
    let mut frame_counts = vec![0u64; classes];
    for c in train_set {
        if c.seq.frame_count() != frames {
            bail!(Argument, "training clips must share one length; {} differs", c.id);
        }
        let Some(labels) = c.seq.labels() else {
            bail!(Argument, "training clip {} has no labels", c.id);
        };
        c.seq.validate_labels(classes)?;
        for &l in labels {
            frame_counts[l as usize] += 1;
        }
        clip_class.push(majority_label(labels).unwrap() as usize);
    }
    // Classes absent from the training set are never drawn.
    let present: Vec<u64> = frame_counts.iter().copied().filter(|&n| n > 0).collect();
    let probs = weighted_sampler(&present)?;
    let mut class_prob = vec![0.0; classes];
    for (c, p) in frame_counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c)
        .zip(probs)
    {
        class_prob[c] = p;
    }
    let clip_weights: Vec<f64> = clip_class.iter().map(|&c| class_prob[c]).collect();
    let sampler = WeightedIndex::new(&clip_weights).map_err(|e| crate::Error::Argument(e.to_string()))?;

    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(cfg.batch_size));
    let head = model.config().head;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut logs = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let mut videos = Vec::new();
        let (mut lf, mut ls) = (0.0, 0.0);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
            let seeds: Vec<u64> = idx.iter().map(|_| rng.gen()).collect();
            let seqs: Vec<_> = idx.iter().map(|&i| &train_set[i].seq).collect();
            let labels: Vec<&[u32]> = seqs.iter().map(|s| s.labels().unwrap()).collect();
            model.zero_grad();
            let out = model.forward(&seqs, &seeds, Mode::Train)?;
            let loss = batch_loss(&out, &labels, head)?;
            if !loss.total.is_finite() {
                bail!(Precondition, "loss became non-finite at epoch {epoch}");
            }
            model.backward(&loss.grad)?;
            adam.step(&mut model.params_mut())?;
            step_losses.push(loss.total);
            lf += loss.frame;
            ls += loss.seq;
            for (b, l) in labels.iter().enumerate() {
                videos.push(VideoScores {
                    scores: frame_probabilities(&out, b, frames),
                    labels: l.to_vec(),
                });
            }
        }
        model.clear_cache();
        if cfg.recalibrate_bn {
            recalibrate_bn(model, train_set, cfg.batch_size, cfg.seed ^ epoch as u64)?;
        }
        let train_report = metrics(&videos, classes)?;
        let mut score = train_report.map;
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            report: train_report,
            l_frame: lf / steps as f64,
            l_seq: ls / steps as f64,
        });
        if !val_set.is_empty() {
            let ev = evaluate(model, val_set, cfg.seed)?;
            score = ev.report.map;
            logs.push(EpochLog {
                epoch,
                split: "val".into(),
                report: ev.report,
                l_frame: ev.l_frame,
                l_seq: ev.l_seq,
            });
        }
        if best.as_ref().map_or(true, |b| score > b.1) {
            let ckpt = snapshot(model, &adam);
            if let Some(p) = &cfg.checkpoint {
                ckpt.save(p)?;
            }
            best = Some((epoch, score, ckpt));
        }
        if let Some(p) = &cfg.log {
            fs::write(p, log_csv(&logs))?;
        }
    }
    let Some((best_epoch, best_map, best)) = best else {
        bail!(Argument, "training needs at least one epoch");
    };
    Ok(TrainOutcome {
        logs,
        best_epoch,
        best_map,
        best,
        step_losses,
    })
}
