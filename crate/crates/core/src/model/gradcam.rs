use super::config::HeadMode;
use super::network::Model;
use crate::error::bail;
use crate::nnkit::{Mode, Tensor};
use crate::pcseq::PointCloudSequence;
use crate::Result;

/// Per-point relevance for one target class.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub target: usize,
    /// One score per point of every frame; points outside all level-1
    /// patches score 0.
    pub scores: Vec<Vec<f32>>,
}

impl Saliency {
    pub fn max(&self) -> f32 {
        self.scores.iter().flatten().fold(0.0, |m, &v| m.max(v))
    }

    /// Scores scaled into [0, 1] by the clip-wide maximum.
    pub fn normalized(&self) -> Vec<Vec<f32>> {
        let m = self.max();
        self.scores
            .iter()
            .map(|f| f.iter().map(|&v| if m > 0.0 { v / m } else { 0.0 }).collect())
            .collect()
    }

    /// Scores laid out as one flat little-endian f32 stream, frame-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.scores.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// GradCAM over the level-1 t-patch features.
///
/// For frame `t` the class-`target` logit of that frame is back-propagated
/// to the level-1 outputs `A[p, t, c]`; channel weights are the gradients
/// averaged over patches, and patch relevance `ReLU(sum_c w_c A[p, t, c])`
/// is added to every distinct point of the patch's frame-`t` neighborhood.
/// With the per-clip head the clip logit is used for every frame.
pub fn gradcam(model: &mut Model<f32>, seq: &PointCloudSequence, target: usize, seed: u64) -> Result<Saliency> {
    let classes = model.config().num_classes;
    if target >= classes {
        bail!(Argument, "target class {target} out of range for {classes} classes");
    }
    let geometry = model.plan(seq, seed)?;
    model.forward_geometry(vec![geometry], Mode::Eval)?;
    let frames = seq.frame_count();
    let acts = model.cached_level_output(0).unwrap().clone();
    let (m, c) = (acts.shape()[0], acts.channels());
    let geo = model.cached_geometry().unwrap()[0].levels[0].clone();

    let head = model.config().head;
    let clip_grad = if head == HeadMode::PerClip {
        let mut d = Tensor::zeros(&[1, classes]);
        d.data_mut()[target] = 1.0;
        Some(model.backward_to_level1(&d)?)
    } else {
        None
    };

    let mut scores: Vec<Vec<f32>> = (0..frames).map(|t| vec![0.0; seq.point_count(t)]).collect();
    for t in 0..frames {
        let grad = match &clip_grad {
            Some(g) => g.clone(),
            None => {
                let mut d = Tensor::zeros(&[1, frames, classes]);
                d.data_mut()[t * classes + target] = 1.0;
                model.backward_to_level1(&d)?
            }
        };
        let mut w = vec![0.0f64; c];
        for p in 0..m {
            let row = &grad.data()[(p * frames + t) * c..(p * frames + t + 1) * c];
            for (a, &g) in w.iter_mut().zip(row) {
                *a += g as f64;
            }
        }
        w.iter_mut().for_each(|a| *a /= m as f64);
        let mut seen = Vec::new();
        for p in 0..m {
            let row = &acts.data()[(p * frames + t) * c..(p * frames + t + 1) * c];
            let r: f64 = row.iter().zip(&w).map(|(&a, &wc)| a as f64 * wc).sum();
            if r <= 0.0 {
                continue;
            }
            seen.clear();
            for &i in geo.neighbors_at(p, t) {
                if !seen.contains(&i) {
                    seen.push(i);
                    scores[t][i as usize] += r as f32;
                }
            }
        }
    }
    model.zero_grad();
    model.clear_cache();
    Ok(Saliency { target, scores })
}
