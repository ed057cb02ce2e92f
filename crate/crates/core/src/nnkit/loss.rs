use super::tensor::{Scalar, Tensor};
use crate::error::bail;
use crate::Result;

/// Numerically stable softmax of one row.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let exp: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: F = exp.iter().copied().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    max + logits.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

/// Mean softmax cross-entropy over the rows of `[rows, classes]` logits,
/// with the gradient of that mean.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let c = logits.channels();
    let rows = logits.rows();
    if labels.len() != rows {
        bail!(Shape, "{} labels for {rows} logit rows", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        bail!(Argument, "label {bad} outside [0, {c})");
    }
    let inv_rows = F::one() / F::lit(rows as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(rows * c);
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        loss += log_sum_exp(row) - row[y];
        let mut p = softmax(row);
        p[y] -= F::one();
        grad.extend(p.into_iter().map(|g| g * inv_rows));
    }
    Ok((loss * inv_rows, Tensor::from_vec(logits.shape(), grad)?))
}

/// Most frequent label; ties go to the smallest class index.
pub fn majority_label(labels: &[u32]) -> Option<u32> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max as usize + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let best = counts.iter().copied().max()?;
    counts.iter().position(|&n| n == best).map(|i| i as u32)
}

/// Frame and sequence cross-entropy terms for one clip.
#[derive(Debug, Clone)]
pub struct TotalLoss<F> {
    pub frame: F,
    pub seq: F,
    pub total: F,
    pub d_frame_logits: Tensor<F>,
    pub d_clip_logits: Tensor<F>,
}

/// `L_frame + L_seq` with unit weights: the mean per-frame cross-entropy
/// plus the cross-entropy of the clip logits against the majority label.
pub fn loss_total<F: Scalar>(
    frame_logits: &Tensor<F>,
    clip_logits: &Tensor<F>,
    labels: &[u32],
) -> Result<TotalLoss<F>> {
    if clip_logits.len() != frame_logits.channels() {
        bail!(
            Shape,
            "clip logits have {} classes, frame logits {}",
            clip_logits.len(),
            frame_logits.channels()
        );
    }
    let frame_labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (frame, d_frame_logits) = cross_entropy(frame_logits, &frame_labels)?;
    let Some(clip_label) = majority_label(labels) else {
        bail!(Argument, "clip has no labels");
    };
    let clip = clip_logits.clone().reshape(&[1, clip_logits.len()])?;
    let (seq, d_clip) = cross_entropy(&clip, &[clip_label as usize])?;
    Ok(TotalLoss {
        frame,
        seq,
        total: frame + seq,
        d_frame_logits,
        d_clip_logits: d_clip.reshape(&[clip_logits.len()])?,
    })
}
