//! Frame-wise top-k accuracy, macro recall and average precision.

use std::fmt::Write as _;

use crate::error::bail;
use crate::Result;

/// Scores and ground truth of one video: one score vector per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent of frames whose label is the top class, per video then averaged.
    pub top1: f64,
    pub top3: f64,
    /// Percent; mean per-class recall over classes that occur.
    pub macro_recall: f64,
    /// Fraction; mean of the defined per-class APs.
    pub map: f64,
    /// `None` for classes without ground-truth frames.
    pub per_class_ap: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "top1,{}", self.top1);
        let _ = writeln!(s, "top3,{}", self.top3);
        let _ = writeln!(s, "macro_recall,{}", self.macro_recall);
        let _ = writeln!(s, "mAP,{}", self.map);
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(s, "ap_class_{c},{v}"),
                None => writeln!(s, "ap_class_{c},"),
            }
            .unwrap();
        }
        s
    }
}

/// Class indices ordered by descending score; ties keep the lower index
/// first.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count();
    better < k
}

/// Step-wise AP of one class: frames ranked by score (ties by position),
/// precision taken at every positive, averaged over positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

pub fn metrics(videos: &[VideoScores], num_classes: usize) -> Result<EvalReport> {
    if videos.is_empty() {
        bail!(Argument, "no videos to evaluate");
    }
    let mut flat_scores: Vec<&[f64]> = Vec::new();
    let mut flat_labels: Vec<usize> = Vec::new();
    let (mut top1, mut top3) = (0.0, 0.0);
    for (v, video) in videos.iter().enumerate() {
        if video.scores.len() != video.labels.len() {
            bail!(
                Argument,
                "video {v}: {} score vectors for {} labels",
                video.scores.len(),
                video.labels.len()
            );
        }
        if video.labels.is_empty() {
            bail!(Argument, "video {v} has no frames");
        }
        let (mut c1, mut c3) = (0usize, 0usize);
        for (s, &l) in video.scores.iter().zip(&video.labels) {
            if s.len() != num_classes {
                bail!(Argument, "video {v}: score vector of {} for {num_classes} classes", s.len());
            }
            let l = l as usize;
            if l >= num_classes {
                bail!(Argument, "video {v}: label {l} out of range");
            }
            c1 += in_top_k(s, l, 1) as usize;
            c3 += in_top_k(s, l, 3) as usize;
            flat_scores.push(s);
            flat_labels.push(l);
        }
        let n = video.labels.len() as f64;
        top1 += 100.0 * c1 as f64 / n;
        top3 += 100.0 * c3 as f64 / n;
    }
    let nv = videos.len() as f64;

    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (s, &l) in flat_scores.iter().zip(&flat_labels) {
        support[l] += 1;
        correct[l] += in_top_k(s, l, 1) as usize;
    }
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| correct[c] as f64 / support[c] as f64)
        .collect();
    let macro_recall = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;

    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let col: Vec<f64> = flat_scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = flat_labels.iter().map(|&l| l == c).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = defined.iter().sum::<f64>() / defined.len() as f64;

    Ok(EvalReport {
        top1: top1 / nv,
        top3: top3 / nv,
        macro_recall,
        map,
        per_class_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(labels: &[u32], scores: Vec<Vec<f64>>) -> VideoScores {
        VideoScores {
            scores,
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let v = video(
            &[0, 1, 2, 3],
            (0..4).map(|l| (0..4).map(|c| if c == l { 1.0 } else { 0.0 }).collect()).collect(),
        );
        let r = metrics(&[v], 4).unwrap();
        assert_eq!((r.top1, r.top3, r.macro_recall, r.map), (100.0, 100.0, 100.0, 1.0));
    }

    #[test]
    fn gt_always_third() {
        let scores = vec![vec![0.1, 0.3, 0.6, 0.0], vec![0.6, 0.3, 0.1, 0.0]];
        let r = metrics(&[video(&[0, 2], scores)], 4).unwrap();
        assert_eq!((r.top1, r.top3), (0.0, 100.0));
    }

    #[test]
    fn ties_rank_lower_class_first() {
        assert_eq!(rank_classes(&[0.5, 0.9, 0.5]), vec![1, 0, 2]);
        let r = metrics(&[video(&[0, 1], vec![vec![0.5, 0.5], vec![0.5, 0.5]])], 2).unwrap();
        assert_eq!(r.top1, 50.0);
    }

    #[test]
    fn per_video_averaging() {
        let a = video(&[0, 0, 0, 0], vec![vec![1.0, 0.0]; 4]);
        let b = video(&[1, 1], vec![vec![1.0, 0.0]; 2]);
        let r = metrics(&[a, b], 2).unwrap();
        assert_eq!(r.top1, 50.0);
        assert_eq!(r.macro_recall, 50.0);
        assert_eq!(r.per_class_ap.len(), 2);
    }

    #[test]
    fn missing_classes_and_errors() {
        let r = metrics(&[video(&[0, 0], vec![vec![0.9, 0.1, 0.0]; 2])], 3).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), None, None]);
        assert_eq!(r.map, 1.0);
        assert!(metrics(&[video(&[0], vec![])], 2).is_err());
        assert!(metrics(&[video(&[5], vec![vec![0.0, 1.0]])], 2).is_err());
        assert!(metrics(&[], 2).is_err());
    }
}
