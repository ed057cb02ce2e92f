use proptest::prelude::*;
use tempfile::TempDir;
use tpatch_core::dataeval::{
    average_precision, generate, load_dataset, metrics, split_by_class, weighted_sampler, write_dataset, Motion,
    SyntheticSpec, VideoScores,
};

fn spec(motions: Vec<Motion>, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: motions.len(),
        clips_per_class: 2,
        frames: 12,
        points: 200,
        motions,
        seed,
        ..Default::default()
    }
}

fn displacement(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn oscillating_limb_moves_only_the_limb() {
    for c in generate(&spec(vec![Motion::OscillateLimb, Motion::RotateRigid], 3)).unwrap() {
        if c.class != 0 {
            continue;
        }
        let f0 = c.seq.frame(0);
        let mut limb_moved = 0.0f64;
        for t in 1..c.seq.frame_count() {
            for ((p, q), &limb) in f0.iter().zip(c.seq.frame(t)).zip(&c.limb) {
                let d = displacement(p, q);
                if limb {
                    limb_moved = limb_moved.max(d);
                } else {
                    assert_eq!(p, q);
                }
            }
        }
        assert!(limb_moved > 0.05, "{limb_moved}");
    }
}

#[test]
fn rigid_motions_preserve_pairwise_distances() {
    let clips = generate(&spec(vec![Motion::RotateRigid, Motion::TranslateRigid], 4)).unwrap();
    for c in &clips {
        let f0 = c.seq.frame(0);
        let last = c.seq.frame(c.seq.frame_count() - 1);
        for i in (0..f0.len()).step_by(17) {
            for j in (1..f0.len()).step_by(23) {
                let d0 = displacement(&f0[i], &f0[j]);
                let d1 = displacement(&last[i], &last[j]);
                assert!((d0 - d1).abs() < 1e-5, "{d0} vs {d1}");
            }
        }
        assert!(displacement(&f0[0], &last[0]) > 1e-3);
    }
}

#[test]
fn translation_moves_every_point_by_the_same_offset() {
    let clips = generate(&spec(vec![Motion::TranslateRigid, Motion::Converge], 5)).unwrap();
    let c = clips.iter().find(|c| c.class == 0).unwrap();
    let (f0, f1) = (c.seq.frame(0), c.seq.frame(1));
    let v: [f32; 3] = std::array::from_fn(|a| f1[0][a] - f0[0][a]);
    for t in 0..c.seq.frame_count() {
        let tf = t as f32;
        for (p, q) in f0.iter().zip(c.seq.frame(t)) {
            for a in 0..3 {
                assert!((q[a] - (p[a] + tf * v[a])).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn generation_is_seeded_labelled_and_normalized() {
    let s = spec(vec![Motion::ExpandContract, Motion::RotateRigid, Motion::OscillateLimb], 6);
    let a = generate(&s).unwrap();
    assert_eq!(a, generate(&s).unwrap());
    assert_ne!(a, generate(&SyntheticSpec { seed: 7, ..s.clone() }).unwrap());
    for c in &a {
        assert_eq!(c.seq.labels().unwrap(), vec![c.class; 12].as_slice());
        let maps = c.seq.correspondence().unwrap();
        assert!(maps.iter().all(|m| m.iter().enumerate().all(|(i, &j)| i as u32 == j)));
        let f0 = c.seq.frame(0);
        for axis in 0..3 {
            let lo = f0.iter().map(|p| p[axis]).fold(f32::INFINITY, f32::min);
            let hi = f0.iter().map(|p| p[axis]).fold(f32::NEG_INFINITY, f32::max);
            assert!(lo.abs() < 1e-6 && hi <= 1.0 + 1e-6);
        }
    }
}

#[test]
fn dataset_round_trip_through_manifest() {
    let clips = generate(&spec(vec![Motion::OscillateLimb, Motion::TranslateRigid], 8)).unwrap();
    let (train, val, test) = split_by_class(clips.clone(), 1, 0);
    assert_eq!((train.len(), val.len(), test.len()), (2, 0, 2));
    let dir = TempDir::new().unwrap();
    let manifest = write_dataset(dir.path(), &train).unwrap();
    assert_eq!(manifest.entries.len(), 2);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), train.len());
    for (a, b) in back.iter().zip(&train) {
        assert_eq!((a.class, &a.seq), (b.class, &b.seq));
    }
}

#[test]
fn sampler_is_inverse_frequency() {
    let p = weighted_sampler(&[10, 30, 60]).unwrap();
    let z = 1.0 / 10.0 + 1.0 / 30.0 + 1.0 / 60.0;
    for (got, n) in p.iter().zip([10.0, 30.0, 60.0]) {
        assert!((got - 1.0 / n / z).abs() < 1e-15);
    }
    assert!(weighted_sampler(&[3, 0]).is_err());
}

/// AP straight from the definition: for each positive, the fraction of
/// frames ranked at or above it that are positive.
fn ap_oracle(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1
    };
    let pos: Vec<usize> = (0..n).filter(|&i| positive[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| pos.iter().filter(|&&j| rank(j) <= rank(i)).count() as f64 / rank(i) as f64)
        .sum();
    Some(total / pos.len() as f64)
}

fn videos(classes: usize) -> impl Strategy<Value = Vec<VideoScores>> {
    prop::collection::vec(
        (1usize..8).prop_flat_map(move |n| {
            (
                prop::collection::vec(prop::collection::vec((0u8..4).prop_map(|v| v as f64 / 3.0), classes), n),
                prop::collection::vec(0..classes as u32, n),
            )
                .prop_map(|(scores, labels)| VideoScores { scores, labels })
        }),
        1..5,
    )
}

proptest! {
    #[test]
    fn average_precision_matches_the_definition(
        pairs in prop::collection::vec(((0u8..5).prop_map(|v| v as f64), any::<bool>()), 1..30)
    ) {
        let (scores, positive): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let (a, b) = (average_precision(&scores, &positive), ap_oracle(&scores, &positive));
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_rank_based(v in videos(4), scale in 0.1f64..10.0) {
        let r = metrics(&v, 4).unwrap();
        let scaled: Vec<VideoScores> = v
            .iter()
            .map(|x| VideoScores {
                scores: x.scores.iter().map(|s| s.iter().map(|c| c * scale).collect()).collect(),
                labels: x.labels.clone(),
            })
            .collect();
        let s = metrics(&scaled, 4).unwrap();
        prop_assert_eq!((r.top1, r.top3, r.macro_recall), (s.top1, s.top3, s.macro_recall));
        prop_assert!((r.map - s.map).abs() < 1e-12);
        prop_assert!(r.top1 <= r.top3);
        prop_assert!((0.0..=1.0).contains(&r.map));
    }
}

#[test]
fn perfect_scores_give_perfect_metrics() {
    let v = vec![VideoScores {
        scores: vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]],
        labels: vec![0, 1, 0],
    }];
    let r = metrics(&v, 2).unwrap();
    assert_eq!((r.top1, r.macro_recall, r.map), (100.0, 100.0, 1.0));
    assert!(metrics(&[], 2).is_err());
}
