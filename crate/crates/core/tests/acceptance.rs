//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and a summary line; the outcome is read from the report, not the exit
//! status, so the rest of the test suite still runs.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpatch_core::dataeval::{
    converging_suite, generate, metrics, split_by_class, LabeledClip, Motion, SyntheticSpec, VideoScores,
};
use tpatch_core::model::train::{eval_seed, log_csv};
use tpatch_core::model::{evaluate, gradcam, gradient_suite, tiny_config, train, Model, ModelConfig, TrainConfig};
use tpatch_core::sampling::{farthest_point_sample, knn_brute, Backend, GridIndex};
use tpatch_core::tpatch::{
    collapse_report, correspondence_accuracy, extract, mean_nn_spacing, ExtractParams, Variant,
};
use tpatch_core::Point3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    // a mix of uniform points, tight clusters and exact duplicates
    let mut pts: Vec<Point3> = Vec::with_capacity(n);
    while pts.len() < n {
        match rng.gen_range(0..10) {
            0 if !pts.is_empty() => {
                let p = pts[rng.gen_range(0..pts.len())];
                pts.push(p);
            }
            1..=2 => {
                let c: Point3 = [rng.gen(), rng.gen(), rng.gen()];
                for _ in 0..rng.gen_range(1..8).min(n - pts.len()) {
                    pts.push(c.map(|v| v + rng.gen_range(-1e-3..1e-3)));
                }
            }
            _ => pts.push([rng.gen(), rng.gen(), rng.gen::<f32>() * 0.3]),
        }
    }
    pts
}

fn knn_grid_vs_brute() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut queries, mut agree) = (0, 0);
    while queries < 10_000 {
        let n = rng.gen_range(1..=2000);
        let cloud = random_cloud(&mut rng, n);
        let grid = GridIndex::build(&cloud).unwrap();
        for _ in 0..250 {
            let q: Point3 = if rng.gen_bool(0.5) {
                cloud[rng.gen_range(0..n)]
            } else {
                [rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2)]
            };
            let k = rng.gen_range(1..=32);
            queries += 1;
            agree += (grid.knn(&q, k).indices == knn_brute(&q, &cloud, k).indices) as usize;
        }
    }
    outcome(
        agree == queries,
        format!("{agree}/{queries} queries with identical neighbor indices"),
    )
}

/// Greedy maximin written from the definition: every step rescans the
/// selected set.
fn fps_oracle(cloud: &[Point3], m: usize, start: usize) -> Vec<usize> {
    let d2 = |a: &Point3, b: &Point3| -> f64 { (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum() };
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in cloud.iter().enumerate() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(p, &cloud[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn fps_vs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut same = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=300);
        let cloud = random_cloud(&mut rng, n);
        let m = rng.gen_range(1..=n.min(48));
        let start = rng.gen_range(0..n);
        same += (farthest_point_sample(&cloud, m, start).unwrap() == fps_oracle(&cloud, m, start)) as usize;
    }
    outcome(same == 100, format!("{same}/100 clouds with identical sample sequences"))
}

fn gradients() -> Outcome {
    let rows = gradient_suite(0, 8).unwrap();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_error))
        .collect();
    let worst_layer = rows
        .iter()
        .filter(|r| r.name != "end_to_end")
        .map(|r| r.max_error)
        .fold(0.0, f64::max);
    let e2e = rows.iter().find(|r| r.name == "end_to_end").unwrap().max_error;
    outcome(
        failed.is_empty(),
        format!(
            "layers and t-patch module max {worst_layer:.2e} (< 1e-4), end-to-end {e2e:.2e} (< 1e-3){}",
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn collapse_trend() -> Outcome {
    let seeds = 20;
    let suite = converging_suite(seeds, 16, 512, 0.01, 4).unwrap();
    let (m, k) = (64, 16);
    let (mut plain, mut jittered) = (0.0, 0.0);
    let mut coverage_ok = 0;
    for (i, seq) in suite.iter().enumerate() {
        let last = seq.frame_count() - 1;
        let base = ExtractParams::new(m, k);
        let sigma = 0.5 * mean_nn_spacing(seq.frame(0)).unwrap();
        let distinct = |p: &ExtractParams| {
            collapse_report(&extract(seq, p, Variant::Forward).unwrap()).frames[last].distinct_queries as f64
        };
        plain += distinct(&base);
        jittered += distinct(&base.jitter(sigma, i as u64));
        let cov = |v| collapse_report(&extract(seq, &base, v).unwrap()).frames[last].coverage_ratio;
        coverage_ok += (cov(Variant::Bidirectional) >= cov(Variant::Forward)) as usize;
    }
    let (plain, jittered) = (plain / seeds as f64, jittered / seeds as f64);
    outcome(
        jittered > plain && coverage_ok == seeds,
        format!(
            "mean distinct final-frame queries {jittered:.2} jittered vs {plain:.2} plain; bidirectional coverage >= forward on {coverage_ok}/{seeds} seeds"
        ),
    )
}

fn correspondence_trend() -> Outcome {
    let sigmas = [0.0, 0.005, 0.01, 0.02];
    let means: Vec<f64> = sigmas
        .iter()
        .map(|&sigma| {
            let mut total = 0.0;
            for seed in 0..10 {
                let clips = generate(&SyntheticSpec {
                    num_classes: 3,
                    clips_per_class: 1,
                    frames: 8,
                    points: 512,
                    noise_sigma: sigma,
                    seed,
                    ..Default::default()
                })
                .unwrap();
                for c in &clips {
                    let acc = correspondence_accuracy(&c.seq, Backend::Grid).unwrap();
                    total += acc.iter().sum::<f64>() / acc.len() as f64 / clips.len() as f64;
                }
            }
            total / 10.0
        })
        .collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = sigmas
        .iter()
        .zip(&means)
        .map(|(s, m)| format!("{s}: {:.1}%", 100.0 * m))
        .collect();
    outcome(monotone, format!("accuracy by sigma {}", shown.join(", ")))
}

struct Toy {
    full: Model<f32>,
    full_top1: f64,
    ablation_top1: f64,
    test: Vec<LabeledClip>,
    full_time: Duration,
    ablation_time: Duration,
}

fn toy_config(smoothing: Option<usize>) -> ModelConfig {
    let mut cfg = ModelConfig::paper_default(3);
    cfg.levels[0].m = 128;
    cfg.levels[1].m = 32;
    cfg.levels[2].m = 32;
    cfg.clip_length = 16;
    cfg.smoothing_kernel = smoothing;
    cfg.init_seed = 1;
    cfg
}

fn train_toy() -> Toy {
    let data = generate(&SyntheticSpec {
        num_classes: 3,
        clips_per_class: 56,
        frames: 16,
        points: 256,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let (train_set, val_set, test) = split_by_class(data, 36, 8);
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 4,
        seed: 1,
        ..Default::default()
    };
    let run = |smoothing| {
        let start = Instant::now();
        let mut model = Model::<f32>::new(toy_config(smoothing)).unwrap();
        let out = train(&mut model, &train_set, &val_set, &tc).unwrap();
        let elapsed = start.elapsed();
        let best = Model::<f32>::from_checkpoint(toy_config(smoothing), &out.best).unwrap();
        let top1 = evaluate(&best, &test, 7).unwrap().report.top1;
        (best, top1, elapsed)
    };
    let (full, full_top1, full_time) = run(None);
    let (_, ablation_top1, ablation_time) = run(Some(1));
    Toy {
        full,
        full_top1,
        ablation_top1,
        test,
        full_time,
        ablation_time,
    }
}

fn toy_classification(toy: &Toy) -> Outcome {
    let gap = toy.full_top1 - toy.ablation_top1;
    outcome(
        toy.full_top1 >= 90.0 && gap >= 2.0 && toy.full_time < Duration::from_secs(30 * 60),
        format!(
            "test top-1 {:.2}% (>= 90), smoothing-disabled {:.2}% (gap {gap:+.2}, >= 2), training {:.0} s (< 1800), ablation training {:.0} s",
            toy.full_top1,
            toy.ablation_top1,
            toy.full_time.as_secs_f64(),
            toy.ablation_time.as_secs_f64()
        ),
    )
}

fn architecture() -> Outcome {
    let cfg = ModelConfig::paper_default(10);
    let levels: Vec<(usize, Vec<usize>, usize)> =
        cfg.levels.iter().map(|l| (l.m, l.mlp.clone(), l.temporal_kernel)).collect();
    let chain_ok = levels[0] == (512, vec![64, 64, 128], 8)
        && levels[1] == (128, vec![128, 128, 256], 4)
        && levels[2].1 == vec![256, 512, 1024]
        && levels.len() == 3
        && cfg.classifier == vec![512, 256]
        && cfg.dropout == 0.4
        && cfg.num_classes == 10;
    let params = Model::<f32>::new(cfg).unwrap().param_count();
    outcome(
        chain_ok && (9_000_000..=12_000_000).contains(&params),
        format!("shape chain {levels:?}, {params} parameters (9M..12M)"),
    )
}

/// Definitional metric oracles: ranks by explicit sorting, AP as the mean
/// of precision at each positive's rank.
fn metric_oracle(videos: &[VideoScores], classes: usize) -> (f64, f64, f64, f64) {
    let order = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        idx
    };
    let topk = |k: usize| {
        videos
            .iter()
            .map(|v| {
                let hit = v
                    .scores
                    .iter()
                    .zip(&v.labels)
                    .filter(|(s, &l)| order(s)[..k.min(classes)].contains(&(l as usize)))
                    .count();
                100.0 * hit as f64 / v.labels.len() as f64
            })
            .sum::<f64>()
            / videos.len() as f64
    };
    let frames: Vec<(&Vec<f64>, usize)> = videos
        .iter()
        .flat_map(|v| v.scores.iter().zip(v.labels.iter().map(|&l| l as usize)))
        .collect();
    let mut recalls = Vec::new();
    let mut aps = Vec::new();
    for c in 0..classes {
        let pos: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].1 == c).collect();
        if pos.is_empty() {
            continue;
        }
        let right = pos.iter().filter(|&&i| order(frames[i].0)[0] == c).count();
        recalls.push(right as f64 / pos.len() as f64);
        let mut ranked: Vec<usize> = (0..frames.len()).collect();
        ranked.sort_by(|&a, &b| frames[b].0[c].partial_cmp(&frames[a].0[c]).unwrap().then(a.cmp(&b)));
        let rank_of = |i: usize| ranked.iter().position(|&r| r == i).unwrap() + 1;
        let ap = pos
            .iter()
            .map(|&i| {
                let r = rank_of(i);
                let above = pos.iter().filter(|&&j| rank_of(j) <= r).count();
                above as f64 / r as f64
            })
            .sum::<f64>()
            / pos.len() as f64;
        aps.push(ap);
    }
    (
        topk(1),
        topk(3),
        100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64,
        aps.iter().sum::<f64>() / aps.len() as f64,
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let classes = rng.gen_range(2..=6);
        let videos: Vec<VideoScores> = (0..rng.gen_range(1..=5))
            .map(|_| {
                let n = rng.gen_range(1..=12);
                VideoScores {
                    // coarse scores so ties are common
                    scores: (0..n)
                        .map(|_| (0..classes).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect())
                        .collect(),
                    labels: (0..n).map(|_| rng.gen_range(0..classes as u32)).collect(),
                }
            })
            .collect();
        let r = metrics(&videos, classes).unwrap();
        let (t1, t3, mr, map) = metric_oracle(&videos, classes);
        for (a, b) in [(r.top1, t1), (r.top3, t3), (r.macro_recall, mr), (r.map, map)] {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-10, format!("50 instances, max deviation {worst:.1e} (<= 1e-10)"))
}

fn saliency(toy: &mut Toy) -> Outcome {
    let start = Instant::now();
    let limb_class = SyntheticSpec::default()
        .motions()
        .iter()
        .position(|&m| m == Motion::OscillateLimb)
        .unwrap() as u32;
    let clips: Vec<&LabeledClip> = toy.test.iter().filter(|c| c.class == limb_class).collect();
    let mut hits = 0;
    for (i, c) in clips.iter().enumerate() {
        let s = gradcam(&mut toy.full, &c.seq, limb_class as usize, eval_seed(7, i)).unwrap();
        let (mut moving, mut nm, mut fixed, mut nf) = (0.0f64, 0usize, 0.0f64, 0usize);
        for frame in &s.scores {
            for (&v, &limb) in frame.iter().zip(&c.limb) {
                if limb {
                    moving += v as f64;
                    nm += 1;
                } else {
                    fixed += v as f64;
                    nf += 1;
                }
            }
        }
        hits += (moving / nm as f64 > fixed / nf as f64) as usize;
    }
    let frac = hits as f64 / clips.len() as f64;
    let elapsed = start.elapsed();
    outcome(
        frac >= 0.8 && elapsed < Duration::from_secs(300),
        format!(
            "moving points outscore static points on {hits}/{} limb clips ({:.0}%, >= 80%) in {:.1} s",
            clips.len(),
            100.0 * frac,
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let once = || {
        let spec = SyntheticSpec {
            num_classes: 3,
            clips_per_class: 2,
            frames: 6,
            points: 48,
            seed: 10,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let mut bytes: Vec<u8> = data.iter().flat_map(|c| c.seq.encode()).collect();
        let mut cfg = tiny_config(3, 5);
        cfg.clip_length = 6;
        cfg.dropout = 0.3;
        let params = cfg
            .extraction
            .params(&cfg.levels[0], &data[0].seq, 3)
            .unwrap();
        let tps = extract(&data[0].seq, &params, Variant::Bidirectional).unwrap();
        bytes.extend(collapse_report(&tps).to_csv().into_bytes());
        let mut model = Model::<f32>::new(cfg.clone()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        };
        let out = train(&mut model, &data[..3], &data[3..], &tc).unwrap();
        bytes.extend(out.best.encode());
        bytes.extend(log_csv(&out.logs).into_bytes());
        let mut best = Model::<f32>::from_checkpoint(cfg, &out.best).unwrap();
        bytes.extend(evaluate(&best, &data, 2).unwrap().report.to_csv().into_bytes());
        bytes.extend(gradcam(&mut best, &data[0].seq, 1, 9).unwrap().to_le_bytes());
        let g: Vec<u64> = gradient_suite(3, 4).unwrap().iter().map(|r| r.max_error.to_bits()).collect();
        bytes.extend(g.iter().flat_map(|b| b.to_le_bytes()));
        bytes
    };
    let (a, b) = (once(), once());
    outcome(
        a == b,
        format!("two runs of generate/extract/train/eval/saliency/gradcheck: {} bytes, identical = {}", a.len(), a == b),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {n:>2} {name:<28} {} {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += !o.pass as usize;
    };
    report(1, "knn grid vs brute force", &mut knn_grid_vs_brute);
    report(2, "fps vs maximin oracle", &mut fps_vs_oracle);
    report(3, "gradient verification", &mut gradients);
    report(4, "collapse mitigation", &mut collapse_trend);
    report(5, "correspondence degradation", &mut correspondence_trend);
    let mut toy = train_toy();
    report(6, "toy classification", &mut || toy_classification(&toy));
    report(7, "architecture fidelity", &mut architecture);
    report(8, "metric oracles", &mut metric_oracles);
    report(9, "saliency sanity", &mut || saliency(&mut toy));
    report(10, "determinism", &mut determinism);
    println!("{} of 10 criteria passed", 10 - failed);
}
