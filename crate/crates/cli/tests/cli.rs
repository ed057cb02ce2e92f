use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let base = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.conf")).unwrap();
    let base = base.replace("data.dir = data", &format!("data.dir = {}", dir.join("data").display()));
    let path = dir.join(format!("tiny{}.conf", extra.len()));
    fs::write(&path, format!("{base}\n{extra}\n")).unwrap();
    path
}

fn tpatch(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpatch"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path, out: &Path) -> String {
    let o = tpatch(args, config, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn full_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let msg = ok(&["gen"], &cfg, &data);
    assert!(msg.contains("3 train, 3 val, 3 test"), "{msg}");
    assert!(data.join("train/manifest.txt").exists());

    ok(&["extract"], &cfg, &run);
    assert_eq!(
        first_line(&run.join("collapse.csv")),
        "frame,distinct_queries,coverage_ratio,collapse_pairs"
    );
    assert_eq!(fs::read_to_string(run.join("collapse.csv")).unwrap().lines().count(), 9);
    assert_eq!(fs::read_to_string(run.join("tpatches.csv")).unwrap().lines().count(), 1 + 16 * 8);
    assert_eq!(fs::read_to_string(run.join("correspondence.csv")).unwrap().lines().count(), 8);

    ok(&["train"], &cfg, &run);
    assert!(run.join("best.ckpt").exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,split,top1,top3,macro_recall,mAP,L_frame,L_seq");
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);

    let msg = ok(&["eval"], &cfg, &run);
    assert!(msg.starts_with("top1 "), "{msg}");
    assert!(run.join("eval.csv").exists());

    ok(&["saliency"], &cfg, &run);
    let seq = tpatch_core::pcseq::load_sequence(run.join("saliency.pcsq")).unwrap();
    let scores = fs::read(run.join("saliency.f32")).unwrap();
    assert_eq!(scores.len(), 4 * 8 * 64);
    assert_eq!(seq.frame_count(), 8);
    assert!(scores
        .chunks_exact(4)
        .all(|b| f32::from_le_bytes(b.try_into().unwrap()) >= 0.0));
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    ok(&["gen"], &cfg, &tmp.path().join("data"));
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| tmp.path().join(n)).collect();
    for r in &runs {
        ok(&["train"], &cfg, r);
        ok(&["eval"], &cfg, r);
        ok(&["saliency"], &cfg, r);
    }
    for f in ["best.ckpt", "metrics.csv", "eval.csv", "saliency.f32", "resolved_config.txt"] {
        assert_eq!(
            fs::read(runs[0].join(f)).unwrap(),
            fs::read(runs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }

    let data2 = tmp.path().join("data2");
    ok(&["gen"], &cfg, &data2);
    let a = fs::read(tmp.path().join("data/test/manifest.txt")).unwrap();
    assert_eq!(a, fs::read(data2.join("test/manifest.txt")).unwrap());
    for entry in fs::read_dir(data2.join("train")).unwrap() {
        let p = entry.unwrap().path();
        let q = tmp.path().join("data/train").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(q).unwrap());
    }
}

#[test]
fn gradcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let msg = ok(&["gradcheck"], &cfg, tmp.path());
    assert!(msg.contains("end_to_end"), "{msg}");
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
    assert!(csv.contains("tpatch_module"));
}

#[test]
fn bench_reports_stages() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    ok(&["bench"], &cfg, tmp.path());
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    let stages: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["stage", "extraction", "features", "classifier", "total"]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_tpatch"))
        .args(["gradcheck", "--seed", "42", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = fs::read_to_string(tmp.path().join("resolved_config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 42"), "{resolved}");
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");

    let bad = tiny_config(tmp.path(), "model.nonsense = 1");
    let o = tpatch(&["gen"], &bad, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let cfg = tiny_config(tmp.path(), "");
    assert_eq!(tpatch(&["eval"], &cfg, &out).status.code(), Some(4));

    let junk = tmp.path().join("junk.pcsq");
    fs::write(&junk, b"not a point cloud").unwrap();
    let with_input = tiny_config(tmp.path(), &format!("input = {}", junk.display()));
    assert_eq!(tpatch(&["extract"], &with_input, &out).status.code(), Some(5));

    let missing = tmp.path().join("missing.conf");
    assert_eq!(tpatch(&["gen"], &missing, &out).status.code(), Some(4));
}
