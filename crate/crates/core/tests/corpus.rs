//! The checked-in fuzz seeds decode and survive a render/encode round trip.

use std::fs;
use std::path::PathBuf;

use tpatch_core::config::RunConfig;
use tpatch_core::dataeval::Manifest;
use tpatch_core::nnkit::Checkpoint;
use tpatch_core::pcseq::PointCloudSequence;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|f| fs::read(f).unwrap()).collect()
}

#[test]
fn pcsq_seeds() {
    for s in seeds("pcsq_decode") {
        let seq = PointCloudSequence::decode(&s).unwrap();
        assert_eq!(seq.encode(), s);
    }
}

#[test]
fn checkpoint_seeds() {
    for s in seeds("checkpoint_decode") {
        assert_eq!(Checkpoint::decode(&s).unwrap().encode(), s);
    }
}

#[test]
fn config_seeds() {
    for s in seeds("config_parse") {
        let cfg = RunConfig::parse(std::str::from_utf8(&s).unwrap()).unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

#[test]
fn manifest_seeds() {
    for s in seeds("manifest_parse") {
        let m = Manifest::parse(std::str::from_utf8(&s).unwrap()).unwrap();
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }
}

#[test]
fn truncated_seeds_are_rejected() {
    for s in seeds("pcsq_decode") {
        for cut in [0, 3, s.len() / 2, s.len() - 1] {
            assert!(PointCloudSequence::decode(&s[..cut]).is_err());
        }
    }
    for s in seeds("checkpoint_decode") {
        for cut in [0, 3, s.len() / 2, s.len() - 1] {
            assert!(Checkpoint::decode(&s[..cut]).is_err());
        }
    }
}
