use proptest::prelude::*;
use tpatch_core::pcseq::{clip_sequence, PointCloudSequence};
use tpatch_core::{Error, Point3};

fn point() -> impl Strategy<Value = Point3> {
    prop::array::uniform3(-1e3f32..1e3)
}

/// Sequences with varying frame sizes, optional labels and optional
/// correspondence maps.
fn sequence() -> impl Strategy<Value = PointCloudSequence> {
    prop::collection::vec(prop::collection::vec(point(), 1..12), 1..6)
        .prop_flat_map(|frames| {
            let sizes: Vec<usize> = frames.iter().map(Vec::len).collect();
            let maps: Vec<BoxedStrategy<Vec<u32>>> = sizes
                .windows(2)
                .map(|w| prop::collection::vec(0..w[1] as u32, w[0]).boxed())
                .collect();
            let t = frames.len();
            (
                Just(frames),
                prop::option::of(maps),
                prop::option::of(prop::collection::vec(0u32..5, t)),
            )
        })
        .prop_map(|(frames, maps, labels)| {
            let mut seq = PointCloudSequence::new(frames).unwrap();
            if let Some(m) = maps {
                seq = seq.with_correspondence(m).unwrap();
            }
            if let Some(l) = labels {
                seq = seq.with_labels(l).unwrap();
            }
            seq
        })
}

proptest! {
    #[test]
    fn encode_decode_round_trip(seq in sequence()) {
        let bytes = seq.encode();
        let back = PointCloudSequence::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &seq);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn every_strict_prefix_is_rejected(seq in sequence(), frac in 0.0f64..1.0) {
        let bytes = seq.encode();
        let cut = ((bytes.len() as f64) * frac) as usize;
        prop_assert!(PointCloudSequence::decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn windows_tile_the_sequence(len in 2usize..6, stride in 1usize..5, t in 1usize..14) {
        let frames: Vec<Vec<Point3>> = (0..t).map(|i| vec![[i as f32, 0.0, 0.0]]).collect();
        let seq = PointCloudSequence::new(frames).unwrap();
        let clips = clip_sequence(&seq, "s", len, stride).unwrap();
        let expected = if t < len { 0 } else { (t - len) / stride + 1 };
        prop_assert_eq!(clips.len(), expected);
        for c in &clips {
            prop_assert_eq!(c.seq.frame_count(), len);
            for j in 0..len {
                prop_assert_eq!(c.seq.frame(j)[0][0], (c.start + j) as f32);
            }
        }
    }
}

#[test]
fn trailing_garbage_is_rejected() {
    let seq = PointCloudSequence::new(vec![vec![[1.0, 2.0, 3.0]]]).unwrap();
    let mut bytes = seq.encode();
    bytes.push(0);
    assert!(matches!(PointCloudSequence::decode(&bytes), Err(Error::Format(_))));
}
