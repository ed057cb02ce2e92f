#![no_main]

use libfuzzer_sys::fuzz_target;
use tpatch_core::pcseq::PointCloudSequence;

fuzz_target!(|data: &[u8]| {
    if let Ok(seq) = PointCloudSequence::decode(data) {
        let again = PointCloudSequence::decode(&seq.encode()).expect("re-encoded sequence decodes");
        assert_eq!(seq.encode(), again.encode());
    }
});
