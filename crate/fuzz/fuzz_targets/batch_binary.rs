#![no_main]
use gaplab::samplers::TrajectoryBatch;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = TrajectoryBatch::from_binary(data) {
        let again = TrajectoryBatch::from_binary(&batch.to_binary()).expect("re-encoded batch decodes");
        assert_eq!(again.terminal().len(), batch.terminal().len());
    }
});
