#![no_main]
use gaplab::samplers::TrajectoryBatch;
use libfuzzer_sys::fuzz_target;

// First line is the metadata sidecar, the rest is the CSV body.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let body = data.get(split + 1..).unwrap_or_default();
    if let Ok(batch) = TrajectoryBatch::from_csv(body, sidecar) {
        let _ = batch.moments();
    }
});
