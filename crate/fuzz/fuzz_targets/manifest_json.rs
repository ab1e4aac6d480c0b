#![no_main]
use gaplab_cli::output::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(m) = RunManifest::from_json(s) {
            let _ = RunManifest::from_json(&m.to_json()).expect("re-encoded manifest parses");
        }
    }
});
