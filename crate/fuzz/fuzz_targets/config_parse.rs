#![no_main]
use gaplab_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(config) = ExperimentConfig::from_toml_str(s) {
            let _ = config.validate();
            let _ = config.canonical_json();
        }
    }
});
