//! The checked-in fuzz seeds must stay valid inputs for their decoders.

use std::path::PathBuf;

use gaplab::samplers::TrajectoryBatch;
use gaplab_cli::config::ExperimentConfig;
use gaplab_cli::output::RunManifest;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn config_seeds_parse_and_validate() {
    for s in seeds("config_parse") {
        let config = ExperimentConfig::from_toml_str(std::str::from_utf8(&s).unwrap()).unwrap();
        config.validate().unwrap();
    }
}

#[test]
fn batch_seeds_decode() {
    for s in seeds("batch_binary") {
        let b = TrajectoryBatch::from_binary(&s).unwrap();
        assert_eq!(b.to_binary(), s);
    }
    for s in seeds("batch_csv") {
        let split = s.iter().position(|&b| b == b'\n').unwrap();
        TrajectoryBatch::from_csv(&s[split + 1..], std::str::from_utf8(&s[..split]).unwrap()).unwrap();
    }
}

#[test]
fn manifest_seeds_parse() {
    for s in seeds("manifest_json") {
        let m = RunManifest::from_json(std::str::from_utf8(&s).unwrap()).unwrap();
        assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
    }
}
