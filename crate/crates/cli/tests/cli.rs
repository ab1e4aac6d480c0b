use std::path::{Path, PathBuf};
use std::process::Command;

use gaplab_cli::cli::main_with;
use gaplab_cli::exit;
use gaplab_cli::output::{RunManifest, GAP_HEADER, MARGINAL_HEADER, TRAINING_HEADER};

fn gaplab(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with(std::iter::once("gaplab").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest(dir: &Path, experiment: &str) -> PathBuf {
    dir.join(format!("{experiment}.manifest.json"))
}

const W2_SMALL: &str = "experiment = \"w2_bound\"\neta = [0.5]\nT = [1.0, 2.0]\nn_samples = 2000\nn_steps = 200\nseed = 3\n";

#[test]
fn passing_run_exits_zero_and_lists_existing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let out = tmp.path().join("out");
    let (code, stdout, _) = gaplab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, exit::SUCCESS, "{stdout}");
    let m = RunManifest::from_json(&std::fs::read_to_string(manifest(&out, "w2_bound")).unwrap()).unwrap();
    assert!(!m.outputs.is_empty());
    for entry in &m.outputs {
        assert!(out.join(&entry.path).exists(), "{} missing", entry.path);
    }
    assert!(m.checks.iter().all(|c| c.pass));
    let csv = std::fs::read_to_string(out.join("w2_bound.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let (code, _, _) = gaplab(&["run", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(code, exit::SUCCESS);
    }
    assert_eq!(
        std::fs::read(a.join("w2_bound.csv")).unwrap(),
        std::fs::read(b.join("w2_bound.csv")).unwrap()
    );
    let ma = RunManifest::from_json(&std::fs::read_to_string(manifest(&a, "w2_bound")).unwrap()).unwrap();
    let mb = RunManifest::from_json(&std::fs::read_to_string(manifest(&b, "w2_bound")).unwrap()).unwrap();
    assert_eq!(ma.config_hash, mb.config_hash);
}

#[test]
fn flags_override_config_and_headers_are_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gap");
    let (code, stdout, stderr) = gaplab(&[
        "run",
        "--experiment",
        "ve_gap",
        "--eta",
        "1.0",
        "--T",
        "10",
        "--n-samples",
        "2000",
        "--n-steps",
        "100",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(matches!(code, 0 | 1), "{stderr}");
    let csv = std::fs::read_to_string(out.join("ve_gap.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), GAP_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "ve");
    assert_eq!(row[12].parse::<f64>().unwrap(), 0.05);
    if code == exit::BOUND_VIOLATION {
        assert!(stdout.contains("bound violation: eta=1.0,T=10.0"), "{stdout}");
    }
}

#[test]
fn marginal_check_default_rows_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let (code, _, stderr) = gaplab(&[
        "run",
        "--experiment",
        "marginal_check",
        "--eta",
        "0,1",
        "--T",
        "3",
        "--n-samples",
        "20000",
        "--n-steps",
        "400",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, exit::SUCCESS, "{stderr}");
    let csv = std::fs::read_to_string(out.join("marginal_check.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), MARGINAL_HEADER.join(","));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_errors_exit_two_with_field_names() {
    let tmp = tempfile::tempdir().unwrap();
    let missing_seed = write_config(tmp.path(), "a.toml", "experiment = \"ve_gap\"\neta = [1.0]\nT = [10.0]\n");
    let (code, _, err) = gaplab(&["run", "--config", &missing_seed]);
    assert_eq!(code, exit::CONFIG_ERROR);
    assert!(err.contains("seed"), "{err}");

    let bad = write_config(
        tmp.path(),
        "b.toml",
        "experiment = \"ve_gap\"\neta = []\nT = [10.0]\nn_samples = 10\nseed = 1\n",
    );
    let (code, _, err) = gaplab(&["run", "--config", &bad]);
    assert_eq!(code, exit::CONFIG_ERROR);
    assert!(err.contains("eta") && err.contains("n_samples"), "{err}");

    let unknown = write_config(tmp.path(), "c.toml", "experiment = \"ve_gap\"\nseed = 1\ncolour = 3\n");
    let (code, _, _) = gaplab(&["run", "--config", &unknown]);
    assert_eq!(code, exit::CONFIG_ERROR);

    let (code, _, _) = gaplab(&["run", "--config", "/nonexistent/gaplab.toml"]);
    assert_eq!(code, exit::CONFIG_ERROR);
    let (code, _, _) = gaplab(&["run", "--model", "ve"]);
    assert_eq!(code, exit::CONFIG_ERROR);
    let (code, _, _) = gaplab(&["frobnicate"]);
    assert_eq!(code, exit::CONFIG_ERROR);
}

#[test]
fn invalid_thread_cap_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let status = Command::new(env!("CARGO_BIN_EXE_gaplab"))
        .args(["run", "--config", &cfg, "--out"])
        .arg(tmp.path().join("o"))
        .env("GAPLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(exit::CONFIG_ERROR));
    assert!(String::from_utf8_lossy(&status.stderr).contains("GAPLAB_THREADS"));
}

#[test]
fn sweep_single_manifest_is_identity_pivot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let out = tmp.path().join("run");
    assert_eq!(gaplab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let sweep_dir = tmp.path().join("sweep");
    let m = manifest(&out, "w2_bound");
    let (code, stdout, stderr) = gaplab(&["sweep", m.to_str().unwrap(), "--out", sweep_dir.to_str().unwrap()]);
    assert_eq!(code, exit::SUCCESS, "{stderr}");
    assert!(stdout.contains("bound checks passed: 2/2"), "{stdout}");

    let pivot = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let original = std::fs::read_to_string(out.join("w2_bound.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(original.as_bytes());
    let l2 = rd.headers().unwrap().iter().position(|h| h == "coupled_l2").unwrap();
    let expected: Vec<String> = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            format!("{},{}", &r[1], &r[l2])
        })
        .collect();
    let mut lines = pivot.lines();
    assert_eq!(lines.next().unwrap(), "T,eta=0.5");
    assert_eq!(lines.map(String::from).collect::<Vec<_>>(), expected);
    assert!(sweep_dir.join("summary.txt").exists());
}

#[test]
fn sweep_rejects_empty_and_mixed_input() {
    let (code, _, _) = gaplab(&["sweep"]);
    assert_eq!(code, exit::CONFIG_ERROR);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let a = tmp.path().join("a");
    assert_eq!(gaplab(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).0, 0);
    let b = tmp.path().join("b");
    let (code, _, _) = gaplab(&[
        "run", "--experiment", "gddim_check", "--eta", "0", "--T", "1", "--n-samples", "1000", "--n-steps", "50",
        "--seed", "2", "--out", b.to_str().unwrap(),
    ]);
    assert!(matches!(code, 0 | 1));
    let (code, _, err) = gaplab(&[
        "sweep",
        manifest(&a, "w2_bound").to_str().unwrap(),
        manifest(&b, "gddim_check").to_str().unwrap(),
    ]);
    assert_eq!(code, exit::RUNTIME_ERROR);
    assert!(err.contains("mixed"), "{err}");
}

#[test]
fn training_sweep_reports_monotone_flag_at_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "ddpo.toml",
        "experiment = \"ddpo_train\"\nmodel = \"ve\"\neta = [1.2]\nT = [10.0]\nseed = 4\n\n[training]\niterations = 6\nbatch_size = 256\nn_steps = 20\n",
    );
    let out = tmp.path().join("t");
    let (code, _, stderr) = gaplab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(matches!(code, 0 | 1), "{stderr}");
    let csv = std::fs::read_to_string(out.join("ddpo_train_eta1.2_T10.0.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), TRAINING_HEADER.join(","));
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0.0")));

    let (_, stdout, _) = gaplab(&[
        "sweep",
        manifest(&out, "ddpo_train").to_str().unwrap(),
        "--checkpoints",
        "0,2,6",
    ]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next().unwrap(), "iter,\"eta=1.2,T=10.0\"");
    let keys: Vec<&str> = lines.by_ref().take(3).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["0", "2", "6"]);
    assert!(stdout.contains("gap monotone decreasing at [0, 2, 6] for eta=1.2,T=10.0:"), "{stdout}");
}

#[test]
fn report_detects_modified_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let out = tmp.path().join("r");
    assert_eq!(gaplab(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--format", "json"]).0, 0);
    let m = manifest(&out, "w2_bound");
    let (code, stdout, _) = gaplab(&["report", m.to_str().unwrap()]);
    assert_eq!(code, exit::SUCCESS);
    assert!(stdout.contains("output w2_bound.json: ok"), "{stdout}");

    std::fs::write(out.join("w2_bound.json"), "[]").unwrap();
    let (code, stdout, _) = gaplab(&["report", m.to_str().unwrap()]);
    assert_eq!(code, exit::RUNTIME_ERROR);
    assert!(stdout.contains("MODIFIED"));
}

#[test]
fn thread_cap_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "w2.toml", W2_SMALL);
    let mut bodies = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_gaplab"))
            .args(["run", "--config", &cfg, "--out"])
            .arg(&out)
            .env("GAPLAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(exit::SUCCESS));
        bodies.push(std::fs::read(out.join("w2_bound.csv")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}
