//! Aggregation of finished runs: pivot tables across manifests and
//! plain-text summaries of their checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentKind;
use crate::output::{format_float, sha256_hex, RunManifest};
use crate::RunError;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let manifest = RunManifest::from_json(&text).map_err(|e| RunError::Report(format!("{}: {e}", path.display())))?;
    Ok(LoadedManifest {
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        manifest,
    })
}

type Row = BTreeMap<String, String>;

fn read_rows(path: &Path) -> Result<Vec<Row>, RunError> {
    let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
    let bad = |m: String| RunError::Report(format!("{}: {m}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let values: Vec<BTreeMap<String, serde_json::Value>> =
            serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        Ok(values
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(k, v)| {
                        let s = match v {
                            serde_json::Value::Null => String::new(),
                            serde_json::Value::String(s) => s,
                            serde_json::Value::Number(n) => match n.as_f64() {
                                Some(f) if n.is_f64() => format_float(f),
                                _ => n.to_string(),
                            },
                            other => other.to_string(),
                        };
                        (k, s)
                    })
                    .collect()
            })
            .collect())
    } else {
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        reader
            .records()
            .map(|r| {
                let r = r.map_err(|e| bad(e.to_string()))?;
                Ok(header.iter().map(String::from).zip(r.iter().map(String::from)).collect())
            })
            .collect()
    }
}

fn is_data(path: &str) -> bool {
    path.ends_with(".csv") || path.ends_with(".json")
}

/// `(row key column, value column)` of the pivot for an experiment kind.
pub fn pivot_columns(kind: ExperimentKind) -> (&'static str, &'static str) {
    match kind {
        ExperimentKind::VeGap | ExperimentKind::VpGap | ExperimentKind::MixtureGap => ("T", "delta_mc"),
        ExperimentKind::W2Bound => ("T", "coupled_l2"),
        ExperimentKind::MarginalCheck | ExperimentKind::GddimCheck => ("n", "var"),
        ExperimentKind::DdpoTrain | ExperimentKind::GrpoTrain => ("iter", "gap"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub kind: ExperimentKind,
    pub row_key: &'static str,
    pub value: &'static str,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<String>>)>,
    pub summary: String,
}

impl SweepTable {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec![self.row_key.to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (key, values) in &self.rows {
            let mut rec = vec![key.clone()];
            rec.extend(values.iter().map(|v| v.clone().unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// Whether a column never increases down the rows that have values.
    pub fn non_increasing(&self, column: usize) -> bool {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|(_, v)| v[column].as_ref().and_then(|s| s.parse().ok()))
            .collect();
        vals.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Pivots homogeneous runs into rows keyed by `T`, `iter` or `n` and one
/// column per parameter cell. For training runs `checkpoints` restricts the
/// rows and the summary reports whether the gap is monotone decreasing.
pub fn sweep_table(manifests: &[LoadedManifest], checkpoints: Option<&[u64]>) -> Result<SweepTable, RunError> {
    let first = manifests
        .first()
        .ok_or_else(|| RunError::Report("no manifests given".into()))?;
    let kind = first.manifest.experiment;
    if let Some(other) = manifests.iter().find(|m| m.manifest.experiment != kind) {
        return Err(RunError::Report(format!(
            "cannot pivot mixed experiments {kind} and {}",
            other.manifest.experiment
        )));
    }
    let (row_key, value) = pivot_columns(kind);
    let mut columns: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, usize), String> = BTreeMap::new();
    let mut keys: Vec<(f64, String)> = Vec::new();
    let column_index = |name: String, columns: &mut Vec<String>| match columns.iter().position(|c| *c == name) {
        Some(i) => i,
        None => {
            columns.push(name);
            columns.len() - 1
        }
    };
    for loaded in manifests {
        for entry in loaded.manifest.outputs.iter().filter(|e| is_data(&e.path)) {
            let rows = read_rows(&loaded.dir.join(&entry.path))?;
            for row in rows {
                let key = row.get(row_key).cloned().unwrap_or_default();
                if kind.is_training() {
                    if let Some(cp) = checkpoints {
                        if !key.parse::<u64>().is_ok_and(|k| cp.contains(&k)) {
                            continue;
                        }
                    }
                }
                let column = if kind.is_training() {
                    entry.cell.clone().unwrap_or_else(|| entry.path.clone())
                } else {
                    format!("eta={}", row.get("eta").cloned().unwrap_or_default())
                };
                let c = column_index(column, &mut columns);
                if !keys.iter().any(|(_, k)| *k == key) {
                    keys.push((key.parse().unwrap_or(f64::NAN), key.clone()));
                }
                cells.entry((key, c)).or_insert_with(|| row.get(value).cloned().unwrap_or_default());
            }
        }
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rows = keys
        .into_iter()
        .map(|(_, key)| {
            let values = (0..columns.len()).map(|c| cells.get(&(key.clone(), c)).cloned()).collect();
            (key, values)
        })
        .collect();
    let mut table = SweepTable {
        kind,
        row_key,
        value,
        columns,
        rows,
        summary: String::new(),
    };
    table.summary = summarize(manifests, &table, checkpoints);
    Ok(table)
}

fn summarize(manifests: &[LoadedManifest], table: &SweepTable, checkpoints: Option<&[u64]>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {} ({} run(s))", table.kind, manifests.len());
    let total: usize = manifests.iter().map(|m| m.manifest.checks.len()).sum();
    let passed: usize = manifests.iter().map(|m| m.manifest.checks.iter().filter(|c| c.pass).count()).sum();
    let _ = writeln!(s, "bound checks passed: {passed}/{total}");
    for m in manifests {
        for c in m.manifest.failed_checks() {
            let _ = writeln!(
                s,
                "  FAIL {} {}: value {} vs limit {}",
                c.cell,
                c.name,
                format_float(c.value),
                format_float(c.limit)
            );
        }
    }
    if table.kind.is_training() {
        let at = match checkpoints {
            Some(cp) => format!("{cp:?}"),
            None => "all iterations".into(),
        };
        for (i, col) in table.columns.iter().enumerate() {
            let flag = if table.non_increasing(i) { "yes" } else { "no" };
            let _ = writeln!(s, "gap monotone decreasing at {at} for {col}: {flag}");
        }
    }
    s
}

/// Human-readable account of one run, including output integrity.
pub fn report(loaded: &LoadedManifest) -> (String, bool) {
    let m = &loaded.manifest;
    let mut s = String::new();
    let mut intact = true;
    let _ = writeln!(s, "experiment: {} (version {})", m.experiment, m.version);
    let _ = writeln!(s, "config hash: {}", m.config_hash);
    let _ = writeln!(s, "status: {:?}", m.status);
    for out in &m.outputs {
        let path = loaded.dir.join(&out.path);
        let state = match std::fs::read(&path) {
            Ok(bytes) if sha256_hex(&bytes) == out.sha256 => "ok",
            Ok(_) => {
                intact = false;
                "MODIFIED"
            }
            Err(_) => {
                intact = false;
                "MISSING"
            }
        };
        let _ = writeln!(s, "output {}: {state}", out.path);
    }
    for c in &m.checks {
        let _ = writeln!(
            s,
            "{} {} {}: value {} limit {}",
            if c.pass { "pass" } else { "FAIL" },
            c.cell,
            c.name,
            format_float(c.value),
            format_float(c.limit)
        );
    }
    (s, intact)
}
