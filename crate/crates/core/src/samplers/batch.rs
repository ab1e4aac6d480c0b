use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use crate::error::{Error, Result};
use crate::stats;

const MAGIC: &[u8; 4] = b"GLTB";
const VERSION: u16 = 1;
const FLAG_PATHS: u16 = 1;
pub const CSV_HEADER: [&str; 3] = ["trajectory", "dimension", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Sde,
    OdeRk4,
    OdeEuler,
    Gddim,
}

/// Provenance of a batch: enough to regenerate it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub model: String,
    pub sampler: SamplerKind,
    pub eta: f64,
    pub seed: u64,
    pub grid: TimeGrid,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: BatchMeta,
    n: usize,
    dim: usize,
}

/// Seeded ensemble of sample paths. Terminal samples are stored row-major
/// (`n x dim`); full paths, when kept, as `n x (steps + 1) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    meta: BatchMeta,
    n: usize,
    dim: usize,
    terminal: Vec<f64>,
    paths: Option<Vec<f64>>,
}

impl TrajectoryBatch {
    pub fn new(
        meta: BatchMeta,
        n: usize,
        dim: usize,
        terminal: Vec<f64>,
        paths: Option<Vec<f64>>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("trajectory batch"));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("batch dimension must be positive".into()));
        }
        let expected = n
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidArgument("batch size overflows".into()))?;
        if terminal.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: terminal.len(),
            });
        }
        if let Some(p) = &paths {
            let per = (meta.grid.n_steps() + 1) * dim;
            let expected = n
                .checked_mul(per)
                .ok_or_else(|| Error::InvalidArgument("path size overflows".into()))?;
            if p.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: p.len(),
                });
            }
        }
        Ok(Self {
            meta,
            n,
            dim,
            terminal,
            paths,
        })
    }

    pub fn meta(&self) -> &BatchMeta {
        &self.meta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    /// Terminal state of trajectory `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.terminal[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.terminal.chunks_exact(self.dim)
    }

    /// Terminal values of coordinate `j` across trajectories.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples().map(|s| s[j]).collect()
    }

    pub fn has_paths(&self) -> bool {
        self.paths.is_some()
    }

    /// Full path of trajectory `i` as `(steps + 1) x dim` row-major.
    pub fn path(&self, i: usize) -> Option<&[f64]> {
        let per = (self.meta.grid.n_steps() + 1) * self.dim;
        self.paths.as_ref().map(|p| &p[i * per..(i + 1) * per])
    }

    /// State of trajectory `i` at grid node `k`.
    pub fn state(&self, i: usize, k: usize) -> Option<&[f64]> {
        self.path(i).map(|p| &p[k * self.dim..(k + 1) * self.dim])
    }

    /// Per-coordinate sample mean and unbiased variance of the terminal samples.
    pub fn moments(&self) -> Vec<(f64, f64)> {
        (0..self.dim).map(|j| stats::mean_var(&self.column(j))).collect()
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string(&Sidecar {
            meta: self.meta.clone(),
            n: self.n,
            dim: self.dim,
        })
        .expect("metadata serializes")
    }

    /// Flat little-endian layout:
    /// `"GLTB" | u16 version | u16 flags | u32 meta_len | meta JSON | u64 n | u64 dim | u64 nodes | f64 terminal[n*dim] | f64 paths[n*nodes*dim]?`
    pub fn to_binary(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let floats = self.terminal.len() + self.paths.as_ref().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(36 + meta.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.paths.is_some() { FLAG_PATHS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in [self.n, self.dim, self.meta.grid.n_steps() + 1] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.terminal.iter().chain(self.paths.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let flags = u16::from_le_bytes(r.array()?);
        if flags & !FLAG_PATHS != 0 {
            return Err(Error::Decode(format!("unknown flags {flags:#x}")));
        }
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta: BatchMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Decode(format!("metadata: {e}")))?;
        let n = r.u64_usize()?;
        let dim = r.u64_usize()?;
        let nodes = r.u64_usize()?;
        if nodes != meta.grid.n_steps() + 1 {
            return Err(Error::Decode(format!(
                "header has {nodes} nodes, metadata grid has {}",
                meta.grid.n_steps() + 1
            )));
        }
        let terminal_len = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Decode("size overflow".into()))?;
        let terminal = r.floats(terminal_len)?;
        let paths = if flags & FLAG_PATHS != 0 {
            let len = terminal_len
                .checked_mul(nodes)
                .ok_or_else(|| Error::Decode("size overflow".into()))?;
            Some(r.floats(len)?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Self::new(meta, n, dim, terminal, paths).map_err(|e| Error::Decode(e.to_string()))
    }

    /// Terminal samples as `trajectory,dimension,value` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::with_capacity(self.terminal.len() * 24));
        w.write_record(CSV_HEADER).expect("in-memory write");
        for (i, s) in self.samples().enumerate() {
            for (j, v) in s.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), v.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    /// Decodes terminal samples from CSV plus the JSON sidecar written by
    /// [`TrajectoryBatch::meta_json`]. Rows must appear in storage order.
    pub fn from_csv(data: &[u8], sidecar: &str) -> Result<Self> {
        let side: Sidecar =
            serde_json::from_str(sidecar).map_err(|e| Error::Decode(format!("sidecar: {e}")))?;
        if side.n == 0 || side.dim == 0 {
            return Err(Error::Decode("sidecar declares an empty batch".into()));
        }
        let expected = side
            .n
            .checked_mul(side.dim)
            .ok_or_else(|| Error::Decode("size overflow".into()))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(data);
        let header = rdr.headers().map_err(|e| Error::Decode(e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Decode(format!("unexpected header {header:?}")));
        }
        let mut terminal = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Decode(e.to_string()))?;
            if row >= expected {
                return Err(Error::Decode(format!("more than {expected} rows")));
            }
            if rec.len() != 3 {
                return Err(Error::Decode(format!("row {row}: expected 3 fields")));
            }
            let parse_idx = |k: usize| {
                rec[k]
                    .parse::<usize>()
                    .map_err(|e| Error::Decode(format!("row {row}: {e}")))
            };
            let (i, j) = (parse_idx(0)?, parse_idx(1)?);
            if i != row / side.dim || j != row % side.dim {
                return Err(Error::Decode(format!("row {row}: out of order index ({i}, {j})")));
            }
            let v: f64 = rec[2]
                .parse()
                .map_err(|e| Error::Decode(format!("row {row}: {e}")))?;
            if !v.is_finite() {
                return Err(Error::Decode(format!("row {row}: non-finite value")));
            }
            terminal.push(v);
        }
        if terminal.len() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} rows, found {}",
                terminal.len()
            )));
        }
        Self::new(side.meta, side.n, side.dim, terminal, None)
            .map_err(|e| Error::Decode(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Decode("unexpected end of input".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64_usize(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?))
            .map_err(|_| Error::Decode("size does not fit in memory".into()))
    }

    /// Reads `count` finite floats; the length is checked against the
    /// remaining input before anything is allocated.
    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Decode("size overflow".into()))?;
        let raw = self.take(len)?;
        raw.chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Decode("non-finite value".into()))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(steps: usize) -> BatchMeta {
        BatchMeta {
            model: "ve".into(),
            sampler: SamplerKind::Sde,
            eta: 1.0,
            seed: 7,
            grid: TimeGrid::uniform(1.0, steps).unwrap(),
        }
    }

    fn batch(paths: bool) -> TrajectoryBatch {
        let terminal = vec![0.5, -1.25, 3.0, 1e-300, -0.0, 2.0];
        let paths = paths.then(|| (0..3 * 3 * 2).map(|v| v as f64 * 0.1).collect());
        TrajectoryBatch::new(meta(2), 3, 2, terminal, paths).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        for p in [false, true] {
            let b = batch(p);
            let back = TrajectoryBatch::from_binary(&b.to_binary()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let b = batch(false);
        let csv = b.to_csv();
        assert!(csv.starts_with("trajectory,dimension,value\n0,0,0.5\n"));
        let back = TrajectoryBatch::from_csv(csv.as_bytes(), &b.meta_json()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let bytes = batch(true).to_binary();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(TrajectoryBatch::from_binary(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TrajectoryBatch::from_binary(&extra).is_err());
    }

    #[test]
    fn oversized_header_does_not_allocate() {
        let mut bytes = batch(false).to_binary();
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n_at = 12 + meta_len;
        bytes[n_at..n_at + 8].copy_from_slice(&(u64::MAX / 4).to_le_bytes());
        assert!(matches!(TrajectoryBatch::from_binary(&bytes), Err(Error::Decode(_))));
    }

    #[test]
    fn csv_rows_must_be_in_order() {
        let b = batch(false);
        let csv = "trajectory,dimension,value\n0,1,0.5\n";
        assert!(TrajectoryBatch::from_csv(csv.as_bytes(), &b.meta_json()).is_err());
        let short = "trajectory,dimension,value\n0,0,0.5\n";
        assert!(TrajectoryBatch::from_csv(short.as_bytes(), &b.meta_json()).is_err());
    }

    #[test]
    fn moments_per_coordinate() {
        let b = batch(false);
        let m = b.moments();
        assert_eq!(m.len(), 2);
        assert!((m[0].0 - (0.5 + 3.0 + 0.0) / 3.0).abs() < 1e-15);
    }
}
