//! On-disk artifacts: matrix CSVs, JSON documents, loss histories and dataset
//! directories. Every writer is deterministic so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalMap;
use crate::datagen::MarginalSamples;
use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::numkernel::matrix::Matrix;
use crate::train::LossRecord;

fn with_path<T>(path: &Path, r: std::result::Result<T, std::io::Error>) -> Result<T> {
    r.map_err(|e| PedError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn matrix_to_csv(m: &Matrix) -> Result<String> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let map = |e: csv::Error| PedError::Parse(e.to_string());
    w.write_record([m.rows().to_string(), m.cols().to_string()]).map_err(map)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| fmt_f64(*v))).map_err(map)?;
    }
    let bytes = w.into_inner().map_err(|e| PedError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PedError::Parse(e.to_string()))
}

/// Parses a matrix; a leading `rows,cols` line is used when it matches the body.
pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut lines: Vec<Vec<String>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| PedError::Parse(e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        lines.push(rec.iter().map(str::to_owned).collect());
    }
    let header = lines.first().and_then(|h| {
        let dims: Option<Vec<usize>> = (h.len() == 2).then(|| h.iter().map(|v| v.parse().ok()).collect()).flatten();
        dims.filter(|d| d[0] == lines.len() - 1 && lines[1..].iter().all(|l| l.len() == d[1]))
    });
    let body = if header.is_some() { &lines[1..] } else { &lines[..] };
    if let Some(d) = &header {
        if d[0] == 0 {
            return Ok(Matrix::zeros(0, d[1]));
        }
    }
    let cols = body.first().map_or(0, |l| l.len());
    let mut data = Vec::with_capacity(body.len() * cols);
    for (i, line) in body.iter().enumerate() {
        if line.len() != cols {
            return Err(PedError::Parse(format!("row {} has {} fields, expected {cols}", i + 1, line.len())));
        }
        for (j, v) in line.iter().enumerate() {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| PedError::Parse(format!("row {}, column {}: not a number: {v:?}", i + 1, j + 1)))?,
            );
        }
    }
    Matrix::from_vec(body.len(), cols, data)
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    with_path(path, fs::write(path, matrix_to_csv(m)?))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = with_path(path, fs::read_to_string(path))?;
    matrix_from_csv(&text).map_err(|e| PedError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    with_path(path, fs::write(path, text))
}

/// Reads JSON; errors carry the file name plus serde's line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = with_path(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| PedError::Parse(format!("{}: {e}", path.display())))
}

pub fn losses_to_csv(history: &[LossRecord]) -> String {
    let deep = history.iter().any(|r| r.frozen_layers.is_some());
    let mut out = String::from("epoch,batch,objective,solver_iters_mean,nonconverged_count,boundary_dropped");
    if deep {
        out.push_str(",frozen_layers");
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            fmt_f64(r.objective),
            fmt_f64(r.solver_iters_mean),
            r.nonconverged_count,
            r.boundary_dropped
        ));
        if deep {
            let frozen: Vec<String> = r.frozen_layers.iter().flatten().map(|l| l.to_string()).collect();
            out.push(',');
            out.push_str(&frozen.join(";"));
        }
        out.push('\n');
    }
    out
}

pub fn write_losses_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    with_path(path, fs::write(path, losses_to_csv(history)))
}

pub fn write_marginals_csv(path: &Path, s: &MarginalSamples) -> Result<()> {
    let mut out = String::from("w,z,canonical,y\n");
    for k in 0..s.y.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(s.w[k]),
            fmt_f64(s.z[k]),
            fmt_f64(s.canonical[k]),
            fmt_f64(s.y[k])
        ));
    }
    with_path(path, fs::write(path, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub family: ExpFamily,
    /// one map per layer, data side first
    pub maps: Vec<CanonicalMap>,
    pub seed: u64,
    /// `d^(0), ..., d^(L)`
    pub dims: Vec<usize>,
    pub resolution: usize,
    pub samples: usize,
    pub clamp_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub y: Matrix,
    pub z_true: Matrix,
    /// data side first
    pub w_true: Vec<Matrix>,
    pub meta: DatasetMeta,
}

fn weight_file(l: usize) -> String {
    if l == 1 {
        "W_true.csv".into()
    } else {
        format!("W_true_{l}.csv")
    }
}

pub fn write_dataset(dir: &Path, data: &DatasetFiles) -> Result<Vec<PathBuf>> {
    with_path(dir, fs::create_dir_all(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, m: &Matrix| -> Result<()> {
        let p = dir.join(name);
        write_matrix_csv(&p, m)?;
        written.push(p);
        Ok(())
    };
    put("Y.csv", &data.y)?;
    put("Z_true.csv", &data.z_true)?;
    for (l, w) in data.w_true.iter().enumerate() {
        put(&weight_file(l + 1), w)?;
    }
    let meta = dir.join("meta.json");
    write_json(&meta, &data.meta)?;
    written.push(meta);
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetFiles> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let y = read_matrix_csv(&dir.join("Y.csv"))?;
    let z_true = read_matrix_csv(&dir.join("Z_true.csv"))?;
    let depth = meta.dims.len().saturating_sub(1);
    let w_true = (1..=depth)
        .map(|l| read_matrix_csv(&dir.join(weight_file(l))))
        .collect::<Result<Vec<_>>>()?;
    if y.rows() != meta.dims.first().copied().unwrap_or(0) || y.cols() != meta.samples || z_true.cols() != meta.samples {
        return Err(PedError::Validation(format!("{}: files disagree with meta.json", dir.display())));
    }
    Ok(DatasetFiles { y, z_true, w_true, meta })
}
