//! File formats: data CSV, and JSON for weights, specs, bundles and reports.
//!
//! Matrices in JSON are row-major nested arrays. Data CSV files start with a
//! `# rows=<d> cols=<m>` line followed by one matrix row per line.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classification, PivotReport};
use crate::critical_points::{CriticalPointSpec, Support};
use crate::curvature::{Witness, WitnessKind};
use crate::data::{DataMatrices, SigmaBundle};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentResult, HistogramBin};
use crate::linalg::Mat;
use crate::network::Weights;

pub type Rows = Vec<Vec<f64>>;

pub fn mat_to_rows(m: &Mat) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a `rows x cols` matrix; `rows`/`cols` are needed to type empty matrices.
pub fn rows_to_mat(data: &Rows, rows: usize, cols: usize) -> Result<Mat> {
    if data.len() != rows || data.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidShape(format!("expected a {rows}x{cols} matrix")));
    }
    let flat: Vec<f64> = data.iter().flatten().copied().collect();
    Ok(Mat::from_row_slice(rows, cols, &flat))
}

/// Matrix whose size is read off the nested arrays. Empty input gives `0 x 0`.
fn rows_to_mat_infer(data: &Rows) -> Result<Mat> {
    let cols = data.first().map_or(0, |r| r.len());
    rows_to_mat(data, data.len(), cols)
}

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what}: {e}"))
}

pub fn write_matrix_csv<W: Write>(m: &Mat, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# rows={} cols={}", m.nrows(), m.ncols())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))
            .map_err(|e| parse_err("csv", e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<Mat> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let (rows, cols) = parse_header(header.trim())?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut vals = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err("csv", e))?;
        if rec.len() != cols {
            return Err(Error::Parse(format!("row {} has {} fields, expected {cols}", n + 1, rec.len())));
        }
        for f in rec.iter() {
            vals.push(f.parse::<f64>().map_err(|e| parse_err(f, e))?);
        }
        n += 1;
    }
    if n != rows {
        return Err(Error::Parse(format!("found {n} rows, header says {rows}")));
    }
    Ok(Mat::from_row_slice(rows, cols, &vals))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad header {line:?}, expected `# rows=<d> cols=<m>`"));
    let rest = line.strip_prefix('#').ok_or_else(bad)?;
    let mut rows = None;
    let mut cols = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("rows", v)) => rows = Some(v.parse().map_err(|_| bad())?),
            Some(("cols", v)) => cols = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok((rows.ok_or_else(bad)?, cols.ok_or_else(bad)?))
}

pub fn write_matrix_csv_file(m: &Mat, path: &Path) -> Result<()> {
    write_matrix_csv(m, std::io::BufWriter::new(File::create(path)?))
}

pub fn read_matrix_csv_file(path: &Path) -> Result<Mat> {
    read_matrix_csv(File::open(path)?)
}

pub fn read_data(x_path: &Path, y_path: &Path) -> Result<DataMatrices> {
    DataMatrices::new(read_matrix_csv_file(x_path)?, read_matrix_csv_file(y_path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsJson {
    pub dims: Vec<usize>,
    /// `W_1, ..., W_H`.
    pub layers: Vec<Rows>,
}

impl From<&Weights> for WeightsJson {
    fn from(w: &Weights) -> Self {
        WeightsJson { dims: w.shape().dims().to_vec(), layers: w.layers().iter().map(mat_to_rows).collect() }
    }
}

impl WeightsJson {
    pub fn to_weights(&self) -> Result<Weights> {
        if self.dims.len() != self.layers.len() + 1 {
            return Err(Error::InvalidShape(format!(
                "{} dims need {} layers, got {}",
                self.dims.len(),
                self.dims.len().saturating_sub(1),
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| rows_to_mat(l, self.dims[k + 1], self.dims[k]))
            .collect::<Result<Vec<_>>>()?;
        Weights::from_dims(self.dims.clone(), layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecJson {
    pub support: Vec<usize>,
    pub z_blocks: Vec<Rows>,
    #[serde(default)]
    pub d_blocks: Option<Vec<Rows>>,
}

impl From<&CriticalPointSpec> for SpecJson {
    fn from(s: &CriticalPointSpec) -> Self {
        SpecJson {
            support: s.support.indices().to_vec(),
            z_blocks: s.z_blocks.iter().map(mat_to_rows).collect(),
            d_blocks: s.d_blocks.as_ref().map(|ds| ds.iter().map(mat_to_rows).collect()),
        }
    }
}

impl SpecJson {
    /// Z blocks may be empty arrays, so their shapes are recovered from `dims`.
    pub fn to_spec(&self, shape: &crate::network::NetworkShape) -> Result<CriticalPointSpec> {
        let support = Support::new(self.support.clone(), shape.d_y())?;
        let r = support.len();
        if self.z_blocks.len() != shape.depth() {
            return Err(Error::InvalidShape(format!(
                "need {} z blocks, got {}",
                shape.depth(),
                self.z_blocks.len()
            )));
        }
        let z_blocks = self
            .z_blocks
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let (rows, cols) = CriticalPointSpec::z_shape(shape, r, k + 1);
                rows_to_mat(z, rows, cols)
            })
            .collect::<Result<Vec<_>>>()?;
        let d_blocks = match &self.d_blocks {
            None => None,
            Some(ds) => {
                if ds.len() + 1 != shape.depth() {
                    return Err(Error::InvalidShape(format!(
                        "need {} d blocks, got {}",
                        shape.depth() - 1,
                        ds.len()
                    )));
                }
                Some(
                    ds.iter()
                        .enumerate()
                        .map(|(k, d)| rows_to_mat(d, shape.d(k + 1), shape.d(k + 1)))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(CriticalPointSpec { support, z_blocks, d_blocks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleJson {
    pub lambdas: Vec<f64>,
    #[serde(rename = "U")]
    pub u: Rows,
    #[serde(rename = "V_Q_cols", skip_serializing_if = "Option::is_none", default)]
    pub v_q_cols: Option<Rows>,
}

impl BundleJson {
    pub fn new(b: &SigmaBundle, with_v: bool) -> Self {
        BundleJson { lambdas: b.lambdas.clone(), u: mat_to_rows(&b.u), v_q_cols: with_v.then(|| mat_to_rows(&b.v)) }
    }

    pub fn u_mat(&self) -> Result<Mat> {
        rows_to_mat_infer(&self.u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessInfo {
    #[serde(flatten)]
    pub kind: WitnessKind,
    pub predicted_c2: f64,
    pub c2: f64,
}

impl From<&Witness> for WitnessInfo {
    fn from(w: &Witness) -> Self {
        WitnessInfo { kind: w.kind.clone(), predicted_c2: w.predicted_c2, c2: w.c2 }
    }
}

/// Serialized classification. `verdict` is `NotCritical` when the gradient is too large.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationJson {
    pub verdict: String,
    pub support: Option<Vec<usize>>,
    pub r: Option<usize>,
    pub critical_value: Option<f64>,
    pub pivots: Vec<PivotReport>,
    pub witness: Option<WeightsJson>,
    pub witness_info: Option<WitnessInfo>,
    pub approximate: bool,
    pub gradient_norm: f64,
    pub gradient_scale: f64,
    pub loss: f64,
}

impl ClassificationJson {
    pub fn from_classification(c: &Classification, loss: f64) -> Self {
        ClassificationJson {
            verdict: c.verdict.to_string(),
            support: Some(c.support.indices().to_vec()),
            r: Some(c.r),
            critical_value: Some(c.critical_value),
            pivots: c.pivots.clone(),
            witness: c.witness.as_ref().map(|w| WeightsJson::from(&w.direction)),
            witness_info: c.witness.as_ref().map(WitnessInfo::from),
            approximate: c.approximate,
            gradient_norm: c.gradient_norm,
            gradient_scale: c.gradient_scale,
            loss,
        }
    }

    pub fn not_critical(gradient_norm: f64, gradient_scale: f64, loss: f64) -> Self {
        ClassificationJson {
            verdict: "NotCritical".into(),
            support: None,
            r: None,
            critical_value: None,
            pivots: Vec::new(),
            witness: None,
            witness_info: None,
            approximate: false,
            gradient_norm,
            gradient_scale,
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeJson {
    pub lambda_min: f64,
    /// `c2` along random unit directions.
    pub c2_samples: Vec<f64>,
    /// Eigenvector for `lambda_min` when it is negative beyond tolerance.
    pub witness: Option<WeightsJson>,
    pub n_params: usize,
    pub curvature_scale: f64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| parse_err("json", e))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| parse_err(&path.display().to_string(), e))
}

pub fn read_weights(path: &Path) -> Result<Weights> {
    read_json::<WeightsJson>(path)?.to_weights()
}

pub fn write_weights(w: &Weights, path: &Path) -> Result<()> {
    write_json(&WeightsJson::from(w), path)
}

/// Per-run results with columns `run,variant,escape_epoch,final_loss,diverged`.
/// Runs that never escaped have an empty `escape_epoch`.
pub fn write_runs_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "variant", "escape_epoch", "final_loss", "diverged"])
        .map_err(|e| parse_err("csv", e))?;
    for r in &result.runs {
        w.write_record([
            r.run.to_string(),
            r.variant.to_string(),
            r.escape_epoch.map_or(String::new(), |e| e.to_string()),
            format!("{:?}", r.final_loss),
            r.diverged.to_string(),
        ])
        .map_err(|e| parse_err("csv", e))?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram with columns `variant,bin_lo,bin_hi,count`; the censored bin has an empty `bin_hi`.
pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "bin_lo", "bin_hi", "count"]).map_err(|e| parse_err("csv", e))?;
    for b in bins {
        let hi = if b.bin_hi == usize::MAX { String::new() } else { b.bin_hi.to_string() };
        w.write_record([b.variant.to_string(), b.bin_lo.to_string(), hi, b.count.to_string()])
            .map_err(|e| parse_err("csv", e))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let m = Mat::from_row_slice(2, 3, &[1.0, -2.5, 1.0 / 3.0, 1e-300, 6.02e23, 0.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# rows=2 cols=3\n"));
        assert_eq!(read_matrix_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn csv_rejects_wrong_row_count() {
        let text = "# rows=2 cols=2\n1,2\n";
        assert!(matches!(read_matrix_csv(text.as_bytes()), Err(Error::Parse(_))));
        let text = "rows=1 cols=2\n1,2\n";
        assert!(matches!(read_matrix_csv(text.as_bytes()), Err(Error::Parse(_))));
        let text = "# rows=1 cols=2\n1,x\n";
        assert!(matches!(read_matrix_csv(text.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn weights_roundtrip_with_empty_layers() {
        let w = Weights::from_dims(
            vec![2, 3, 1],
            vec![Mat::from_row_slice(3, 2, &[1., 2., 3., 4., 5., 6.]), Mat::from_row_slice(1, 3, &[7., 8., 9.])],
        )
        .unwrap();
        let j = serde_json::to_string(&WeightsJson::from(&w)).unwrap();
        assert!(j.contains("[[1.0,2.0],[3.0,4.0],[5.0,6.0]]"));
        let back: WeightsJson = serde_json::from_str(&j).unwrap();
        assert_eq!(back.to_weights().unwrap(), w);
        let bad = WeightsJson { dims: vec![2, 3, 1], layers: vec![vec![vec![1.0, 2.0]]] };
        assert!(bad.to_weights().is_err());
    }
}
