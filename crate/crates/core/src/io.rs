//! Matrix containers in JSON and CSV, and append-only loss logs.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::{InducedDistribution, InducedKind, JointDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    Joint,
    Induced(InducedKind),
    Features,
    Plain,
}

/// `{rows, cols, data, kind}` with `data` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub kind: MatrixKind,
}

impl MatrixFile {
    pub fn from_matrix(m: &DMatrix<f64>, kind: MatrixKind) -> Self {
        let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data, kind }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{} matrix",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    /// Check the invariants implied by `kind`.
    pub fn validate(&self) -> Result<()> {
        let m = self.to_matrix()?;
        match self.kind {
            MatrixKind::Joint => JointDistribution::new(m).map(|_| ()),
            MatrixKind::Induced(k) => InducedDistribution::new(m, k).map(|_| ()),
            MatrixKind::Features | MatrixKind::Plain => {
                if m.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution("non-finite entry".into()))
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Self::from_json(&s)
    }
}

pub fn joint_from_file(f: &MatrixFile) -> Result<JointDistribution> {
    if f.kind != MatrixKind::Joint {
        return Err(Error::InvalidDistribution(format!("expected a joint matrix, found {:?}", f.kind)));
    }
    JointDistribution::new(f.to_matrix()?)
}

pub fn induced_from_file(f: &MatrixFile) -> Result<InducedDistribution> {
    match f.kind {
        MatrixKind::Induced(k) => InducedDistribution::new(f.to_matrix()?, k),
        other => Err(Error::InvalidDistribution(format!("expected an induced matrix, found {other:?}"))),
    }
}

/// Headerless numeric CSV, one matrix row per line.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::InvalidDistribution(format!("bad entry {x:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch("ragged CSV rows".into()));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &data))
}

/// One loss evaluation in a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub instance: String,
    pub loss: String,
    pub value: f64,
    pub seed: u64,
}

/// Append records to a CSV log, writing the header only for a new file.
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Serialize rows with headers to CSV text.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
