//! Observations, datasets, fold assignment and CSV ingestion.

mod rng;

pub use rng::RngStream;

use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};

/// One subject: outcome `y`, treatment indicator `g` and covariates `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub g: u8,
    pub z: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, g: u8, z: Vec<f64>) -> Self {
        Self { y, g, z }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.y.is_finite() {
            return Err(format!("outcome {} is not finite", self.y));
        }
        if self.g > 1 {
            return Err(format!("treatment value {} is not in {{0,1}}", self.g));
        }
        if let Some(v) = self.z.iter().find(|v| !v.is_finite()) {
            return Err(format!("covariate value {v} is not finite"));
        }
        Ok(())
    }
}

/// An ordered sample of observations sharing covariate dimension `p`.
///
/// Row ids exposed to the outside world (CSV files, black-box predictions)
/// are 1-based; everything in-process indexes rows from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    p: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("dataset must contain at least one row".into()));
        };
        let p = first.z.len();
        for (i, row) in rows.iter().enumerate() {
            if row.z.len() != p {
                return Err(Error::Schema(format!(
                    "row {} has {} covariates, expected {p}",
                    i + 1,
                    row.z.len()
                )));
            }
            row.validate().map_err(|message| Error::Parse { row: i + 1, message })?;
        }
        Ok(Self { rows, p })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Observation {
        &self.rows[i]
    }

    /// 1-based stable row ids.
    pub fn ids(&self) -> impl Iterator<Item = usize> {
        1..=self.rows.len()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.g).collect()
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.rows.iter().filter(|r| r.g == 1).count();
        (self.n() - treated, treated)
    }

    /// Covariate matrix (no intercept column) for all rows.
    pub fn covariates(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n()).collect();
        self.covariates_of(&all)
    }

    /// Covariate matrix restricted to `idx`, in the given order.
    pub fn covariates_of(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.p, |r, c| self.rows[idx[r]].z[c])
    }

    /// New dataset made of the rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            p: self.p,
        }
    }

    /// Writes the `y,g,z1..zp` layout accepted by [`load_dataset_csv`].
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string(), "g".to_string()];
        header.extend((1..=self.p).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![format_float(row.y), row.g.to_string()];
            rec.extend(row.z.iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the identical `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Column names used to read a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
}

impl CsvSchema {
    /// The fixed `y,g,z1..zp` layout.
    pub fn standard(p: usize) -> Self {
        Self {
            outcome: "y".into(),
            treatment: "g".into(),
            covariates: (1..=p).map(|j| format!("z{j}")).collect(),
        }
    }

    /// Standard layout with `p` given by the consecutive `z1, z2, ...` columns
    /// present in the header.
    pub fn detect(header: &csv::StringRecord) -> Self {
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let mut p = 0;
        while names.contains(&format!("z{}", p + 1).as_str()) {
            p += 1;
        }
        Self::standard(p)
    }
}

/// Reads a dataset whose covariate columns are detected from the header.
pub fn load_dataset_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    load_dataset_csv_with(path, None)
}

/// Reads a dataset, optionally against an explicit schema.
pub fn load_dataset_csv_with<P: AsRef<Path>>(path: P, schema: Option<&CsvSchema>) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let schema = match schema {
        Some(s) => s.clone(),
        None => CsvSchema::detect(&header),
    };
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let y_col = position(&schema.outcome)?;
    let g_col = position(&schema.treatment)?;
    let z_cols = schema
        .covariates
        .iter()
        .map(|c| position(c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column `{name}`: cannot parse `{raw}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column `{name}`: non-finite value `{raw}`"),
                });
            }
            Ok(v)
        };
        let y = cell(y_col, &schema.outcome)?;
        let g_raw = cell(g_col, &schema.treatment)?;
        let g = if g_raw == 0.0 {
            0
        } else if g_raw == 1.0 {
            1
        } else {
            return Err(Error::Schema(format!(
                "row {row}: treatment column `{}` has value {g_raw}, expected 0 or 1",
                schema.treatment
            )));
        };
        let z = z_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| cell(c, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Observation { y, g, z });
    }
    Dataset::new(rows)
}

/// A partition of rows `0..n` into `q` folds (labels `0..q`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    q: usize,
}

impl FoldAssignment {
    /// Builds an assignment from explicit labels; every label in `0..q` must be used.
    pub fn from_labels(fold_of: Vec<usize>, q: usize) -> Result<Self> {
        if q == 0 || fold_of.iter().any(|&f| f >= q) {
            return Err(Error::InvalidArgument("fold label out of range".into()));
        }
        Ok(Self { fold_of, q })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.fold_of
    }

    /// Rows inside fold `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == k).collect()
    }

    /// Rows outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.q];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Uniformly random partition into `q` folds of sizes `floor(n/q)` or `ceil(n/q)`.
pub fn make_folds(n: usize, q: usize, rng: &mut RngStream) -> Result<FoldAssignment> {
    if q < 2 || q > n {
        return Err(Error::InvalidArgument(format!("fold count {q} must satisfy 2 <= Q <= n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % q;
    }
    Ok(FoldAssignment { fold_of, q })
}

/// Writes `columns` as a CSV file with the given header.
pub(crate) fn write_columns<P: AsRef<Path>>(path: P, header: &[&str], columns: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let n = columns.first().map_or(0, Vec::len);
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].as_str()))?;
    }
    w.flush()?;
    Ok(())
}
