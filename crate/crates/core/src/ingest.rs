//! Dataset loading, validation and summary statistics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where a dataset came from and what was done to it.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub path: Option<String>,
    /// Lower-case hex SHA-256 of the raw file bytes.
    pub sha256: Option<String>,
    pub standardized: bool,
}

/// An `n x d` matrix of finite observations with unique column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    rows: Vec<f64>,
    n: usize,
    provenance: Provenance,
}

impl Dataset {
    /// `rows` is row-major with `names.len()` columns.
    pub fn new(names: Vec<String>, rows: Vec<f64>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::InvalidData("dataset has no columns".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != d {
            return Err(Error::InvalidData("duplicate column name".into()));
        }
        if rows.is_empty() || rows.len() % d != 0 {
            return Err(Error::InvalidData(format!(
                "{} values do not form a non-empty {d}-column matrix",
                rows.len()
            )));
        }
        if let Some(k) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value at row {}, column {}",
                k / d + 1,
                names[k % d]
            )));
        }
        let n = rows.len() / d;
        Ok(Self {
            names,
            rows,
            n,
            provenance: Provenance::default(),
        })
    }

    /// Columns named `X1..Xd`.
    pub fn with_default_names(d: usize, rows: Vec<f64>) -> Result<Self> {
        Self::new(default_names(d), rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.d())
    }

    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn name_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Centers every column and scales it to unit sample variance.
    pub fn standardized(&self) -> Result<Dataset> {
        let summary = summarize(self);
        let d = self.d();
        for j in 0..d {
            if summary.variance[j] <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "column {} is constant and cannot be standardized",
                    self.names[j]
                )));
            }
        }
        let sd: Vec<f64> = summary.variance.iter().map(|v| v.sqrt()).collect();
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(k, v)| (v - summary.mean[k % d]) / sd[k % d])
            .collect();
        let mut out = Dataset::new(self.names.clone(), rows)?;
        out.provenance = Provenance {
            standardized: true,
            ..self.provenance.clone()
        };
        Ok(out)
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let rows = idx.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        Dataset::new(self.names.clone(), rows)
    }
}

pub fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("X{k}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses CSV text with a header row. `source` labels error messages.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let d = names.len();
    let mut seen = BTreeSet::new();
    for name in &names {
        if name.is_empty() || !seen.insert(name) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("empty or duplicate column name {name:?}"),
            });
        }
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != d {
            return Err(Error::Parse {
                line,
                msg: format!("expected {d} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {}: {cell:?} is not a number", names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column {}: non-finite value {cell:?}", names[j]),
                });
            }
            rows.push(v);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("CSV has a header but no rows".into()));
    }
    Dataset::new(names, rows)
}

pub fn load_csv(path: &Path, standardize: bool) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::InvalidData(format!("{} is not UTF-8", path.display())))?;
    let mut data = parse_csv(&text)?;
    data.provenance = Provenance {
        path: Some(path.display().to_string()),
        sha256: Some(sha256_hex(&bytes)),
        standardized: false,
    };
    if standardize {
        data = data.standardized()?;
    }
    Ok(data)
}

/// Header row of names, then one row per observation. Values use the
/// shortest decimal that round-trips exactly.
pub fn write_csv(data: &Dataset) -> String {
    let mut out = data.names().join(",");
    out.push('\n');
    for row in data.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: Vec<f64>,
    /// Sample variance (divisor `n - 1`; 0 when `n = 1`).
    pub variance: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Pearson correlations, row-major `d x d`. Pairs involving a constant
    /// column are reported as 0.
    pub correlation: Vec<f64>,
    pub notes: Vec<String>,
}

pub fn summarize(data: &Dataset) -> Summary {
    let (n, d) = (data.n(), data.d());
    let mut mean = vec![0.0; d];
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in data.rows() {
        for j in 0..d {
            mean[j] += row[j];
            min[j] = min[j].min(row[j]);
            max[j] = max[j].max(row[j]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in data.rows() {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= denom;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let variance: Vec<f64> = (0..d).map(|j| cov[j * d + j]).collect();
    let mut correlation = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let s = (variance[a] * variance[b]).sqrt();
            correlation[a * d + b] = if s > 0.0 { cov[a * d + b] / s } else { 0.0 };
        }
    }
    let notes = (0..d)
        .filter(|&j| variance[j] == 0.0)
        .map(|j| {
            format!(
                "column {} is constant; its variance function cannot be identified",
                data.names()[j]
            )
        })
        .collect();
    Summary {
        mean,
        variance,
        min,
        max,
        correlation,
        notes,
    }
}
