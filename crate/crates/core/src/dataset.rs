//! Tabular records with an observation mask, plus CSV persistence.
//!
//! Hidden cells hold a sentinel (`NaN` for continuous columns, `-1` for
//! discrete ones) and are only reachable through [`Dataset::raw_row`], which
//! consumers use exclusively on fully observed data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scg::{VarKind, Variable};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("schema violation at row {row}, column `{column}`: {reason}")]
    SchemaViolation { row: usize, column: String, reason: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: u64, column: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const DISCRETE_SENTINEL: f64 = -1.0;

pub fn sentinel(kind: VarKind) -> f64 {
    if kind.is_discrete() {
        DISCRETE_SENTINEL
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Vec<Variable>,
    n_rows: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl PartialEq for Dataset {
    /// Bitwise comparison of values so that sentinel NaNs compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.n_rows == other.n_rows
            && self.mask == other.mask
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_value(var: &Variable, v: f64) -> Result<(), String> {
    if !v.is_finite() {
        return Err(format!("non-finite value {v}"));
    }
    if let Some(card) = var.kind.cardinality() {
        if v.fract() != 0.0 || v < 0.0 || v >= card as f64 {
            return Err(format!("value {v} outside 0..{card}"));
        }
    }
    Ok(())
}

impl Dataset {
    /// Build from row-major values and mask; masked cells are overwritten
    /// with the sentinel, observed cells are checked against the schema.
    pub fn new(schema: Vec<Variable>, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self, DatasetError> {
        let k = schema.len();
        if values.len() != mask.len() {
            return Err(DatasetError::ShapeMismatch(format!(
                "{} values vs {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        if k == 0 && !values.is_empty() || k > 0 && values.len() % k != 0 {
            return Err(DatasetError::ShapeMismatch(format!("{} values not divisible by {k} columns", values.len())));
        }
        let n_rows = if k == 0 { 0 } else { values.len() / k };
        for (idx, v) in values.iter_mut().enumerate() {
            let (row, col) = (idx / k, idx % k);
            if mask[idx] {
                check_value(&schema[col], *v).map_err(|reason| DatasetError::SchemaViolation {
                    row,
                    column: schema[col].name.clone(),
                    reason,
                })?;
            } else {
                *v = sentinel(schema[col].kind);
            }
        }
        Ok(Self { schema, n_rows, values, mask })
    }

    /// Fully observed dataset.
    pub fn observed(schema: Vec<Variable>, values: Vec<f64>) -> Result<Self, DatasetError> {
        let mask = vec![true; values.len()];
        Self::new(schema, values, mask)
    }

    pub fn empty(schema: Vec<Variable>) -> Self {
        Self { schema, n_rows: 0, values: Vec::new(), mask: Vec::new() }
    }

    pub fn schema(&self) -> &[Variable] {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        let k = self.n_cols();
        &self.mask[i * k..(i + 1) * k]
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_cols() + j]
    }

    /// The observed value at `(i, j)`, or `None` when hidden.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let idx = i * self.n_cols() + j;
        self.mask[idx].then(|| self.values[idx])
    }

    /// Raw row including sentinels. Callers must consult the mask.
    pub fn raw_row(&self, i: usize) -> &[f64] {
        let k = self.n_cols();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn observed_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 1.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Observed values of column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).filter_map(|i| self.get(i, j)).collect()
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.mask.len());
        let mut values = self.values.clone();
        let k = self.n_cols();
        for (idx, v) in values.iter_mut().enumerate() {
            if !mask[idx] {
                *v = sentinel(self.schema[idx % k].kind);
            }
        }
        Self { schema: self.schema.clone(), n_rows: self.n_rows, values, mask }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let k = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * k);
        let mut mask = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            values.extend_from_slice(self.raw_row(r));
            mask.extend_from_slice(self.mask_row(r));
        }
        Self { schema: self.schema.clone(), n_rows: rows.len(), values, mask }
    }

    pub fn without_row(&self, skip: usize) -> Self {
        let rows: Vec<usize> = (0..self.n_rows).filter(|&r| r != skip).collect();
        self.select_rows(&rows)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self, DatasetError> {
        if self.schema != other.schema {
            return Err(DatasetError::ShapeMismatch("schemas differ".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut mask = self.mask.clone();
        mask.extend_from_slice(&other.mask);
        Ok(Self { schema: self.schema.clone(), n_rows: self.n_rows + other.n_rows, values, mask })
    }

    /// Replace column `j` of every row (all cells become observed).
    pub fn with_column(&self, j: usize, column: &[f64]) -> Result<Self, DatasetError> {
        assert_eq!(column.len(), self.n_rows);
        let mut values = self.values.clone();
        let mut mask = self.mask.clone();
        let k = self.n_cols();
        for (i, &v) in column.iter().enumerate() {
            values[i * k + j] = v;
            mask[i * k + j] = true;
        }
        Self::new(self.schema.clone(), values, mask)
    }

    /// SHA-256 of the schema's JSON form.
    pub fn schema_hash(&self) -> String {
        schema_hash(&self.schema)
    }

    /// SHA-256 over schema, mask and value bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema_hash().as_bytes());
        for (v, m) in self.values.iter().zip(&self.mask) {
            h.update(v.to_bits().to_le_bytes());
            h.update([u8::from(*m)]);
        }
        hex::encode(h.finalize())
    }

    /// CSV text: header of variable names, empty cells for hidden values.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(self.schema.iter().map(|v| v.name.as_str())).expect("in-memory write");
        for i in 0..self.n_rows {
            let row: Vec<String> = (0..self.n_cols())
                .map(|j| match self.get(i, j) {
                    None => String::new(),
                    Some(v) if self.schema[j].kind.is_discrete() => format!("{}", v as i64),
                    Some(v) => format!("{v:?}"),
                })
                .collect();
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Parse CSV text against `schema`. Header names must match exactly.
    pub fn from_csv(text: &str, schema: Vec<Variable>) -> Result<Self, DatasetError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| parse_err(&e, 1, 0))?.clone();
        let names: Vec<&str> = header.iter().collect();
        let expected: Vec<&str> = schema.iter().map(|v| v.name.as_str()).collect();
        if names != expected {
            return Err(DatasetError::Parse {
                line: 1,
                column: 1,
                message: format!("header {names:?} does not match schema {expected:?}"),
            });
        }
        let k = schema.len();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(&e, row as u64 + 2, 0))?;
            let line = rec.position().map_or(row as u64 + 2, |p| p.line());
            if rec.len() != k {
                return Err(DatasetError::Parse {
                    line,
                    column: rec.len().min(k) + 1,
                    message: format!("expected {k} fields, found {}", rec.len()),
                });
            }
            for (j, field) in rec.iter().enumerate() {
                let field = field.trim();
                if field.is_empty() {
                    values.push(sentinel(schema[j].kind));
                    mask.push(false);
                    continue;
                }
                let v: f64 = field.parse().map_err(|_| DatasetError::Parse {
                    line,
                    column: j + 1,
                    message: format!("`{field}` is not a number"),
                })?;
                check_value(&schema[j], v).map_err(|reason| DatasetError::SchemaViolation {
                    row,
                    column: schema[j].name.clone(),
                    reason: format!("line {line}: {reason}"),
                })?;
                values.push(v);
                mask.push(true);
            }
        }
        Self::new(schema, values, mask)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path, schema: Vec<Variable>) -> Result<Self, DatasetError> {
        Self::from_csv(&fs::read_to_string(path)?, schema)
    }
}

fn parse_err(e: &csv::Error, line: u64, column: usize) -> DatasetError {
    let line = e.position().map_or(line, |p| p.line());
    DatasetError::Parse { line, column, message: e.to_string() }
}

pub fn schema_hash(schema: &[Variable]) -> String {
    let json = serde_json::to_string(schema).expect("schema serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Companion JSON written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub k: usize,
    pub schema_hash: String,
    pub seed: Option<u64>,
    pub schema: Vec<Variable>,
}

impl DatasetManifest {
    pub fn for_dataset(data: &Dataset, seed: Option<u64>) -> Self {
        Self {
            n: data.n_rows(),
            k: data.n_cols(),
            schema_hash: data.schema_hash(),
            seed,
            schema: data.schema().to_vec(),
        }
    }
}

/// Write `data.csv`-style file plus `<path>.manifest.json`.
pub fn save_dataset(path: &Path, data: &Dataset, seed: Option<u64>) -> Result<(), DatasetError> {
    data.save(path)?;
    let manifest = DatasetManifest::for_dataset(data, seed);
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

/// Load a CSV using its companion manifest for the schema.
pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetManifest), DatasetError> {
    let text = fs::read_to_string(manifest_path(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Parse { line: e.line() as u64, column: e.column(), message: e.to_string() })?;
    if schema_hash(&manifest.schema) != manifest.schema_hash {
        return Err(DatasetError::ShapeMismatch("manifest schema hash does not match its schema".into()));
    }
    let data = Dataset::load(path, manifest.schema.clone())?;
    if data.n_rows() != manifest.n || data.n_cols() != manifest.k {
        return Err(DatasetError::ShapeMismatch(format!(
            "manifest says {}x{}, file has {}x{}",
            manifest.n,
            manifest.k,
            data.n_rows(),
            data.n_cols()
        )));
    }
    Ok((data, manifest))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}
