//! Line-oriented text format for models, encoders and predictors.
//!
//! ```text
//! # free-form header comments
//! scalar sigma_r2 0.4
//! label penalty soft
//! matrix a_star 3 2
//! 0.1 0.2
//! ...
//! ```
//!
//! Matrices are written row-major, one row per line. Numbers use Rust's
//! shortest round-trip decimal form, so parsing returns bit-identical values.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Scalar(f64),
    Label(String),
    Matrix(DMatrix<f64>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextDoc {
    pub comments: Vec<String>,
    pub entries: Vec<(String, Entry)>,
}

impl TextDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scalar(&mut self, key: &str, v: f64) {
        self.entries.push((key.into(), Entry::Scalar(v)));
    }

    pub fn push_label(&mut self, key: &str, v: &str) {
        self.entries.push((key.into(), Entry::Label(v.into())));
    }

    pub fn push_matrix(&mut self, key: &str, m: DMatrix<f64>) {
        self.entries.push((key.into(), Entry::Matrix(m)));
    }

    /// Stored as a `1 x n` matrix.
    pub fn push_vector(&mut self, key: &str, v: &DVector<f64>) {
        self.push_matrix(key, DMatrix::from_row_slice(1, v.len(), v.as_slice()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            for line in c.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        for (key, entry) in &self.entries {
            match entry {
                Entry::Scalar(v) => {
                    let _ = writeln!(out, "scalar {key} {v:?}");
                }
                Entry::Label(v) => {
                    let _ = writeln!(out, "label {key} {v}");
                }
                Entry::Matrix(m) => {
                    let _ = writeln!(out, "matrix {key} {} {}", m.nrows(), m.ncols());
                    for r in 0..m.nrows() {
                        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
                        let _ = writeln!(out, "{}", row.join(" "));
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = TextDoc::new();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let err = |line: usize, message: String| Error::Parse { line, message };
        while let Some((ln, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                doc.comments.push(c.trim_start().to_string());
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["scalar", key, v] => {
                    let v = v.parse::<f64>().map_err(|e| err(ln, format!("{key}: {e}")))?;
                    doc.push_scalar(key, v);
                }
                ["label", key, rest @ ..] if !rest.is_empty() => doc.push_label(key, &rest.join(" ")),
                ["matrix", key, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|e| err(ln, format!("{key} rows: {e}")))?;
                    let cols: usize = cols.parse().map_err(|e| err(ln, format!("{key} cols: {e}")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (rl, row) = lines
                            .next()
                            .ok_or_else(|| err(ln, format!("{key}: missing row {r}")))?;
                        let vals = row
                            .split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| err(rl, format!("{key} row {r}: {e}")))?;
                        if vals.len() != cols {
                            return Err(err(rl, format!("{key} row {r}: expected {cols} values, got {}", vals.len())));
                        }
                        data.extend(vals);
                    }
                    doc.push_matrix(key, DMatrix::from_row_slice(rows, cols, &data));
                }
                _ => return Err(err(ln, format!("unrecognised line `{line}`"))),
            }
        }
        Ok(doc)
    }

    fn get(&self, key: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{key}`"),
            })
    }

    pub fn scalar(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Entry::Scalar(v) => Ok(*v),
            _ => Err(type_error(key, "scalar")),
        }
    }

    pub fn count(&self, key: &str) -> Result<usize> {
        let v = self.scalar(key)?;
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(type_error(key, "non-negative integer"))
        }
    }

    pub fn label(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            Entry::Label(v) => Ok(v),
            _ => Err(type_error(key, "label")),
        }
    }

    pub fn matrix(&self, key: &str) -> Result<&DMatrix<f64>> {
        match self.get(key)? {
            Entry::Matrix(m) => Ok(m),
            _ => Err(type_error(key, "matrix")),
        }
    }

    pub fn vector(&self, key: &str) -> Result<DVector<f64>> {
        let m = self.matrix(key)?;
        if m.nrows() != 1 {
            return Err(type_error(key, "1 x n vector"));
        }
        Ok(DVector::from_iterator(m.ncols(), m.iter().copied()))
    }
}

fn type_error(key: &str, want: &str) -> Error {
    Error::Parse {
        line: 0,
        message: format!("`{key}` is not a {want}"),
    }
}
