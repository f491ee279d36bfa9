//! CSV and JSON result documents. Every CSV starts with one `#` header line
//! carrying a timestamp; everything below it is a deterministic function of
//! the run configuration.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::model::ProblemSpec;
use crate::riccati::EquilibriumSolution;
use crate::simulate::{PathEnsemble, SpikeEstimate};

/// Full double precision, scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A header plus rows of already formatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// CSV text without the header comment.
    pub fn body(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = header_line();
        text.push_str(&self.body()?);
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn header_line() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# mfeq {} generated {secs}\n", env!("CARGO_PKG_VERSION"))
}

/// Drops `#` comment lines, leaving the comparable part of a CSV file.
pub fn csv_body(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).flat_map(|l| [l, "\n"]).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn matrix_columns(name: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|i| (0..cols).map(move |j| format!("{name}_{}_{}", i + 1, j + 1))).collect()
}

fn vector_columns(name: &str, len: usize) -> Vec<String> {
    (0..len).map(|i| format!("{name}_{}", i + 1)).collect()
}

fn flatten(m: &DMatrix<f64>) -> impl Iterator<Item = String> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| fmt_f64(m[(i, j)])))
}

fn flatten_vec(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| fmt_f64(*x))
}

/// One row per node: Y₀, P̂₁, P₁..P₄, second-order margin and range flags.
pub fn riccati_table(spec: &ProblemSpec, eq: &EquilibriumSolution) -> Table {
    let n = spec.n;
    let mut cols = vec!["time".to_string()];
    cols.extend(matrix_columns("Y0", n, n));
    cols.extend(matrix_columns("hatP1", n, n));
    for p in ["P1", "P2"] {
        cols.extend(matrix_columns(p, n, n));
    }
    for p in ["P3", "P4"] {
        cols.extend(vector_columns(p, n));
    }
    cols.extend(["margin".into(), "range_theta".into(), "range_phi".into()]);
    let mut t = Table::new(cols);
    for k in 0..=spec.grid.steps() {
        let mut row = vec![fmt_f64(spec.grid.time(k))];
        row.extend(flatten(&eq.y0.values[k]));
        row.extend(flatten(&eq.hat_p1.values[k]));
        row.extend(flatten(&eq.p1.values[k]));
        row.extend(flatten(&eq.p2.values[k]));
        row.extend(flatten(&eq.p3.values[k]));
        row.extend(flatten(&eq.p4.values[k]));
        row.push(fmt_f64(eq.second_order.margin[k]));
        row.push(u8::from(eq.range[k].theta).to_string());
        row.push(u8::from(eq.range[k].phi).to_string());
        t.push(row);
    }
    t
}

/// One row per node: Θ* (row-major) and φ*.
pub fn gains_table(spec: &ProblemSpec, eq: &EquilibriumSolution) -> Table {
    let mut cols = vec!["time".to_string()];
    cols.extend(matrix_columns("Theta", spec.m, spec.n));
    cols.extend(vector_columns("phi", spec.m));
    let mut t = Table::new(cols);
    for k in 0..=spec.grid.steps() {
        let mut row = vec![fmt_f64(spec.grid.time(k))];
        row.extend(flatten(&eq.law.theta[k]));
        row.extend(flatten_vec(&eq.law.phi[k]));
        t.push(row);
    }
    t
}

/// Long format: one row per (path, node). Controls are blank at the terminal node.
pub fn ensemble_table(ens: &PathEnsemble, n: usize, m: usize) -> Table {
    let mut cols = vec!["path".to_string(), "time".to_string()];
    cols.extend(vector_columns("x", n));
    cols.extend(vector_columns("u", m));
    let mut t = Table::new(cols);
    for (p, path) in ens.paths.iter().enumerate() {
        for (j, x) in path.x.iter().enumerate() {
            let mut row = vec![p.to_string(), fmt_f64(ens.grid.time(ens.anchor + j))];
            row.extend(flatten_vec(x));
            match path.u.get(j) {
                Some(u) => row.extend(flatten_vec(u)),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            t.push(row);
        }
    }
    t
}

pub fn spike_table(estimates: &[(f64, SpikeEstimate)], m: usize) -> Table {
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_columns("v", m));
    cols.extend(["eps".into(), "derivative".into(), "std_error".into(), "z".into()]);
    let mut t = Table::new(cols);
    for (time, e) in estimates {
        let mut row = vec![fmt_f64(*time)];
        row.extend(e.v.iter().map(|x| fmt_f64(*x)));
        let z = if e.std_error > 0.0 { e.derivative / e.std_error } else { 0.0 };
        row.extend([fmt_f64(e.eps), fmt_f64(e.derivative), fmt_f64(e.std_error), fmt_f64(z)]);
        t.push(row);
    }
    t
}

/// Per-cell coefficient dump for plotting.
pub fn coefficients_table(spec: &ProblemSpec) -> Table {
    let mut cols = vec!["cell".to_string(), "t_start".to_string()];
    for (name, path) in spec.mat_fields() {
        let s = path.at(0).shape();
        cols.extend(matrix_columns(name, s.0, s.1));
    }
    cols.extend(vector_columns("b", spec.n));
    cols.extend(vector_columns("sigma", spec.n));
    let mut t = Table::new(cols);
    for cell in 0..spec.grid.steps() {
        let mut row = vec![cell.to_string(), fmt_f64(spec.grid.time(cell))];
        for (_, path) in spec.mat_fields() {
            row.extend(flatten(path.at(cell)));
        }
        row.extend(flatten_vec(spec.drift.at(cell)));
        row.extend(flatten_vec(spec.diffusion.at(cell)));
        t.push(row);
    }
    t
}
