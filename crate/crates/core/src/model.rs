//! Problem instances: grid, coefficient paths, validation and the derived
//! aggregate and composite coefficients.

use std::fmt;
use std::path::Path as FsPath;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, SYM_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::Grid(format!("steps must be at least 2, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node >= self.steps {
            self.horizon
        } else {
            node as f64 * self.step_size()
        }
    }

    /// Coefficient cell used at a node; the terminal node reuses the last cell.
    pub fn cell_of_node(&self, node: usize) -> usize {
        node.min(self.steps - 1)
    }

    /// Node index of a grid-aligned time.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        let x = t / self.step_size();
        let k = x.round();
        if !(0.0..=self.steps as f64).contains(&k) || (x - k).abs() > 1e-9 * (1.0 + x.abs()) {
            return Err(Error::OffGrid(t));
        }
        Ok(k as usize)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && self.horizon == other.horizon
    }
}

/// Piecewise-constant path on grid cells, value attributed to the left
/// endpoint. A single entry means constant in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Path<T> {
    values: Vec<T>,
}

pub type MatPath = Path<DMatrix<f64>>;
pub type VecPath = Path<DVector<f64>>;

impl<T: Clone> Path<T> {
    pub fn constant(v: T) -> Self {
        Self { values: vec![v] }
    }

    pub fn per_cell(values: Vec<T>) -> Self {
        assert!(!values.is_empty(), "empty path");
        Self { values }
    }

    pub fn at(&self, cell: usize) -> &T {
        if self.values.len() == 1 {
            &self.values[0]
        } else {
            &self.values[cell.min(self.values.len() - 1)]
        }
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    pub fn cells(&self) -> &[T] {
        &self.values
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Path<U> {
        Path { values: self.values.iter().map(f).collect() }
    }

    pub fn zip_with<U: Clone, V: Clone>(&self, other: &Path<U>, f: impl Fn(&T, &U) -> V) -> Path<V> {
        let len = self.values.len().max(other.values.len());
        Path { values: (0..len).map(|k| f(self.at(k), other.at(k))).collect() }
    }

    /// Sample-and-hold onto another grid over the same horizon.
    pub fn resample(&self, from: &TimeGrid, to: &TimeGrid) -> Self {
        if self.is_constant() {
            return self.clone();
        }
        let values = (0..to.steps())
            .map(|k| {
                let t = to.time(k) + 1e-12 * to.step_size();
                let c = ((t / from.step_size()).floor() as usize).min(from.steps() - 1);
                self.at(c).clone()
            })
            .collect();
        Self { values }
    }
}

impl MatPath {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self::constant(DMatrix::zeros(r, c))
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, x))
    }
}

impl VecPath {
    pub fn zeros_vec(n: usize) -> Self {
        Self::constant(DVector::zeros(n))
    }
}

/// One LQ problem instance. Field names follow the state equation
///
/// ```text
/// dX = [aX + a_tilde·E_tX + bu + b_tilde·E_tu + drift]ds
///    + [cX + c_tilde·E_tX + du + d_tilde·E_tu + diffusion]dW
/// ```
///
/// and the quadratic cost with running weights q, q_tilde, r, r_tilde,
/// terminal weights g, g_tilde and the cross term ⟨gamma1·X(t)+gamma2, E_tX(T)⟩.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub a: MatPath,
    pub a_tilde: MatPath,
    pub b: MatPath,
    pub b_tilde: MatPath,
    pub c: MatPath,
    pub c_tilde: MatPath,
    pub d: MatPath,
    pub d_tilde: MatPath,
    pub q: MatPath,
    pub q_tilde: MatPath,
    pub r: MatPath,
    pub r_tilde: MatPath,
    pub g: DMatrix<f64>,
    pub g_tilde: DMatrix<f64>,
    pub gamma1: f64,
    pub gamma2: DVector<f64>,
    pub drift: VecPath,
    pub diffusion: VecPath,
    pub x0: DVector<f64>,
}

impl ProblemSpec {
    /// All-zero problem of the given dimensions.
    pub fn zeros(n: usize, m: usize, grid: TimeGrid) -> Self {
        Self {
            grid,
            n,
            m,
            a: MatPath::zeros(n, n),
            a_tilde: MatPath::zeros(n, n),
            b: MatPath::zeros(n, m),
            b_tilde: MatPath::zeros(n, m),
            c: MatPath::zeros(n, n),
            c_tilde: MatPath::zeros(n, n),
            d: MatPath::zeros(n, m),
            d_tilde: MatPath::zeros(n, m),
            q: MatPath::zeros(n, n),
            q_tilde: MatPath::zeros(n, n),
            r: MatPath::zeros(m, m),
            r_tilde: MatPath::zeros(m, m),
            g: DMatrix::zeros(n, n),
            g_tilde: DMatrix::zeros(n, n),
            gamma1: 0.0,
            gamma2: DVector::zeros(n),
            drift: VecPath::zeros_vec(n),
            diffusion: VecPath::zeros_vec(n),
            x0: DVector::zeros(n),
        }
    }

    /// Scalar problem with constant coefficients, everything else zero.
    pub fn scalar(horizon: f64, steps: usize) -> Result<Self> {
        Ok(Self::zeros(1, 1, TimeGrid::new(horizon, steps)?))
    }

    pub fn mat_fields(&self) -> [(&'static str, &MatPath); 12] {
        [
            ("A", &self.a),
            ("A_tilde", &self.a_tilde),
            ("B", &self.b),
            ("B_tilde", &self.b_tilde),
            ("C", &self.c),
            ("C_tilde", &self.c_tilde),
            ("D", &self.d),
            ("D_tilde", &self.d_tilde),
            ("Q", &self.q),
            ("Q_tilde", &self.q_tilde),
            ("R", &self.r),
            ("R_tilde", &self.r_tilde),
        ]
    }

    fn mat_fields_mut(&mut self) -> [&mut MatPath; 12] {
        [
            &mut self.a,
            &mut self.a_tilde,
            &mut self.b,
            &mut self.b_tilde,
            &mut self.c,
            &mut self.c_tilde,
            &mut self.d,
            &mut self.d_tilde,
            &mut self.q,
            &mut self.q_tilde,
            &mut self.r,
            &mut self.r_tilde,
        ]
    }

    /// True when every mean-field coefficient vanishes.
    pub fn has_mean_field(&self) -> bool {
        [&self.a_tilde, &self.b_tilde, &self.c_tilde, &self.d_tilde]
            .iter()
            .any(|p| p.cells().iter().any(|m| m.iter().any(|x| *x != 0.0)))
    }

    /// Same problem on a different number of steps (sample-and-hold).
    pub fn regrid(&self, steps: usize) -> Result<Self> {
        let to = TimeGrid::new(self.grid.horizon(), steps)?;
        let from = self.grid;
        let mut out = self.clone();
        for p in out.mat_fields_mut() {
            *p = p.resample(&from, &to);
        }
        out.drift = self.drift.resample(&from, &to);
        out.diffusion = self.diffusion.resample(&from, &to);
        out.grid = to;
        Ok(out)
    }

    /// Componentwise α·self + β·other for specs sharing a grid and shapes.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        let lin = |x: &MatPath, y: &MatPath| x.zip_with(y, |p, q| p * alpha + q * beta);
        let linv = |x: &VecPath, y: &VecPath| x.zip_with(y, |p, q| p * alpha + q * beta);
        Self {
            grid: self.grid,
            n: self.n,
            m: self.m,
            a: lin(&self.a, &other.a),
            a_tilde: lin(&self.a_tilde, &other.a_tilde),
            b: lin(&self.b, &other.b),
            b_tilde: lin(&self.b_tilde, &other.b_tilde),
            c: lin(&self.c, &other.c),
            c_tilde: lin(&self.c_tilde, &other.c_tilde),
            d: lin(&self.d, &other.d),
            d_tilde: lin(&self.d_tilde, &other.d_tilde),
            q: lin(&self.q, &other.q),
            q_tilde: lin(&self.q_tilde, &other.q_tilde),
            r: lin(&self.r, &other.r),
            r_tilde: lin(&self.r_tilde, &other.r_tilde),
            g: &self.g * alpha + &other.g * beta,
            g_tilde: &self.g_tilde * alpha + &other.g_tilde * beta,
            gamma1: self.gamma1 * alpha + other.gamma1 * beta,
            gamma2: &self.gamma2 * alpha + &other.gamma2 * beta,
            drift: linv(&self.drift, &other.drift),
            diffusion: linv(&self.diffusion, &other.diffusion),
            x0: &self.x0 * alpha + &other.x0 * beta,
        }
    }

    /// Fails with the first validation issue, if any.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        match report.issues.first() {
            None => Ok(()),
            Some(i) => Err(Error::Invalid(i.to_string())),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let file: ProblemFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Json(e.into_inner())
            } else {
                Error::Invalid(format!("field {path}: {}", e.into_inner()))
            }
        })?;
        file.into_spec()
    }

    pub fn from_json_file(path: &FsPath) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemFile::from_spec(self))?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IssueKind {
    Asymmetric,
    DimensionMismatch,
    NonFinite,
    CellCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub field: String,
    pub cell: Option<usize>,
    pub kind: IssueKind,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "field {}", self.field)?;
        if let Some(k) = self.cell {
            write!(f, " at cell {k}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn flags(&self, field: &str, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.field == field && i.kind == kind)
    }
}

/// Lists every violated invariant: dimensions, cell counts, symmetry of the
/// weights, finiteness.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let (n, m, steps) = (spec.n, spec.m, spec.grid.steps());
    let mut push = |field: &str, cell: Option<usize>, kind: IssueKind, detail: String| {
        issues.push(Issue { field: field.to_string(), cell, kind, detail });
    };
    let shapes = |name: &str| match name {
        "A" | "A_tilde" | "C" | "C_tilde" | "Q" | "Q_tilde" => (n, n),
        "B" | "B_tilde" | "D" | "D_tilde" => (n, m),
        _ => (m, m),
    };
    for (name, path) in spec.mat_fields() {
        let want = shapes(name);
        let len = path.cells().len();
        if len != 1 && len != steps {
            push(name, None, IssueKind::CellCount, format!("{len} cells on a {steps}-step grid"));
        }
        let sym = matches!(name, "Q" | "Q_tilde" | "R" | "R_tilde");
        for (k, mat) in path.cells().iter().enumerate() {
            let cell = if path.is_constant() { None } else { Some(k) };
            if mat.shape() != want {
                push(name, cell, IssueKind::DimensionMismatch, format!("shape {:?}, expected {:?}", mat.shape(), want));
                continue;
            }
            if mat.iter().any(|x| !x.is_finite()) {
                push(name, cell, IssueKind::NonFinite, "non-finite entry".into());
            }
            if sym {
                let a = asymmetry(mat);
                if a > SYM_TOL {
                    push(name, cell, IssueKind::Asymmetric, format!("asymmetric (relative {a:.3e})"));
                }
            }
        }
    }
    for (name, mat) in [("G", &spec.g), ("G_tilde", &spec.g_tilde)] {
        if mat.shape() != (n, n) {
            push(name, None, IssueKind::DimensionMismatch, format!("shape {:?}, expected {:?}", mat.shape(), (n, n)));
            continue;
        }
        if mat.iter().any(|x| !x.is_finite()) {
            push(name, None, IssueKind::NonFinite, "non-finite entry".into());
        }
        let a = asymmetry(mat);
        if a > SYM_TOL {
            push(name, None, IssueKind::Asymmetric, format!("asymmetric (relative {a:.3e})"));
        }
    }
    for (name, path) in [("b", &spec.drift), ("sigma", &spec.diffusion)] {
        let len = path.cells().len();
        if len != 1 && len != steps {
            push(name, None, IssueKind::CellCount, format!("{len} cells on a {steps}-step grid"));
        }
        for (k, v) in path.cells().iter().enumerate() {
            let cell = if path.is_constant() { None } else { Some(k) };
            if v.len() != n {
                push(name, cell, IssueKind::DimensionMismatch, format!("length {}, expected {n}", v.len()));
            } else if v.iter().any(|x| !x.is_finite()) {
                push(name, cell, IssueKind::NonFinite, "non-finite entry".into());
            }
        }
    }
    for (name, v) in [("gamma2", &spec.gamma2), ("x0", &spec.x0)] {
        if v.len() != n {
            push(name, None, IssueKind::DimensionMismatch, format!("length {}, expected {n}", v.len()));
        } else if v.iter().any(|x| !x.is_finite()) {
            push(name, None, IssueKind::NonFinite, "non-finite entry".into());
        }
    }
    if !spec.gamma1.is_finite() {
        push("gamma1", None, IssueKind::NonFinite, "non-finite".into());
    }
    ValidationReport { issues }
}

/// 𝒜 = A+Ã and the other script aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedCoeffs {
    pub a: MatPath,
    pub b: MatPath,
    pub c: MatPath,
    pub d: MatPath,
    pub q: MatPath,
    pub r: MatPath,
    pub g: DMatrix<f64>,
}

pub fn aggregate(spec: &ProblemSpec) -> AggregatedCoeffs {
    let sum = |x: &MatPath, y: &MatPath| x.zip_with(y, |p, q| p + q);
    AggregatedCoeffs {
        a: sum(&spec.a, &spec.a_tilde),
        b: sum(&spec.b, &spec.b_tilde),
        c: sum(&spec.c, &spec.c_tilde),
        d: sum(&spec.d, &spec.d_tilde),
        q: sum(&spec.q, &spec.q_tilde),
        r: sum(&spec.r, &spec.r_tilde),
        g: &spec.g + &spec.g_tilde,
    }
}

/// Composite weights Q₁..Q₄ built from 𝒫₁ (values at grid nodes).
#[derive(Clone, Debug, PartialEq)]
pub struct QCoeffs {
    pub q1: Vec<DMatrix<f64>>,
    pub q2: Vec<DMatrix<f64>>,
    pub q3: Vec<DMatrix<f64>>,
    pub q4: Vec<DMatrix<f64>>,
}

/// Q₁..Q₄ at one instant, given the cell's coefficients and 𝒫₁.
pub fn q_coeffs_at(spec: &ProblemSpec, cell: usize, p1: &DMatrix<f64>) -> [DMatrix<f64>; 4] {
    let ct = spec.c.at(cell).transpose();
    let cross_x = &ct * p1 * spec.c_tilde.at(cell) + p1 * spec.a_tilde.at(cell);
    let cross_u = &ct * p1 * spec.d_tilde.at(cell) + p1 * spec.b_tilde.at(cell);
    let q1 = -(spec.q.at(cell) + &cross_x);
    let q2 = -(spec.q_tilde.at(cell) - &cross_x);
    let q3 = -cross_u.clone();
    let q4 = cross_u;
    [q1, q2, q3, q4]
}

pub fn build_q_coeffs(spec: &ProblemSpec, cp1: &crate::riccati::BackwardOdeSolution) -> Result<QCoeffs> {
    if !cp1.grid.same_as(&spec.grid) {
        return Err(Error::GridMismatch { expected: spec.grid.steps(), found: cp1.grid.steps() });
    }
    let mut out = QCoeffs { q1: vec![], q2: vec![], q3: vec![], q4: vec![] };
    for (k, p1) in cp1.values.iter().enumerate() {
        let [q1, q2, q3, q4] = q_coeffs_at(spec, spec.grid.cell_of_node(k), p1);
        out.q1.push(q1);
        out.q2.push(q2);
        out.q3.push(q3);
        out.q4.push(q4);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON problem files

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Constant(Vec<Vec<f64>>),
    PerCell(Vec<Vec<Vec<f64>>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorInput {
    Constant(Vec<f64>),
    PerCell(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// On-disk layout. See `docs/problem-format.md`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<ScalarOrVec>,
    #[serde(default, rename = "A", skip_serializing_if = "Option::is_none")]
    pub a: Option<MatrixInput>,
    #[serde(default, rename = "A_tilde", skip_serializing_if = "Option::is_none")]
    pub a_tilde: Option<MatrixInput>,
    #[serde(default, rename = "B", skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixInput>,
    #[serde(default, rename = "B_tilde", skip_serializing_if = "Option::is_none")]
    pub b_tilde: Option<MatrixInput>,
    #[serde(default, rename = "C", skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixInput>,
    #[serde(default, rename = "C_tilde", skip_serializing_if = "Option::is_none")]
    pub c_tilde: Option<MatrixInput>,
    #[serde(default, rename = "D", skip_serializing_if = "Option::is_none")]
    pub d: Option<MatrixInput>,
    #[serde(default, rename = "D_tilde", skip_serializing_if = "Option::is_none")]
    pub d_tilde: Option<MatrixInput>,
    #[serde(default, rename = "Q", skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixInput>,
    #[serde(default, rename = "Q_tilde", skip_serializing_if = "Option::is_none")]
    pub q_tilde: Option<MatrixInput>,
    #[serde(default, rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<MatrixInput>,
    #[serde(default, rename = "R_tilde", skip_serializing_if = "Option::is_none")]
    pub r_tilde: Option<MatrixInput>,
    #[serde(default, rename = "G", skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "G_tilde", skip_serializing_if = "Option::is_none")]
    pub g_tilde: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<ScalarOrVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_drift: Option<VectorInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<VectorInput>,
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Invalid(format!("field {field}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn mat_path(field: &str, input: &Option<MatrixInput>, r: usize, c: usize) -> Result<MatPath> {
    match input {
        None => Ok(MatPath::zeros(r, c)),
        Some(MatrixInput::Constant(rows)) => Ok(MatPath::constant(rows_to_matrix(field, rows)?)),
        Some(MatrixInput::PerCell(cells)) => {
            if cells.is_empty() {
                return Err(Error::Invalid(format!("field {field}: empty per-cell array")));
            }
            let v = cells.iter().map(|rows| rows_to_matrix(field, rows)).collect::<Result<Vec<_>>>()?;
            Ok(MatPath::per_cell(v))
        }
    }
}

fn vec_path(field: &str, input: &Option<VectorInput>, n: usize) -> Result<VecPath> {
    match input {
        None => Ok(VecPath::zeros_vec(n)),
        Some(VectorInput::Constant(v)) => Ok(VecPath::constant(DVector::from_vec(v.clone()))),
        Some(VectorInput::PerCell(cells)) => {
            if cells.is_empty() {
                return Err(Error::Invalid(format!("field {field}: empty per-cell array")));
            }
            Ok(VecPath::per_cell(cells.iter().map(|v| DVector::from_vec(v.clone())).collect()))
        }
    }
}

fn vector(input: &Option<ScalarOrVec>, n: usize) -> DVector<f64> {
    match input {
        None => DVector::zeros(n),
        Some(ScalarOrVec::Scalar(x)) => DVector::from_element(n, *x),
        Some(ScalarOrVec::Vector(v)) => DVector::from_vec(v.clone()),
    }
}

fn mat_out(p: &MatPath) -> Option<MatrixInput> {
    if p.cells().iter().all(|m| m.iter().all(|x| *x == 0.0)) {
        return None;
    }
    Some(if p.is_constant() {
        MatrixInput::Constant(matrix_to_rows(p.at(0)))
    } else {
        MatrixInput::PerCell(p.cells().iter().map(matrix_to_rows).collect())
    })
}

fn vec_out(p: &VecPath) -> Option<VectorInput> {
    if p.cells().iter().all(|v| v.iter().all(|x| *x == 0.0)) {
        return None;
    }
    Some(if p.is_constant() {
        VectorInput::Constant(p.at(0).iter().cloned().collect())
    } else {
        VectorInput::PerCell(p.cells().iter().map(|v| v.iter().cloned().collect()).collect())
    })
}

impl ProblemFile {
    pub fn into_spec(self) -> Result<ProblemSpec> {
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(Error::Invalid("dimensions n and m must be positive".into()));
        }
        let g = match &self.g {
            None => DMatrix::zeros(n, n),
            Some(rows) => rows_to_matrix("G", rows)?,
        };
        let g_tilde = match &self.g_tilde {
            None => DMatrix::zeros(n, n),
            Some(rows) => rows_to_matrix("G_tilde", rows)?,
        };
        let spec = ProblemSpec {
            grid,
            n,
            m,
            a: mat_path("A", &self.a, n, n)?,
            a_tilde: mat_path("A_tilde", &self.a_tilde, n, n)?,
            b: mat_path("B", &self.b, n, m)?,
            b_tilde: mat_path("B_tilde", &self.b_tilde, n, m)?,
            c: mat_path("C", &self.c, n, n)?,
            c_tilde: mat_path("C_tilde", &self.c_tilde, n, n)?,
            d: mat_path("D", &self.d, n, m)?,
            d_tilde: mat_path("D_tilde", &self.d_tilde, n, m)?,
            q: mat_path("Q", &self.q, n, n)?,
            q_tilde: mat_path("Q_tilde", &self.q_tilde, n, n)?,
            r: mat_path("R", &self.r, m, m)?,
            r_tilde: mat_path("R_tilde", &self.r_tilde, m, m)?,
            g,
            g_tilde,
            gamma1: self.gamma1.unwrap_or(0.0),
            gamma2: vector(&self.gamma2, n),
            drift: vec_path("b_drift", &self.b_drift, n)?,
            diffusion: vec_path("sigma", &self.sigma, n)?,
            x0: vector(&self.x0, n),
        };
        Ok(spec)
    }

    pub fn from_spec(s: &ProblemSpec) -> Self {
        let nz = |m: &DMatrix<f64>| (m.iter().any(|x| *x != 0.0)).then(|| matrix_to_rows(m));
        let nzv = |v: &DVector<f64>| (v.iter().any(|x| *x != 0.0)).then(|| ScalarOrVec::Vector(v.iter().cloned().collect()));
        Self {
            n: s.n,
            m: s.m,
            horizon: s.grid.horizon(),
            steps: s.grid.steps(),
            x0: nzv(&s.x0),
            a: mat_out(&s.a),
            a_tilde: mat_out(&s.a_tilde),
            b: mat_out(&s.b),
            b_tilde: mat_out(&s.b_tilde),
            c: mat_out(&s.c),
            c_tilde: mat_out(&s.c_tilde),
            d: mat_out(&s.d),
            d_tilde: mat_out(&s.d_tilde),
            q: mat_out(&s.q),
            q_tilde: mat_out(&s.q_tilde),
            r: mat_out(&s.r),
            r_tilde: mat_out(&s.r_tilde),
            g: nz(&s.g),
            g_tilde: nz(&s.g_tilde),
            gamma1: (s.gamma1 != 0.0).then_some(s.gamma1),
            gamma2: nzv(&s.gamma2),
            b_drift: vec_out(&s.drift),
            sigma: vec_out(&s.diffusion),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn grid_step_times_steps() {
        for steps in [2, 3, 7, 40, 256, 1000] {
            for horizon in [1.0, 0.3, 2.5, 7.1] {
                let g = TimeGrid::new(horizon, steps).unwrap();
                let prod = g.step_size() * steps as f64;
                assert!((prod - horizon).abs() <= f64::EPSILON * horizon);
            }
        }
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }

    #[test]
    fn node_alignment() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        assert_eq!(g.node_of(0.25).unwrap(), 10);
        assert_eq!(g.node_of(1.0).unwrap(), 40);
        assert!(g.node_of(0.0123).is_err());
    }

    #[test]
    fn symmetric_q_passes() {
        let mut spec = ProblemSpec::zeros(2, 2, TimeGrid::new(1.0, 4).unwrap());
        spec.q = MatPath::constant(m2(1.0, 0.5, 0.5, 2.0));
        assert!(validate(&spec).is_empty());
    }

    #[test]
    fn asymmetric_r_flagged_per_cell() {
        let mut spec = ProblemSpec::zeros(2, 2, TimeGrid::new(1.0, 4).unwrap());
        let bad = m2(0.0, 1.0, 0.0, 0.0);
        spec.r = MatPath::per_cell(vec![DMatrix::identity(2, 2), bad.clone(), DMatrix::identity(2, 2), bad]);
        let rep = validate(&spec);
        assert!(rep.flags("R", IssueKind::Asymmetric));
        let cells: Vec<_> = rep.issues.iter().filter_map(|i| i.cell).collect();
        assert_eq!(cells, vec![1, 3]);
    }

    #[test]
    fn b_shape_mismatch_flagged() {
        let mut spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, 4).unwrap());
        spec.b = MatPath::constant(DMatrix::zeros(2, 2));
        assert!(validate(&spec).flags("B", IssueKind::DimensionMismatch));
    }

    #[test]
    fn non_finite_flagged() {
        let mut spec = ProblemSpec::scalar(1.0, 4).unwrap();
        spec.a = MatPath::scalar(f64::NAN);
        assert!(validate(&spec).flags("A", IssueKind::NonFinite));
    }

    #[test]
    fn aggregate_examples() {
        let mut spec = ProblemSpec::scalar(1.0, 4).unwrap();
        spec.a = MatPath::scalar(0.5);
        assert_eq!(aggregate(&spec).a.at(0), spec.a.at(0));
        spec.a_tilde = MatPath::scalar(0.5);
        assert_eq!(aggregate(&spec).a.at(0)[(0, 0)], 1.0);
        let mm = m2(1.0, -2.0, 3.0, 0.25);
        let mut s2 = ProblemSpec::zeros(2, 2, TimeGrid::new(1.0, 4).unwrap());
        s2.b = MatPath::constant(mm.clone());
        s2.b_tilde = MatPath::constant(-mm);
        assert_eq!(aggregate(&s2).b.at(0).norm(), 0.0);
    }

    #[test]
    fn q_coeffs_without_mean_field() {
        let mut spec = ProblemSpec::scalar(1.0, 4).unwrap();
        spec.q = MatPath::scalar(2.0);
        spec.q_tilde = MatPath::scalar(3.0);
        spec.c = MatPath::scalar(0.7);
        let [q1, q2, q3, q4] = q_coeffs_at(&spec, 0, &s(-1.3));
        assert_eq!(q1[(0, 0)], -2.0);
        assert_eq!(q2[(0, 0)], -3.0);
        assert_eq!(q3[(0, 0)], 0.0);
        assert_eq!(q4[(0, 0)], 0.0);
    }

    #[test]
    fn q_coeffs_hand_value() {
        let mut spec = ProblemSpec::scalar(1.0, 4).unwrap();
        spec.c = MatPath::scalar(1.0);
        spec.c_tilde = MatPath::scalar(1.0);
        let [q1, q2, ..] = q_coeffs_at(&spec, 0, &s(-1.0));
        assert_eq!(q1[(0, 0)], 1.0);
        assert_eq!(q2[(0, 0)], -1.0);
    }

    #[test]
    fn q_coeffs_zero_data() {
        let spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, 4).unwrap());
        for q in q_coeffs_at(&spec, 0, &m2(-1.0, 0.2, 0.2, -3.0)) {
            assert_eq!(q.norm(), 0.0);
        }
    }

    #[test]
    fn json_defaults_and_roundtrip() {
        let text = r#"{"n":1,"m":1,"horizon":1.0,"steps":10,"A":[[0.5]],"R":[[1.0]],
                       "Q":[[[1.0]],[[1.0]],[[1.0]],[[1.0]],[[1.0]],[[2.0]],[[2.0]],[[2.0]],[[2.0]],[[2.0]]],
                       "sigma":[0.3],"x0":1.0}"#;
        let spec = ProblemSpec::from_json_str(text).unwrap();
        assert!(validate(&spec).is_empty());
        assert_eq!(spec.q.at(7)[(0, 0)], 2.0);
        assert_eq!(spec.b.at(0)[(0, 0)], 0.0);
        let back = ProblemSpec::from_json_str(&spec.to_json_string().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn json_unknown_field_rejected() {
        assert!(ProblemSpec::from_json_str(r#"{"n":1,"m":1,"horizon":1,"steps":4,"Z":[[1]]}"#).is_err());
    }

    #[test]
    fn regrid_holds_values() {
        let mut spec = ProblemSpec::scalar(1.0, 4).unwrap();
        spec.a = MatPath::per_cell(vec![s(1.0), s(2.0), s(3.0), s(4.0)]);
        let fine = spec.regrid(8).unwrap();
        let vals: Vec<f64> = (0..8).map(|k| fine.a.at(k)[(0, 0)]).collect();
        assert_eq!(vals, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    fn arb_scalar_spec() -> impl Strategy<Value = ProblemSpec> {
        proptest::collection::vec(-1.0f64..1.0, 12).prop_map(|v| {
            let mut s = ProblemSpec::scalar(1.0, 4).unwrap();
            s.a = MatPath::scalar(v[0]);
            s.a_tilde = MatPath::scalar(v[1]);
            s.b = MatPath::scalar(v[2]);
            s.b_tilde = MatPath::scalar(v[3]);
            s.c = MatPath::scalar(v[4]);
            s.c_tilde = MatPath::scalar(v[5]);
            s.d = MatPath::scalar(v[6]);
            s.d_tilde = MatPath::scalar(v[7]);
            s.q = MatPath::scalar(v[8]);
            s.q_tilde = MatPath::scalar(v[9]);
            s.r = MatPath::scalar(v[10]);
            s.r_tilde = MatPath::scalar(v[11]);
            s
        })
    }

    proptest! {
        #[test]
        fn aggregate_is_linear(s1 in arb_scalar_spec(), s2 in arb_scalar_spec(), al in -2.0f64..2.0, be in -2.0f64..2.0) {
            let lhs = aggregate(&s1.combine(al, &s2, be));
            let (a1, a2) = (aggregate(&s1), aggregate(&s2));
            let pairs = [(&lhs.a, &a1.a, &a2.a), (&lhs.b, &a1.b, &a2.b), (&lhs.c, &a1.c, &a2.c),
                         (&lhs.d, &a1.d, &a2.d), (&lhs.q, &a1.q, &a2.q), (&lhs.r, &a1.r, &a2.r)];
            for (l, x, y) in pairs {
                let rhs = x.at(0) * al + y.at(0) * be;
                prop_assert!((l.at(0) - rhs).norm() <= 1e-14);
            }
        }

        #[test]
        fn q3_plus_q4_vanishes(s in arb_scalar_spec(), p in -5.0f64..5.0) {
            let [_, _, q3, q4] = q_coeffs_at(&s, 0, &DMatrix::from_element(1, 1, p));
            prop_assert!((q3 + q4).norm() <= 1e-14);
        }
    }
}
