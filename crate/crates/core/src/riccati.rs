//! Backward RK4 sweeps for the adjoint, representation and equilibrium
//! systems, with the feedback gain recomputed algebraically at every stage.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eig_sym, pinv_solve, symmetrize};
use crate::model::{aggregate, q_coeffs_at, AggregatedCoeffs, ProblemSpec, TimeGrid, VecPath};

pub use crate::linalg::pinv_apply;

/// Where inside a cell an RK4 stage is evaluated (sweeping from `End` to `Start`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Start,
    Mid,
    End,
}

/// A path sampled at grid nodes, with dense midpoint values so downstream
/// sweeps can evaluate it at RK4 stages without losing order.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardOdeSolution {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
    pub mid: Vec<DMatrix<f64>>,
    pub label: String,
}

impl BackwardOdeSolution {
    pub fn at(&self, cell: usize, stage: Stage) -> &DMatrix<f64> {
        match stage {
            Stage::Start => &self.values[cell],
            Stage::Mid => &self.mid[cell],
            Stage::End => &self.values[cell + 1],
        }
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().expect("non-empty solution")
    }

    /// Max-abs difference over nodes.
    pub fn max_gap(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|a| a.abs().max()).fold(0.0, f64::max)
    }

    /// Every `factor`-th node of a fine solution (factor even, so that the
    /// coarse midpoints are fine nodes).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || factor % 2 == 1 && factor != 1 || !self.grid.steps().is_multiple_of(factor) {
            return Err(Error::Grid(format!("cannot coarsen {} steps by {factor}", self.grid.steps())));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let steps = self.grid.steps() / factor;
        Ok(Self {
            grid: TimeGrid::new(self.grid.horizon(), steps)?,
            values: (0..=steps).map(|k| self.values[k * factor].clone()).collect(),
            mid: (0..steps).map(|k| self.values[k * factor + factor / 2].clone()).collect(),
            label: self.label.clone(),
        })
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.grid.same_as(grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch { expected: grid.steps(), found: self.grid.steps() })
        }
    }
}

/// Classical RK4 backward from the terminal values. `deriv(cell, stage, y)`
/// returns dy/ds. Components listed in `sym` are symmetrized after each step.
fn sweep<F>(grid: &TimeGrid, terminal: Vec<DMatrix<f64>>, labels: &[&str], sym: &[usize], mut deriv: F) -> Result<Vec<BackwardOdeSolution>>
where
    F: FnMut(usize, Stage, &[DMatrix<f64>]) -> Vec<DMatrix<f64>>,
{
    let n = grid.steps();
    let h = grid.step_size();
    let ncomp = terminal.len();
    let mut nodes: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n + 1];
    let mut mids: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n];
    nodes[n] = terminal;
    let axpy = |y: &[DMatrix<f64>], a: f64, k: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
        y.iter().zip(k).map(|(y, k)| y + k * a).collect()
    };
    for cell in (0..n).rev() {
        let y1 = &nodes[cell + 1];
        let k1 = deriv(cell, Stage::End, y1);
        let k2 = deriv(cell, Stage::Mid, &axpy(y1, -0.5 * h, &k1));
        let k3 = deriv(cell, Stage::Mid, &axpy(y1, -0.5 * h, &k2));
        let k4 = deriv(cell, Stage::Start, &axpy(y1, -h, &k3));
        let mut y0: Vec<DMatrix<f64>> = (0..ncomp)
            .map(|i| &y1[i] - (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0))
            .collect();
        for &i in sym {
            symmetrize(&mut y0[i]);
        }
        for (i, y) in y0.iter().enumerate() {
            if y.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: labels[i].to_string(), node: cell });
            }
        }
        // cubic Hermite midpoint
        let f0 = deriv(cell, Stage::Start, &y0);
        let mut mid: Vec<DMatrix<f64>> = (0..ncomp)
            .map(|i| (&y0[i] + &y1[i]) * 0.5 + (&f0[i] - &k1[i]) * (h / 8.0))
            .collect();
        for &i in sym {
            symmetrize(&mut mid[i]);
        }
        mids[cell] = mid;
        nodes[cell] = y0;
    }
    let mut out: Vec<BackwardOdeSolution> = labels
        .iter()
        .map(|l| BackwardOdeSolution { grid: *grid, values: Vec::with_capacity(n + 1), mid: Vec::with_capacity(n), label: l.to_string() })
        .collect();
    for node in nodes {
        for (i, v) in node.into_iter().enumerate() {
            out[i].values.push(v);
        }
    }
    for mid in mids {
        for (i, v) in mid.into_iter().enumerate() {
            out[i].mid.push(v);
        }
    }
    Ok(out)
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// dY₀ = −𝒜ᵀY₀ ds, Y₀(T) = −I.
pub fn solve_y0(spec: &ProblemSpec) -> Result<BackwardOdeSolution> {
    let agg = aggregate(spec);
    let terminal = vec![-DMatrix::identity(spec.n, spec.n)];
    let mut out = sweep(&spec.grid, terminal, &["Y0"], &[], |cell, _, y| vec![-(agg.a.at(cell).transpose() * &y[0])])?;
    Ok(out.remove(0))
}

fn hat_p1_deriv(spec: &ProblemSpec, cell: usize, p: &DMatrix<f64>) -> DMatrix<f64> {
    let a = spec.a.at(cell);
    let c = spec.c.at(cell);
    -(p * a + a.transpose() * p + c.transpose() * p * c - spec.q.at(cell))
}

/// dP̂₁ = −[P̂₁A + AᵀP̂₁ + CᵀP̂₁C − Q]ds, P̂₁(T) = −G; symmetrized each step.
pub fn solve_hat_p1(spec: &ProblemSpec) -> Result<BackwardOdeSolution> {
    let mut out = sweep(&spec.grid, vec![-spec.g.clone()], &["P1_hat"], &[0], |cell, _, y| vec![hat_p1_deriv(spec, cell, &y[0])])?;
    Ok(out.remove(0))
}

/// The P̂₂ companion of P̂₁, terminal −G̃.
pub fn solve_hat_p2(spec: &ProblemSpec, hat_p1: &BackwardOdeSolution) -> Result<BackwardOdeSolution> {
    hat_p1.check_grid(&spec.grid)?;
    let agg = aggregate(spec);
    let mut out = sweep(&spec.grid, vec![-spec.g_tilde.clone()], &["P2_hat"], &[], |cell, stage, y| {
        let p1 = hat_p1.at(cell, stage);
        vec![p2_deriv(spec, &agg, cell, &y[0], p1)]
    })?;
    Ok(out.remove(0))
}

fn p2_deriv(spec: &ProblemSpec, agg: &AggregatedCoeffs, cell: usize, p2: &DMatrix<f64>, p1: &DMatrix<f64>) -> DMatrix<f64> {
    let sa = agg.a.at(cell);
    let at = spec.a_tilde.at(cell);
    let ct = spec.c_tilde.at(cell);
    let c = spec.c.at(cell);
    -(p2 * sa + sa.transpose() * p2 + p1 * at + at.transpose() * p1 + ct.transpose() * p1 * agg.c.at(cell) + c.transpose() * p1 * ct
        - spec.q_tilde.at(cell))
}

/// Coefficients 𝒫₁..𝒫₄ of the adjoint representation for a deterministic
/// open-loop control.
#[derive(Clone, Debug)]
pub struct ReprCoeffs {
    pub p1: BackwardOdeSolution,
    pub p2: BackwardOdeSolution,
    pub p3: BackwardOdeSolution,
    pub p4: BackwardOdeSolution,
}

pub fn solve_repr_coeffs(spec: &ProblemSpec, control: &VecPath) -> Result<ReprCoeffs> {
    let p1 = solve_hat_p1(spec)?;
    let p2 = solve_hat_p2(spec, &p1)?;
    let agg = aggregate(spec);
    let n = spec.n;
    let terminal = vec![DMatrix::zeros(n, 1), -col(&spec.gamma2)];
    let mut out = sweep(&spec.grid, terminal, &["P3_repr", "P4_repr"], &[], |cell, stage, y| {
        let c1 = p1.at(cell, stage);
        let c2 = p2.at(cell, stage);
        let u = col(control.at(cell));
        let b = col(spec.drift.at(cell));
        let sig = col(spec.diffusion.at(cell));
        let c = spec.c.at(cell);
        let d3 = -(agg.a.at(cell).transpose() * &y[0]
            + spec.a_tilde.at(cell).transpose() * &y[1]
            + c1 * spec.b_tilde.at(cell) * &u
            + c2 * (agg.b.at(cell) * &u + &b)
            + spec.c_tilde.at(cell).transpose() * c1 * (agg.d.at(cell) * &u + &sig)
            + c.transpose() * c1 * spec.d_tilde.at(cell) * &u);
        let d4 = -(spec.a.at(cell).transpose() * &y[1] + c1 * (spec.b.at(cell) * &u + &b) + c.transpose() * c1 * (spec.d.at(cell) * &u + &sig));
        vec![d3, d4]
    })?;
    let p4 = out.pop().unwrap();
    let p3 = out.pop().unwrap();
    Ok(ReprCoeffs { p1, p2, p3, p4 })
}

#[derive(Clone, Debug, Serialize)]
pub struct SecondOrderReport {
    pub margin: Vec<f64>,
    pub min_margin: f64,
    pub pass: bool,
}

/// Tolerance on the second-order margin.
pub const MARGIN_TOL: f64 = 1e-10;

/// λ_min(ℛ − 𝒟ᵀP̂₁𝒟) at every node; passes iff ≥ −1e-10 everywhere.
pub fn check_second_order(spec: &ProblemSpec, hat_p1: &BackwardOdeSolution) -> Result<SecondOrderReport> {
    check_second_order_with(spec, hat_p1, MARGIN_TOL)
}

pub fn check_second_order_with(spec: &ProblemSpec, hat_p1: &BackwardOdeSolution, tol: f64) -> Result<SecondOrderReport> {
    hat_p1.check_grid(&spec.grid)?;
    let agg = aggregate(spec);
    let margin: Vec<f64> = hat_p1
        .values
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let cell = spec.grid.cell_of_node(k);
            let d = agg.d.at(cell);
            min_eig_sym(&(agg.r.at(cell) - d.transpose() * p * d))
        })
        .collect();
    let min_margin = margin.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SecondOrderReport { pass: min_margin >= -tol, min_margin, margin })
}

/// Gain pair (Θ, φ) at every grid node; Θ at node k acts on cell k.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackLaw {
    pub grid: TimeGrid,
    pub theta: Vec<DMatrix<f64>>,
    pub phi: Vec<DVector<f64>>,
}

impl FeedbackLaw {
    pub fn zeros(grid: TimeGrid, n: usize, m: usize) -> Self {
        Self { grid, theta: vec![DMatrix::zeros(m, n); grid.steps() + 1], phi: vec![DVector::zeros(m); grid.steps() + 1] }
    }

    pub fn constant(grid: TimeGrid, theta: DMatrix<f64>, phi: DVector<f64>) -> Self {
        Self { grid, theta: vec![theta; grid.steps() + 1], phi: vec![phi; grid.steps() + 1] }
    }

    /// Same law sampled onto another grid over the same horizon (nearest node
    /// at or before each new node).
    pub fn resample(&self, to: &TimeGrid) -> Self {
        let pick = |k: usize| -> usize {
            let t = to.time(k) + 1e-12 * to.step_size();
            ((t / self.grid.step_size()).floor() as usize).min(self.grid.steps())
        };
        Self {
            grid: *to,
            theta: (0..=to.steps()).map(|k| self.theta[pick(k)].clone()).collect(),
            phi: (0..=to.steps()).map(|k| self.phi[pick(k)].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RangeFlags {
    pub theta: bool,
    pub phi: bool,
}

#[derive(Clone, Debug)]
pub struct EquilibriumSolution {
    pub y0: BackwardOdeSolution,
    pub hat_p1: BackwardOdeSolution,
    pub p1: BackwardOdeSolution,
    pub p2: BackwardOdeSolution,
    pub p3: BackwardOdeSolution,
    pub p4: BackwardOdeSolution,
    pub law: FeedbackLaw,
    pub range: Vec<RangeFlags>,
    pub second_order: SecondOrderReport,
    /// Max relative asymmetry of P₁* over nodes (reported, not corrected).
    pub p1_asymmetry: f64,
}

impl EquilibriumSolution {
    pub fn range_ok(&self) -> bool {
        self.range.iter().all(|r| r.theta && r.phi)
    }

    pub fn range_failures(&self) -> usize {
        self.range.iter().filter(|r| !(r.theta && r.phi)).count()
    }
}

/// ℛ − 𝒟ᵀP₁𝒟 at one instant.
pub fn weight_matrix(agg: &AggregatedCoeffs, cell: usize, p1: &DMatrix<f64>) -> DMatrix<f64> {
    let d = agg.d.at(cell);
    agg.r.at(cell) - d.transpose() * p1 * d
}

/// Right-hand sides of the two gain relations.
pub fn gain_rhs(
    spec: &ProblemSpec,
    agg: &AggregatedCoeffs,
    cell: usize,
    y0: &DMatrix<f64>,
    p: [&DMatrix<f64>; 4],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let [p1, p2, p3, p4] = p;
    let bt = agg.b.at(cell).transpose();
    let dt = agg.d.at(cell).transpose();
    let rt = &bt * (p1 + p2 + y0 * spec.gamma1) + &dt * p1 * agg.c.at(cell);
    let rp = &bt * (p3 + p4) + &dt * p1 * col(spec.diffusion.at(cell));
    (rt, rp)
}

fn gains(
    spec: &ProblemSpec,
    agg: &AggregatedCoeffs,
    cell: usize,
    y0: &DMatrix<f64>,
    p: [&DMatrix<f64>; 4],
) -> (DMatrix<f64>, DMatrix<f64>, RangeFlags) {
    let w = weight_matrix(agg, cell, p[0]);
    let (rt, rp) = gain_rhs(spec, agg, cell, y0, p);
    let (theta, ok_t) = pinv_solve(&w, &rt);
    let (phi, ok_p) = pinv_solve(&w, &rp);
    (theta, phi, RangeFlags { theta: ok_t, phi: ok_p })
}

/// Generator of the equilibrium system for given gains. `cp1` is 𝒫₁ (= P̂₁).
#[allow(clippy::too_many_arguments)]
fn equilibrium_deriv(
    spec: &ProblemSpec,
    agg: &AggregatedCoeffs,
    cell: usize,
    cp1: &DMatrix<f64>,
    y: &[DMatrix<f64>],
    theta: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let [q1, q2, q3, q4] = q_coeffs_at(spec, cell, cp1);
    let (p1, p2, p3, p4) = (&y[0], &y[1], &y[2], &y[3]);
    let (a, at, c, ct) = (spec.a.at(cell), spec.a_tilde.at(cell), spec.c.at(cell), spec.c_tilde.at(cell));
    let (sa, sb, sc, sd) = (agg.a.at(cell), agg.b.at(cell), agg.c.at(cell), agg.d.at(cell));
    let b = col(spec.drift.at(cell));
    let sig = col(spec.diffusion.at(cell));
    let closed_c = sc + sd * theta;
    let d1 = -(p1 * sa + p1 * sb * theta + a.transpose() * p1 + c.transpose() * p1 * &closed_c + &q1 + &q3 * theta);
    let d2 = -(p2 * sa + p2 * sb * theta + sa.transpose() * p2 + at.transpose() * p1 + ct.transpose() * p1 * &closed_c + &q2 + &q4 * theta);
    let drive = sb * phi + &b;
    let noise = sd * phi + &sig;
    let d3 = -(sa.transpose() * p3 + at.transpose() * p4 + p2 * &drive + ct.transpose() * p1 * &noise + &q4 * phi);
    let d4 = -(a.transpose() * p4 + p1 * &drive + c.transpose() * p1 * &noise + &q3 * phi);
    vec![d1, d2, d3, d4]
}

fn eq_terminal(spec: &ProblemSpec) -> Vec<DMatrix<f64>> {
    vec![-spec.g.clone(), -spec.g_tilde.clone(), DMatrix::zeros(spec.n, 1), -col(&spec.gamma2)]
}

const EQ_LABELS: [&str; 4] = ["P1", "P2", "P3", "P4"];

/// Equilibrium system with the gain recomputed from stage values at every
/// RK4 stage. The (P₃, P₄) block is carried in the same sweep; it does not
/// feed back into (P₁, P₂).
pub fn solve_equilibrium_system(spec: &ProblemSpec) -> Result<EquilibriumSolution> {
    spec.ensure_valid()?;
    let agg = aggregate(spec);
    let y0 = solve_y0(spec)?;
    let hat_p1 = solve_hat_p1(spec)?;
    let mut sol = sweep(&spec.grid, eq_terminal(spec), &EQ_LABELS, &[], |cell, stage, y| {
        let y0s = y0.at(cell, stage);
        let (theta, phi, _) = gains(spec, &agg, cell, y0s, [&y[0], &y[1], &y[2], &y[3]]);
        equilibrium_deriv(spec, &agg, cell, hat_p1.at(cell, stage), y, &theta, &phi)
    })?;
    let p4 = sol.pop().unwrap();
    let p3 = sol.pop().unwrap();
    let p2 = sol.pop().unwrap();
    let p1 = sol.pop().unwrap();

    let mut law = FeedbackLaw { grid: spec.grid, theta: vec![], phi: vec![] };
    let mut range = vec![];
    for k in 0..=spec.grid.steps() {
        let cell = spec.grid.cell_of_node(k);
        let (theta, phi, flags) = gains(spec, &agg, cell, &y0.values[k], [&p1.values[k], &p2.values[k], &p3.values[k], &p4.values[k]]);
        if theta.iter().chain(phi.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "gain".into(), node: k });
        }
        law.theta.push(theta);
        law.phi.push(DVector::from_column_slice(phi.as_slice()));
        range.push(flags);
    }
    let second_order = check_second_order(spec, &hat_p1)?;
    let p1_asymmetry = p1.values.iter().map(crate::linalg::asymmetry).fold(0.0, f64::max);
    Ok(EquilibriumSolution { y0, hat_p1, p1, p2, p3, p4, law, range, second_order, p1_asymmetry })
}

/// The same system driven by a prescribed gain path (Θ, φ held constant on
/// each cell at the left-node value).
pub fn solve_fixed_gain_system(spec: &ProblemSpec, law: &FeedbackLaw) -> Result<[BackwardOdeSolution; 4]> {
    if !law.grid.same_as(&spec.grid) {
        return Err(Error::GridMismatch { expected: spec.grid.steps(), found: law.grid.steps() });
    }
    let agg = aggregate(spec);
    let hat_p1 = solve_hat_p1(spec)?;
    let phis: Vec<DMatrix<f64>> = law.phi.iter().map(col).collect();
    let sol = sweep(&spec.grid, eq_terminal(spec), &EQ_LABELS, &[], |cell, stage, y| {
        equilibrium_deriv(spec, &agg, cell, hat_p1.at(cell, stage), y, &law.theta[cell], &phis[cell])
    })?;
    let mut it = sol.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatPath, ProblemSpec};

    fn scalar(steps: usize) -> ProblemSpec {
        ProblemSpec::scalar(1.0, steps).unwrap()
    }

    fn s0(sol: &BackwardOdeSolution) -> f64 {
        sol.values[0][(0, 0)]
    }

    #[test]
    fn y0_zero_generator() {
        let sol = solve_y0(&scalar(8)).unwrap();
        assert!(sol.values.iter().all(|v| v[(0, 0)] == -1.0));
    }

    #[test]
    fn y0_exponential() {
        let mut spec = scalar(256);
        spec.a = MatPath::scalar(0.5);
        spec.a_tilde = MatPath::scalar(0.5);
        let sol = solve_y0(&spec).unwrap();
        assert!((s0(&sol) + std::f64::consts::E).abs() < 1e-10);
        assert_eq!(sol.terminal()[(0, 0)], -1.0);
    }

    #[test]
    fn y0_diagonal() {
        let mut spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, 200).unwrap());
        spec.a = MatPath::constant(DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, -0.7]));
        let sol = solve_y0(&spec).unwrap();
        assert!((sol.values[0][(0, 0)] + 0.3f64.exp()).abs() < 1e-10);
        assert!((sol.values[0][(1, 1)] + (-0.7f64).exp()).abs() < 1e-10);
        assert_eq!(sol.values[0][(0, 1)], 0.0);
    }

    #[test]
    fn hat_p1_examples() {
        let mut spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, 16).unwrap());
        spec.g = DMatrix::identity(2, 2);
        let sol = solve_hat_p1(&spec).unwrap();
        assert!(sol.values.iter().all(|v| *v == -DMatrix::<f64>::identity(2, 2)));

        let mut spec = scalar(256);
        spec.a = MatPath::scalar(1.0);
        spec.g = DMatrix::from_element(1, 1, 1.0);
        assert!((s0(&solve_hat_p1(&spec).unwrap()) + 2f64.exp()).abs() < 1e-9);

        let mut spec = scalar(256);
        spec.c = MatPath::scalar(1.0);
        spec.g = DMatrix::from_element(1, 1, 1.0);
        let sol = solve_hat_p1(&spec).unwrap();
        for (k, v) in sol.values.iter().enumerate() {
            let t = spec.grid.time(k);
            assert!((v[(0, 0)] + (1.0 - t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn hat_p1_symmetric() {
        let mut spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, 32).unwrap());
        spec.a = MatPath::constant(DMatrix::from_row_slice(2, 2, &[0.1, 0.9, -0.4, 0.2]));
        spec.c = MatPath::constant(DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.5, 0.1]));
        spec.q = MatPath::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]));
        spec.g = DMatrix::from_row_slice(2, 2, &[2.0, -0.3, -0.3, 1.0]);
        let sol = solve_hat_p1(&spec).unwrap();
        for v in &sol.values {
            assert_eq!(v, &v.transpose());
        }
    }

    #[test]
    fn hat_p2_examples() {
        let sol = solve_hat_p2(&scalar(8), &solve_hat_p1(&scalar(8)).unwrap()).unwrap();
        assert_eq!(sol.max_abs(), 0.0);

        let mut spec = scalar(64);
        spec.q_tilde = MatPath::scalar(1.0);
        let p1 = solve_hat_p1(&spec).unwrap();
        let sol = solve_hat_p2(&spec, &p1).unwrap();
        for (k, v) in sol.values.iter().enumerate() {
            assert!((v[(0, 0)] + (1.0 - spec.grid.time(k))).abs() < 1e-13);
        }
        assert!(solve_hat_p2(&spec, &solve_hat_p1(&scalar(8)).unwrap()).is_err());
    }

    fn random_instance(steps: usize) -> ProblemSpec {
        let mut spec = ProblemSpec::zeros(2, 1, TimeGrid::new(1.0, steps).unwrap());
        let m = |v: [f64; 4]| MatPath::constant(DMatrix::from_row_slice(2, 2, &v));
        spec.a = m([0.2, -0.5, 0.3, 0.1]);
        spec.a_tilde = m([-0.3, 0.4, 0.2, 0.6]);
        spec.c = m([0.4, 0.1, -0.2, 0.3]);
        spec.c_tilde = m([0.1, 0.5, 0.2, -0.4]);
        spec.q = m([1.0, 0.3, 0.3, 0.8]);
        spec.q_tilde = m([0.5, -0.1, -0.1, 0.4]);
        spec.g = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        spec.g_tilde = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.2]);
        spec
    }

    #[test]
    fn hat_p2_self_convergence_order_four() {
        let reference = {
            let s = random_instance(512);
            solve_hat_p2(&s, &solve_hat_p1(&s).unwrap()).unwrap().values[0].clone()
        };
        let err = |steps| {
            let s = random_instance(steps);
            (solve_hat_p2(&s, &solve_hat_p1(&s).unwrap()).unwrap().values[0].clone() - &reference).abs().max()
        };
        let ratio = err(16) / err(32);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn repr_coeffs_examples() {
        let spec = random_instance(32);
        let rc = solve_repr_coeffs(&spec, &VecPath::zeros_vec(1)).unwrap();
        assert_eq!(rc.p1.max_gap(&solve_hat_p1(&spec).unwrap()), 0.0);
        assert_eq!(rc.p3.max_abs(), 0.0);
        assert_eq!(rc.p4.max_abs(), 0.0);

        // scalar, u ≡ 1: 𝒫₄' = −[a𝒫₄ + 𝒫₁ B u], 𝒫₁ ≡ −g when a=c=q=0
        let mut spec = scalar(128);
        spec.b = MatPath::scalar(0.5);
        spec.g = DMatrix::from_element(1, 1, 2.0);
        spec.gamma2 = DVector::from_element(1, 0.3);
        let rc = solve_repr_coeffs(&spec, &VecPath::constant(DVector::from_element(1, 1.0))).unwrap();
        for (k, v) in rc.p4.values.iter().enumerate() {
            let t = spec.grid.time(k);
            let exact = -0.3 - 1.0 * (1.0 - t);
            assert!((v[(0, 0)] - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn second_order_examples() {
        let mut spec = scalar(8);
        spec.r = MatPath::scalar(1.0);
        let rep = check_second_order(&spec, &solve_hat_p1(&spec).unwrap()).unwrap();
        assert!(rep.pass && rep.margin.iter().all(|m| *m == 1.0));

        let mut spec = scalar(256);
        spec.d = MatPath::scalar(1.0);
        spec.c = MatPath::scalar(1.0);
        spec.g = DMatrix::from_element(1, 1, 1.0);
        let rep = check_second_order(&spec, &solve_hat_p1(&spec).unwrap()).unwrap();
        assert!(rep.pass);
        assert!((rep.margin[0] - 1f64.exp()).abs() < 1e-9);

        let mut spec = scalar(8);
        spec.r = MatPath::scalar(-2.0);
        spec.d = MatPath::scalar(1.0);
        spec.g = DMatrix::from_element(1, 1, -1.0);
        let rep = check_second_order(&spec, &solve_hat_p1(&spec).unwrap()).unwrap();
        assert!(!rep.pass);
        assert_eq!(*rep.margin.last().unwrap(), -3.0);
    }

    #[test]
    fn zero_problem_equilibrium() {
        let mut spec = ProblemSpec::zeros(2, 2, TimeGrid::new(1.0, 16).unwrap());
        spec.r = MatPath::constant(DMatrix::identity(2, 2));
        let eq = solve_equilibrium_system(&spec).unwrap();
        for s in [&eq.p1, &eq.p2, &eq.p3, &eq.p4] {
            assert_eq!(s.max_abs(), 0.0);
        }
        assert!(eq.law.theta.iter().all(|t| t.norm() == 0.0));
        assert!(eq.range_ok());
    }

    #[test]
    fn control_free_gains_vanish() {
        let mut spec = random_instance(32);
        spec.r = MatPath::constant(DMatrix::identity(1, 1));
        spec.diffusion = VecPath::constant(DVector::from_vec(vec![0.3, 0.1]));
        spec.drift = VecPath::constant(DVector::from_vec(vec![0.1, -0.2]));
        spec.gamma1 = 0.7;
        let eq = solve_equilibrium_system(&spec).unwrap();
        assert!(eq.law.theta.iter().all(|t| t.norm() == 0.0));
        assert!(eq.law.phi.iter().all(|t| t.norm() == 0.0));
    }

    #[test]
    fn reduces_to_standard_riccati_without_mean_field() {
        // scalar LQ: p' = −[2ap + c²p + q − (bp + cdp)²/(r + d²p)], p = −P₁
        let mut spec = scalar(400);
        let (a, b, c, d, q, r, g) = (0.3, 1.0, 0.2, 0.5, 1.0, 1.0, 0.8);
        spec.a = MatPath::scalar(a);
        spec.b = MatPath::scalar(b);
        spec.c = MatPath::scalar(c);
        spec.d = MatPath::scalar(d);
        spec.q = MatPath::scalar(q);
        spec.r = MatPath::scalar(r);
        spec.g = DMatrix::from_element(1, 1, g);
        let eq = solve_equilibrium_system(&spec).unwrap();
        // reference by fine Euler-free RK4 on the scalar Riccati
        let f = |p: f64| -(2.0 * a * p + c * c * p + q - (b * p + c * d * p).powi(2) / (r + d * d * p));
        let (mut p, hh) = (g, 1.0 / 4000.0);
        for _ in 0..4000 {
            let k1 = f(p);
            let k2 = f(p - 0.5 * hh * k1);
            let k3 = f(p - 0.5 * hh * k2);
            let k4 = f(p - hh * k3);
            p -= hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((eq.p1.values[0][(0, 0)] + p).abs() < 1e-9);
        assert!((eq.p2.values[0][(0, 0)]).abs() < 1e-12);
        let theta = -(b * p + c * d * p) / (r + d * d * p);
        assert!((eq.law.theta[0][(0, 0)] - theta).abs() < 1e-9);
    }
}
