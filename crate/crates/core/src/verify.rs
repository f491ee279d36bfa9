//! Certificates for computed equilibria: the algebraic gain identities, the
//! second-order margin, spike positivity, representation and mean-field
//! identities against the tree oracle, special-case reductions and the
//! uniqueness block system.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eig_sym, mv_add, row_sum_norm};
use crate::model::{aggregate, AggregatedCoeffs, MatPath, ProblemSpec, TimeGrid, VecPath};
use crate::oracle::{
    realize_law, tree_bsde_solve, tree_equilibrium, tree_propagate, tree_propagate_aggregate, tree_repr_bsde_solve, NodeField, NodeId,
    TreeControl, TreeModel, MAX_DEPTH,
};
use crate::riccati::{
    gain_rhs, solve_equilibrium_system, solve_fixed_gain_system, solve_hat_p1, solve_repr_coeffs, solve_y0, weight_matrix,
    BackwardOdeSolution, EquilibriumSolution, FeedbackLaw, MARGIN_TOL,
};
use crate::simulate::SpikeEstimate;

pub const FIRST_ORDER_TOL: f64 = 1e-9;
/// Floor on ℛ−𝒟ᵀP₁𝒟 required before uniqueness is checked.
pub const H2_DELTA: f64 = 1e-6;
pub const EXACT_TOL: f64 = 1e-12;
pub const UNIQUENESS_RESIDUAL_TOL: f64 = 1e-6;
/// Fine-grid factor used when continuous coefficients are compared with a tree.
const REFINE: usize = 64;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Tolerances {
    pub first_order: f64,
    pub margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { first_order: FIRST_ORDER_TOL, margin: MARGIN_TOL }
    }
}

/// Per-node residuals of the two gain identities (max-row-sum norm).
#[derive(Clone, Debug, Serialize)]
pub struct FirstOrderResidual {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl FirstOrderResidual {
    pub fn at(&self, node: usize) -> f64 {
        self.theta[node].max(self.phi[node])
    }

    pub fn max(&self) -> f64 {
        self.theta.iter().chain(&self.phi).cloned().fold(0.0, f64::max)
    }
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// ‖WΘ − ℬᵀ(Y₀γ₁+P₁+P₂) − 𝒟ᵀP₁𝒞‖ and ‖Wφ − 𝒟ᵀP₁σ − ℬᵀ(P₃+P₄)‖ at every node,
/// re-evaluated from the stored paths.
pub fn first_order_residual(spec: &ProblemSpec, eq: &EquilibriumSolution) -> FirstOrderResidual {
    let agg = aggregate(spec);
    let mut theta = Vec::with_capacity(spec.grid.steps() + 1);
    let mut phi = Vec::with_capacity(spec.grid.steps() + 1);
    for k in 0..=spec.grid.steps() {
        let cell = spec.grid.cell_of_node(k);
        let p = [&eq.p1.values[k], &eq.p2.values[k], &eq.p3.values[k], &eq.p4.values[k]];
        let w = weight_matrix(&agg, cell, p[0]);
        let (rt, rp) = gain_rhs(spec, &agg, cell, &eq.y0.values[k], p);
        theta.push(row_sum_norm(&(&w * &eq.law.theta[k] - rt)));
        phi.push(row_sum_norm(&(&w * col(&eq.law.phi[k]) - rp)));
    }
    FirstOrderResidual { theta, phi }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpikeEntry {
    pub t: f64,
    pub v: Vec<f64>,
    pub eps: f64,
    pub derivative: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpikeReport {
    pub source: String,
    pub sigmas: f64,
    pub entries: Vec<SpikeEntry>,
    /// Smallest derivative / std_error over entries with nonzero error.
    pub worst_z: f64,
    pub pass: bool,
}

/// Absolute slack for exact (zero-variance) spike derivatives.
const SPIKE_EXACT_SLACK: f64 = 1e-10;

impl SpikeReport {
    pub fn new(source: &str, sigmas: f64, entries: Vec<SpikeEntry>) -> Self {
        let pass = entries.iter().all(|e| e.derivative >= -(sigmas * e.std_error + SPIKE_EXACT_SLACK));
        let worst_z = entries
            .iter()
            .filter(|e| e.std_error > 0.0)
            .map(|e| e.derivative / e.std_error)
            .fold(f64::INFINITY, f64::min);
        Self { source: source.into(), sigmas, entries, worst_z, pass }
    }

    pub fn from_estimates(source: &str, sigmas: f64, estimates: &[(f64, SpikeEstimate)]) -> Self {
        let entries = estimates
            .iter()
            .map(|(t, e)| SpikeEntry { t: *t, v: e.v.clone(), eps: e.eps, derivative: e.derivative, std_error: e.std_error })
            .collect();
        Self::new(source, sigmas, entries)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionCheck {
    pub name: String,
    pub gap: f64,
    pub tol: f64,
    pub pass: bool,
}

impl ReductionCheck {
    fn new(name: &str, gap: f64, tol: f64) -> Self {
        Self { name: name.into(), gap, tol, pass: gap <= tol }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquilibriumCertificate {
    pub first_order_residual: f64,
    pub residual_path: FirstOrderResidual,
    pub second_order_margin: f64,
    pub margin_path: Vec<f64>,
    pub range_ok: bool,
    pub range_failures: usize,
    pub spike_report: Option<SpikeReport>,
    pub reductions: Vec<ReductionCheck>,
    pub tolerances: Tolerances,
}

impl EquilibriumCertificate {
    /// Named checks in reporting order.
    pub fn checks(&self) -> Vec<(&'static str, bool)> {
        let mut out = vec![
            ("first-order identities", self.first_order_residual <= self.tolerances.first_order),
            ("second-order condition", self.second_order_margin >= -self.tolerances.margin),
            ("range inclusion", self.range_ok),
        ];
        if let Some(s) = &self.spike_report {
            out.push(("spike positivity", s.pass));
        }
        if !self.reductions.is_empty() {
            out.push(("reductions", self.reductions.iter().all(|r| r.pass)));
        }
        out
    }

    pub fn passes(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }

    pub fn first_failure(&self) -> Option<&'static str> {
        self.checks().into_iter().find(|(_, ok)| !ok).map(|(name, _)| name)
    }

    pub fn with_spike(mut self, report: SpikeReport) -> Self {
        self.spike_report = Some(report);
        self
    }

    pub fn with_reductions(mut self, reductions: Vec<ReductionCheck>) -> Self {
        self.reductions = reductions;
        self
    }
}

pub fn certify(spec: &ProblemSpec, eq: &EquilibriumSolution, tol: Tolerances) -> EquilibriumCertificate {
    let residual_path = first_order_residual(spec, eq);
    EquilibriumCertificate {
        first_order_residual: residual_path.max(),
        residual_path,
        second_order_margin: eq.second_order.min_margin,
        margin_path: eq.second_order.margin.clone(),
        range_ok: eq.range_ok(),
        range_failures: eq.range_failures(),
        spike_report: None,
        reductions: Vec::new(),
        tolerances: tol,
    }
}

// ---------------------------------------------------------------------------
// Representation of the adjoint against the tree

#[derive(Clone, Debug)]
pub enum RepresentationControl {
    /// Deterministic constant control.
    OpenLoop(DVector<f64>),
    /// u = Θx + φ with constant gains, acting on the auxiliary process.
    Feedback { theta: DMatrix<f64>, phi: DVector<f64> },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RefinementRow {
    pub depth: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RepresentationReport {
    pub kind: &'static str,
    /// L² gap per depth.
    pub rows: Vec<RefinementRow>,
    /// Empirical order in h from a log-log fit; None when the gaps are at roundoff.
    pub order: Option<f64>,
    pub max_gap: f64,
}

/// Least-squares slope of ln(gap) against ln(h = T/depth).
pub fn empirical_order(rows: &[RefinementRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| r.gap <= EXACT_TOL) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (-(r.depth as f64).ln(), r.gap.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn check_depth(depth: usize) -> Result<()> {
    if depth > MAX_DEPTH {
        Err(Error::DepthExceeded(depth))
    } else {
        Ok(())
    }
}

/// Continuous coefficients solved on a fine grid and sampled at tree nodes.
fn fine_spec(spec: &ProblemSpec, depth: usize) -> Result<ProblemSpec> {
    spec.regrid(depth * REFINE)
}

fn coarsen_all<const K: usize>(sols: [&BackwardOdeSolution; K]) -> Result<[BackwardOdeSolution; K]> {
    let v: Vec<BackwardOdeSolution> = sols.iter().map(|s| s.coarsen(REFINE)).collect::<Result<_>>()?;
    Ok(v.try_into().expect("length preserved"))
}

/// (P₁x + P₂m + P₃ + P₄) at a node.
fn linear_form(p: &[BackwardOdeSolution; 4], node: usize, x: &[f64], mean: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p[2].values[node].iter().zip(p[3].values[node].iter()).map(|(a, b)| a + b).collect();
    mv_add(&mut out, &p[0].values[node], x, 1.0);
    mv_add(&mut out, &p[1].values[node], mean, 1.0);
    out
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Max over (t, s) of the L² gap (E|Y(s,t) − repr(s,t)|²)^{1/2}, exact
/// probabilities over anchors and subtree nodes. The max-node gap is not
/// used: under feedback the state has multiplicative noise and the extreme
/// branches grow with depth.
fn representation_gap(
    tree: &TreeModel,
    control: &TreeControl,
    coeffs: &[BackwardOdeSolution; 4],
    solve: &dyn Fn(NodeId, &[f64]) -> Result<crate::oracle::TreeBsde>,
) -> Result<f64> {
    let n = tree.spec.n;
    let depth = tree.depth();
    // anchor states from the auxiliary process at the root
    let root = tree_propagate_aggregate(tree, control, NodeId::ROOT, tree.spec.x0.as_slice())?;
    let mut worst = 0.0f64;
    for j in 0..depth {
        let anchors = 1usize << j;
        let mut sq = vec![0.0; depth - j + 1];
        for idx in 0..anchors {
            let x = &root.x[j][idx * n..(idx + 1) * n];
            let sol = solve(NodeId::new(j, idx), x)?;
            for (r, acc) in sq.iter_mut().enumerate() {
                let mean = &sol.states.mean[r];
                let count = sol.y[r].len() / n;
                let mut level = 0.0;
                for (i, y) in sol.y[r].chunks_exact(n).enumerate() {
                    let rep = linear_form(coeffs, j + r, &sol.states.x[r][i * n..(i + 1) * n], mean);
                    level += y.iter().zip(&rep).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                }
                *acc += level / count as f64;
            }
        }
        worst = sq.iter().fold(worst, |w, a| w.max((a / anchors as f64).sqrt()));
    }
    Ok(worst)
}

/// Compares the tree adjoint with its linear representation over a list of
/// tree depths. The open-loop path compares the cost adjoint on the state;
/// the feedback path compares the representation adjoint on the auxiliary
/// process with the fixed-gain system.
pub fn check_representation(spec: &ProblemSpec, control: &RepresentationControl, depths: &[usize]) -> Result<RepresentationReport> {
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        check_depth(depth)?;
        let tree = TreeModel::with_depth(spec, depth)?;
        let grid = tree.spec.grid;
        let fine = fine_spec(spec, depth)?;
        let gap = match control {
            RepresentationControl::OpenLoop(u) => {
                let rc = solve_repr_coeffs(&fine, &VecPath::constant(u.clone()))?;
                let coeffs = coarsen_all([&rc.p1, &rc.p2, &rc.p3, &rc.p4])?;
                let ctrl = TreeControl::Feedback(FeedbackLaw::constant(grid, DMatrix::zeros(spec.m, spec.n), u.clone()));
                representation_gap(&tree, &ctrl, &coeffs, &|a, x| tree_bsde_solve(&tree, &ctrl, a, x))?
            }
            RepresentationControl::Feedback { theta, phi } => {
                let law = FeedbackLaw::constant(fine.grid, theta.clone(), phi.clone());
                let [p1, p2, p3, p4] = solve_fixed_gain_system(&fine, &law)?;
                let coeffs = coarsen_all([&p1, &p2, &p3, &p4])?;
                let cp1 = solve_hat_p1(&fine)?.coarsen(REFINE)?;
                let ctrl = TreeControl::Feedback(FeedbackLaw::constant(grid, theta.clone(), phi.clone()));
                representation_gap(&tree, &ctrl, &coeffs, &|a, x| tree_repr_bsde_solve(&tree, &ctrl, a, x, &cp1))?
            }
        };
        rows.push(RefinementRow { depth, gap });
    }
    let kind = match control {
        RepresentationControl::OpenLoop(_) => "open-loop",
        RepresentationControl::Feedback { .. } => "feedback",
    };
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    Ok(RepresentationReport { kind, order: empirical_order(&rows), rows, max_gap })
}

// ---------------------------------------------------------------------------
// One-cell mean-field identity

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub depth: usize,
    pub anchors: usize,
    /// (anchor depth, max gap over its nodes and look-ahead levels).
    pub per_depth: Vec<(usize, f64)>,
    pub max_gap: f64,
}

/// E_t𝔾₀(s, X(s)) against E_t𝔾₀(s, 𝒳(s)) one and two cells after every
/// anchor at the listed depths, evaluated exactly on the tree, with
/// 𝔾₀(s,x) = 𝒟ᵀ𝒫₁𝒟u + 𝒦₁x + 𝒟ᵀ𝒫₁σ + ℬᵀ(𝒫₃+𝒫₄), 𝒦₁ = 𝒟ᵀ𝒫₁𝒞 + ℬᵀ(𝒫₁+𝒫₂+Y₀γ₁).
/// The tree depth is the spec's step count; the control is `law` realized
/// along the auxiliary process from x0. An empty list means every depth.
pub fn check_lemma_equality(spec: &ProblemSpec, law: &FeedbackLaw, anchor_depths: &[usize]) -> Result<LemmaReport> {
    let tree = TreeModel::new(spec)?;
    let depth = tree.depth();
    let (n, m) = (spec.n, spec.m);
    let law = law.resample(&spec.grid);
    let (controls, states) = realize_law(&tree, &law, spec.x0.as_slice());
    let node_ctrl = TreeControl::NodeValues(controls.clone());

    let fine = fine_spec(spec, depth)?;
    let means: Vec<DVector<f64>> = (0..depth).map(|k| DVector::from_vec(controls.level_mean(k))).collect();
    let fine_u = VecPath::per_cell((0..fine.grid.steps()).map(|c| means[c / REFINE].clone()).collect());
    let rc = solve_repr_coeffs(&fine, &fine_u)?;
    let [cp1, cp2, cp3, cp4] = coarsen_all([&rc.p1, &rc.p2, &rc.p3, &rc.p4])?;
    let y0 = solve_y0(&fine)?.coarsen(REFINE)?;
    let agg = aggregate(spec);

    // 𝔾₀ pieces at node k
    let g0_parts = |k: usize| -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let (sb, sc, sd) = (agg.b.at(k), agg.c.at(k), agg.d.at(k));
        let p1 = &cp1.values[k];
        let du = sd.transpose() * p1 * sd;
        let k1 = sd.transpose() * p1 * sc + sb.transpose() * (p1 + &cp2.values[k] + &y0.values[k] * spec.gamma1);
        let c = sd.transpose() * p1 * col(spec.diffusion.at(k)) + sb.transpose() * (&cp3.values[k] + &cp4.values[k]);
        (du, k1, c.as_slice().to_vec())
    };
    let level_g0 = |k: usize, xs: &[f64], us: &[f64]| -> Vec<f64> {
        let (du, k1, c) = g0_parts(k);
        let count = xs.len() / n;
        let mut acc = vec![0.0; m];
        for i in 0..count {
            let mut g = c.clone();
            mv_add(&mut g, &du, &us[i * m..(i + 1) * m], 1.0);
            mv_add(&mut g, &k1, &xs[i * n..(i + 1) * n], 1.0);
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        acc.iter().map(|a| a / count as f64).collect()
    };

    let list: Vec<usize> = if anchor_depths.is_empty() { (0..depth).collect() } else { anchor_depths.to_vec() };
    let mut per_depth = Vec::new();
    let mut anchors = 0;
    for &j in &list {
        if j + 1 >= depth {
            continue;
        }
        let mut worst = 0.0f64;
        for idx in 0..(1usize << j) {
            let x = states.get(j, idx);
            let anchored = tree_propagate(&tree, &node_ctrl, NodeId::new(j, idx), x)?;
            let aux = tree_propagate_aggregate(&tree, &node_ctrl, NodeId::new(j, idx), x)?;
            for r in 1..=2 {
                if j + r >= depth {
                    break;
                }
                let a = level_g0(j + r, &anchored.x[r], &anchored.u[r]);
                let b = level_g0(j + r, &aux.x[r], &aux.u[r]);
                worst = a.iter().zip(&b).fold(worst, |w, (p, q)| w.max((p - q).abs()));
            }
            anchors += 1;
        }
        per_depth.push((j, worst));
    }
    let max_gap = per_depth.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(LemmaReport { depth, anchors, per_depth, max_gap })
}

// ---------------------------------------------------------------------------
// Uniqueness machinery

#[derive(Clone, Debug)]
pub struct UniquenessSystem {
    pub grid: TimeGrid,
    pub g3: Vec<DMatrix<f64>>,
    pub g4: Vec<DMatrix<f64>>,
    pub a1: Vec<DMatrix<f64>>,
    pub b1: Vec<DMatrix<f64>>,
    pub c1: Vec<DMatrix<f64>>,
    pub a2: Vec<DMatrix<f64>>,
    pub b2: Vec<DMatrix<f64>>,
    pub c2: Vec<DMatrix<f64>>,
    /// [[𝔸₁, 𝔹₁], [𝔸₂, 𝔹₂]] per node.
    pub block_a: Vec<DMatrix<f64>>,
    /// [[ℂ₁, 0], [ℂ₂, 0]] per node.
    pub block_c: Vec<DMatrix<f64>>,
}

/// W = ℛ − 𝒟ᵀP₁𝒟 at a node, checked against the (H2) floor.
fn checked_weight(agg: &AggregatedCoeffs, cell: usize, node: usize, p1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = weight_matrix(agg, cell, p1);
    let min_eig = min_eig_sym(&w);
    if min_eig < H2_DELTA {
        return Err(Error::NotCheckable { node, min_eig, delta: H2_DELTA });
    }
    Ok(w)
}

fn invert(w: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    w.clone().try_inverse().ok_or(Error::NotCheckable { node, min_eig: 0.0, delta: H2_DELTA })
}

fn stack(tl: &DMatrix<f64>, tr: &DMatrix<f64>, bl: &DMatrix<f64>, br: &DMatrix<f64>) -> DMatrix<f64> {
    let n = tl.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(tl);
    out.view_mut((0, n), (n, n)).copy_from(tr);
    out.view_mut((n, 0), (n, n)).copy_from(bl);
    out.view_mut((n, n), (n, n)).copy_from(br);
    out
}

/// Assembles the block generator; `cp1` is 𝒫₁ on the same grid.
pub fn build_uniqueness_system(spec: &ProblemSpec, eq: &EquilibriumSolution, cp1: &BackwardOdeSolution) -> Result<UniquenessSystem> {
    if !cp1.grid.same_as(&spec.grid) || !eq.p1.grid.same_as(&spec.grid) {
        return Err(Error::GridMismatch { expected: spec.grid.steps(), found: cp1.grid.steps() });
    }
    let agg = aggregate(spec);
    let n = spec.n;
    let mut sys = UniquenessSystem {
        grid: spec.grid,
        g3: vec![],
        g4: vec![],
        a1: vec![],
        b1: vec![],
        c1: vec![],
        a2: vec![],
        b2: vec![],
        c2: vec![],
        block_a: vec![],
        block_c: vec![],
    };
    for k in 0..=spec.grid.steps() {
        let cell = spec.grid.cell_of_node(k);
        let (p1, p2, c1p) = (&eq.p1.values[k], &eq.p2.values[k], &cp1.values[k]);
        let w_inv = invert(&checked_weight(&agg, cell, k, p1)?, k)?;
        let (sb, sd) = (agg.b.at(cell), agg.d.at(cell));
        let (ct, ctt) = (spec.c.at(cell).transpose(), spec.c_tilde.at(cell).transpose());
        let cross = &ct * c1p * spec.d_tilde.at(cell) + c1p * spec.b_tilde.at(cell);
        let g3 = (&ct * p1 * sd + p1 * sb + &cross) * &w_inv;
        let g4 = (&ctt * p1 * sd + p2 * sb - &cross) * &w_inv;
        let (sbt, sdt) = (sb.transpose(), sd.transpose());
        let a1 = spec.a.at(cell).transpose() + &g3 * &sbt;
        let b1 = &g3 * &sbt;
        let c1 = &ct + &g3 * &sdt;
        let a2 = spec.a_tilde.at(cell).transpose() + &g4 * &sbt;
        let b2 = agg.a.at(cell).transpose() + &g4 * &sbt;
        let c2 = &ctt + &g4 * &sdt;
        let zero = DMatrix::zeros(n, n);
        sys.block_a.push(stack(&a1, &b1, &a2, &b2));
        sys.block_c.push(stack(&c1, &zero, &c2, &zero));
        sys.g3.push(g3);
        sys.g4.push(g4);
        sys.a1.push(a1);
        sys.b1.push(b1);
        sys.c1.push(c1);
        sys.a2.push(a2);
        sys.b2.push(b2);
        sys.c2.push(c2);
    }
    Ok(sys)
}

impl UniquenessSystem {
    /// Backward RK4 for 𝕐' = −𝒜_blk 𝕐 (deterministic data: the martingale
    /// part vanishes) from the given terminal value.
    pub fn integrate_homogeneous(&self, terminal: &DVector<f64>) -> Vec<DVector<f64>> {
        let steps = self.grid.steps();
        let h = self.grid.step_size();
        let mut out = vec![terminal.clone(); steps + 1];
        for k in (0..steps).rev() {
            let (a0, a1) = (&self.block_a[k], &self.block_a[k + 1]);
            let am = (a0 + a1) * 0.5;
            let f = |a: &DMatrix<f64>, y: &DVector<f64>| -(a * y);
            let y1 = &out[k + 1];
            let k1 = f(a1, y1);
            let k2 = f(&am, &(y1 - &k1 * (0.5 * h)));
            let k3 = f(&am, &(y1 - &k2 * (0.5 * h)));
            let k4 = f(a0, &(y1 - &k3 * h));
            out[k] = y1 - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out
    }
}

/// ū − Θ*𝒳̄ − φ* − W⁻¹[ℬᵀ𝒦̄_d + 𝒟ᵀℋ̄] at one node of `eq`'s grid.
pub fn representation_residual(
    spec: &ProblemSpec,
    eq: &EquilibriumSolution,
    node: usize,
    u: &DVector<f64>,
    xcal: &DVector<f64>,
    k_d: &DVector<f64>,
    h_bar: &DVector<f64>,
) -> Result<DVector<f64>> {
    let agg = aggregate(spec);
    let cell = spec.grid.cell_of_node(node);
    let w_inv = invert(&checked_weight(&agg, cell, node, &eq.p1.values[node])?, node)?;
    let corr = w_inv * (agg.b.at(cell).transpose() * k_d + agg.d.at(cell).transpose() * h_bar);
    Ok(u - &eq.law.theta[node] * xcal - &eq.law.phi[node] - corr)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct UniquenessRow {
    pub depth: usize,
    /// Max |residual| over all tree nodes.
    pub residual: f64,
    /// Max of |𝒦̄_d|/(1+|𝒳̄|) and |ℋ̄|/(1+|𝒳̄|) over nodes.
    pub k_d_max: f64,
    pub h_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct UniquenessReport {
    pub homogeneous_max: f64,
    pub rows: Vec<UniquenessRow>,
}

impl UniquenessReport {
    /// Non-increasing under refinement, allowing for values already at roundoff.
    pub fn decays(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].residual <= w[0].residual || w[1].residual <= EXACT_TOL)
    }
}

/// Representation residual with ū the tree equilibrium: 𝓜̄(s,s) is the
/// one-step conditional expectation of the tree cost adjoint anchored at the
/// node, 𝒩̄ its martingale coefficient, and the Pᵢ*, Θ*, φ* come from the
/// continuous solution sampled at the tree nodes.
pub fn tree_representation_residual(spec: &ProblemSpec, depth: usize) -> Result<UniquenessRow> {
    check_depth(depth)?;
    let tree = TreeModel::with_depth(spec, depth)?;
    let coarse = &tree.spec;
    let (n, m) = (spec.n, spec.m);
    let teq = tree_equilibrium(&tree)?;
    let fine = fine_spec(spec, depth)?;
    let eqf = solve_equilibrium_system(&fine)?;
    let [p1, p2, p3, p4, y0, hat_p1] = coarsen_all([&eqf.p1, &eqf.p2, &eqf.p3, &eqf.p4, &eqf.y0, &eqf.hat_p1])?;
    let law = eqf.law.resample(&coarse.grid);
    let eq = EquilibriumSolution {
        y0,
        hat_p1,
        p1,
        p2,
        p3,
        p4,
        range: vec![],
        second_order: eqf.second_order.clone(),
        p1_asymmetry: eqf.p1_asymmetry,
        law,
    };
    let mut eq = eq;
    let agg = aggregate(coarse);
    // Y₀γ₁ enters Θ* through E_t𝒳(T); on the tree that sensitivity is the
    // Euler product from the next node.
    let h = coarse.grid.step_size();
    let mut y0_next = -DMatrix::<f64>::identity(n, n);
    for k in (0..=depth).rev() {
        let cell = coarse.grid.cell_of_node(k);
        let w = checked_weight(&agg, cell, k, &eq.p1.values[k])?;
        if k < depth {
            let shift = (&y0_next - &eq.y0.values[k]) * spec.gamma1;
            eq.law.theta[k] += invert(&w, k)? * agg.b.at(cell).transpose() * shift;
            y0_next = (DMatrix::identity(n, n) + agg.a.at(cell) * h).transpose() * y0_next;
        }
    }
    let ctrl = TreeControl::NodeValues(teq.controls.clone());
    let mut row = UniquenessRow { depth, residual: 0.0, k_d_max: 0.0, h_max: 0.0 };
    for k in 0..depth {
        let four = [eq.p1.clone(), eq.p2.clone(), eq.p3.clone(), eq.p4.clone()];
        for idx in 0..(1usize << k) {
            let x = teq.states.get(k, idx);
            let u = DVector::from_column_slice(teq.controls.get(k, idx));
            let sol = tree_bsde_solve(&tree, &ctrl, NodeId::new(k, idx), x)?;
            let m_bar = DVector::from_vec(NodeField { dim: n, levels: vec![sol.y[1].clone()] }.level_mean(0));
            let n_bar = DVector::from_column_slice(&sol.z[0]);
            let xv = DVector::from_column_slice(x);
            let k_d = &m_bar - DVector::from_vec(linear_form(&four, k, x, x));
            let mut pred = agg.c.at(k) * &xv + agg.d.at(k) * &u + coarse.diffusion.at(k);
            pred = &eq.p1.values[k] * pred;
            let h_bar = &n_bar - pred;
            let res = representation_residual(coarse, &eq, k, &u, &xv, &k_d, &h_bar)?;
            row.residual = row.residual.max(res.amax());
            let scale = 1.0 + inf_norm(x);
            row.k_d_max = row.k_d_max.max(k_d.amax() / scale);
            row.h_max = row.h_max.max(h_bar.amax() / scale);
            debug_assert_eq!(u.len(), m);
        }
    }
    Ok(row)
}

/// Builds the system (refusing when (H2) fails), integrates the homogeneous
/// block equation from zero and evaluates the tree residual at each depth.
pub fn check_uniqueness(spec: &ProblemSpec, eq: &EquilibriumSolution, depths: &[usize]) -> Result<UniquenessReport> {
    let sys = build_uniqueness_system(spec, eq, &eq.hat_p1)?;
    let path = sys.integrate_homogeneous(&DVector::zeros(2 * spec.n));
    let homogeneous_max = path.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let rows = depths.iter().map(|&d| tree_representation_residual(spec, d)).collect::<Result<Vec<_>>>()?;
    Ok(UniquenessReport { homogeneous_max, rows })
}

// ---------------------------------------------------------------------------
// Reductions

pub const P1_IDENTITY_TOL: f64 = 1e-14;
pub const HOMOGENEOUS_TOL: f64 = 1e-12;
pub const SUM_IDENTITY_TOL: f64 = 1e-9;

/// Splits a spec into a pair sharing one gain path: S₁ keeps the state
/// coefficients with mean-field terms removed (and C = 0); S₂ moves S₁'s
/// coefficients into the mean-field slots. Costs move the same way.
pub fn dual_specs(spec: &ProblemSpec) -> (ProblemSpec, ProblemSpec) {
    let zero_n = MatPath::zeros(spec.n, spec.n);
    let zero_nm = MatPath::zeros(spec.n, spec.m);
    let zero_mm = MatPath::zeros(spec.m, spec.m);
    let mut s1 = spec.clone();
    s1.a_tilde = zero_n.clone();
    s1.b_tilde = zero_nm.clone();
    s1.c = zero_n.clone();
    s1.c_tilde = zero_n.clone();
    s1.d_tilde = zero_nm.clone();
    s1.q_tilde = zero_n.clone();
    s1.r_tilde = zero_mm.clone();
    s1.g_tilde = DMatrix::zeros(spec.n, spec.n);
    let mut s2 = s1.clone();
    s2.a_tilde = s1.a.clone();
    s2.b_tilde = s1.b.clone();
    s2.c_tilde = s1.c.clone();
    s2.d_tilde = s1.d.clone();
    s2.q_tilde = s1.q.clone();
    s2.r_tilde = s1.r.clone();
    s2.g_tilde = s1.g.clone();
    s2.a = zero_n.clone();
    s2.b = zero_nm.clone();
    s2.d = zero_nm;
    s2.q = zero_n;
    s2.r = zero_mm;
    s2.g = DMatrix::zeros(spec.n, spec.n);
    (s1, s2)
}

fn sum_gap(a: &BackwardOdeSolution, b: &BackwardOdeSolution, c: &BackwardOdeSolution, d: &BackwardOdeSolution) -> f64 {
    (0..a.values.len()).map(|k| ((&a.values[k] + &b.values[k]) - (&c.values[k] + &d.values[k])).amax()).fold(0.0, f64::max)
}

pub fn run_reduction_suite(spec: &ProblemSpec) -> Result<Vec<ReductionCheck>> {
    let mut out = Vec::new();

    let hat = solve_hat_p1(spec)?;
    let rc = solve_repr_coeffs(spec, &VecPath::zeros_vec(spec.m))?;
    out.push(ReductionCheck::new("representation P1 equals adjoint P1", rc.p1.max_gap(&hat), P1_IDENTITY_TOL));

    let mut homog = spec.clone();
    homog.a_tilde = MatPath::zeros(spec.n, spec.n);
    homog.b_tilde = MatPath::zeros(spec.n, spec.m);
    homog.c_tilde = MatPath::zeros(spec.n, spec.n);
    homog.d_tilde = MatPath::zeros(spec.n, spec.m);
    homog.drift = VecPath::zeros_vec(spec.n);
    homog.diffusion = VecPath::zeros_vec(spec.n);
    homog.gamma2 = DVector::zeros(spec.n);
    let eq = solve_equilibrium_system(&homog)?;
    out.push(ReductionCheck::new("affine terms vanish without mean field", eq.p3.max_abs().max(eq.p4.max_abs()), HOMOGENEOUS_TOL));

    let (s1, s2) = dual_specs(spec);
    let law = solve_equilibrium_system(&s1)?.law;
    let [a1, a2, a3, a4] = solve_fixed_gain_system(&s1, &law)?;
    let [b1, b2, b3, b4] = solve_fixed_gain_system(&s2, &law)?;
    out.push(ReductionCheck::new("dual sum identity (quadratic)", sum_gap(&a1, &a2, &b1, &b2), SUM_IDENTITY_TOL));
    out.push(ReductionCheck::new("dual sum identity (affine)", sum_gap(&a3, &a4, &b3, &b4), SUM_IDENTITY_TOL));
    Ok(out)
}

/// Exact tree spike derivatives at every node of the listed depths for the
/// tree equilibrium, one cell wide, v ∈ {±1, ±2} per coordinate.
pub fn tree_spike_report(spec: &ProblemSpec, depth: usize) -> Result<SpikeReport> {
    let tree = TreeModel::with_depth(spec, depth)?;
    let teq = tree_equilibrium(&tree)?;
    let ctrl = TreeControl::NodeValues(teq.controls.clone());
    let mut entries = Vec::new();
    let h = tree.step_size();
    for k in 0..depth {
        let mut worst: Option<SpikeEntry> = None;
        for idx in 0..(1usize << k) {
            let x = teq.states.get(k, idx);
            for a in 0..spec.m {
                for s in [-2.0, -1.0, 1.0, 2.0] {
                    let mut v = vec![0.0; spec.m];
                    v[a] = s;
                    let d = crate::oracle::tree_spike_derivative(&tree, &ctrl, NodeId::new(k, idx), x, &v, 1)?;
                    if worst.as_ref().is_none_or(|w| d < w.derivative) {
                        worst = Some(SpikeEntry { t: k as f64 * h, v, eps: h, derivative: d, std_error: 0.0 });
                    }
                }
            }
        }
        entries.extend(worst);
    }
    Ok(SpikeReport::new("tree", 0.0, entries))
}
