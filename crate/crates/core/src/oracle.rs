//! Exact binomial-tree oracle: ±√h increments, exact conditional means by
//! averaging over sub-branches, exact costs, spike derivatives, discrete
//! equilibria and discrete BSDE solutions.
//!
//! Node `i` at depth `k` has children `2i` (increment −√h) and `2i+1`
//! (increment +√h). A subtree anchored at `(j, idx)` holds, at relative level
//! `r`, the absolute nodes `idx·2^r .. (idx+1)·2^r` of depth `j+r`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, mv_add, pinv_solve, quad};
use crate::model::ProblemSpec;
use crate::riccati::FeedbackLaw;
use crate::simulate::{apply_law, euler_step};

pub const MAX_DEPTH: usize = 16;

#[derive(Clone, Debug)]
pub struct TreeModel {
    pub spec: ProblemSpec,
    depth: usize,
    h: f64,
    sqrt_h: f64,
}

impl TreeModel {
    /// Tree over the spec's own grid.
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        let depth = spec.grid.steps();
        if depth > MAX_DEPTH {
            return Err(Error::DepthExceeded(depth));
        }
        let h = spec.grid.step_size();
        Ok(Self { spec: spec.clone(), depth, h, sqrt_h: h.sqrt() })
    }

    /// Tree over the spec regridded to `depth` steps.
    pub fn with_depth(spec: &ProblemSpec, depth: usize) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::DepthExceeded(depth));
        }
        Self::new(&spec.regrid(depth)?)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NodeId {
    pub depth: usize,
    pub index: usize,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { depth: 0, index: 0 };

    pub fn new(depth: usize, index: usize) -> Self {
        Self { depth, index }
    }
}

/// Per-node vectors over the whole tree, `levels[k]` flat with `2^k·dim` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField {
    pub dim: usize,
    pub levels: Vec<Vec<f64>>,
}

impl NodeField {
    pub fn get(&self, depth: usize, index: usize) -> &[f64] {
        &self.levels[depth][index * self.dim..(index + 1) * self.dim]
    }

    /// Exact mean over a depth.
    pub fn level_mean(&self, depth: usize) -> Vec<f64> {
        mean_of(&self.levels[depth], self.dim)
    }
}

#[derive(Clone, Debug)]
pub enum TreeControl {
    /// u = Θx + φ on the propagated state.
    Feedback(FeedbackLaw),
    /// Adapted per-node values, levels 0..depth.
    NodeValues(NodeField),
}

/// Exact average of the `dim`-blocks of `flat` (count is a power of two).
fn mean_of(flat: &[f64], dim: usize) -> Vec<f64> {
    let count = flat.len() / dim;
    let mut acc = vec![0.0; dim];
    for blk in flat.chunks_exact(dim) {
        for (a, b) in acc.iter_mut().zip(blk) {
            *a += b;
        }
    }
    let w = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| *a *= w);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dynamics {
    /// State conditioned at the anchor: mean-field terms use exact E_t.
    Anchored,
    /// Auxiliary process: mean-field coefficients act on the state itself.
    Aggregate,
}

#[derive(Clone, Copy)]
enum Source<'a> {
    Law(&'a FeedbackLaw),
    Field(&'a NodeField),
    Relative(&'a [Vec<f64>]),
}

#[derive(Clone, Copy)]
struct Ctrl<'a> {
    source: Source<'a>,
    anchor_override: Option<&'a [f64]>,
    spike: Option<(&'a [f64], usize)>,
}

impl<'a> Ctrl<'a> {
    fn of(control: &'a TreeControl) -> Self {
        let source = match control {
            TreeControl::Feedback(l) => Source::Law(l),
            TreeControl::NodeValues(f) => Source::Field(f),
        };
        Self { source, anchor_override: None, spike: None }
    }
}

/// States, controls and exact conditional means on an anchored subtree.
#[derive(Clone, Debug)]
pub struct SubtreeStates {
    pub anchor: NodeId,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub mean_u: Vec<Vec<f64>>,
}

impl SubtreeStates {
    pub fn levels(&self) -> usize {
        self.x.len() - 1
    }
}

fn propagate(tree: &TreeModel, anchor: NodeId, x0: &[f64], dynamics: Dynamics, ctrl: Ctrl) -> SubtreeStates {
    let spec = &tree.spec;
    let (n, m) = (spec.n, spec.m);
    let levels = tree.depth - anchor.depth;
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(levels + 1);
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(levels);
    let mut means = Vec::with_capacity(levels + 1);
    let mut mean_us = Vec::with_capacity(levels);
    xs.push(x0.to_vec());
    for r in 0..levels {
        let depth = anchor.depth + r;
        let cur = &xs[r];
        let count = 1usize << r;
        let mean = mean_of(cur, n);
        let mut u = vec![0.0; count * m];
        for i in 0..count {
            let ui = &mut u[i * m..(i + 1) * m];
            match ctrl.source {
                Source::Law(law) => apply_law(law, depth, &cur[i * n..(i + 1) * n], ui),
                Source::Field(f) => ui.copy_from_slice(f.get(depth, (anchor.index << r) + i)),
                Source::Relative(rel) => ui.copy_from_slice(&rel[r][i * m..(i + 1) * m]),
            }
            if r == 0 {
                if let Some(a) = ctrl.anchor_override {
                    ui.copy_from_slice(a);
                }
            }
            if let Some((v, cells)) = ctrl.spike {
                if r < cells {
                    ui.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
        }
        let mean_u = mean_of(&u, m);
        let mut next = vec![0.0; 2 * count * n];
        for i in 0..count {
            let xi = &cur[i * n..(i + 1) * n];
            let ui = &u[i * m..(i + 1) * m];
            for (b, dw) in [(0usize, -tree.sqrt_h), (1, tree.sqrt_h)] {
                let c = 2 * i + b;
                let out = &mut next[c * n..(c + 1) * n];
                match dynamics {
                    Dynamics::Anchored => euler_step(spec, depth, tree.h, dw, xi, &mean, ui, &mean_u, out),
                    Dynamics::Aggregate => euler_step(spec, depth, tree.h, dw, xi, xi, ui, ui, out),
                }
            }
        }
        means.push(mean);
        mean_us.push(mean_u);
        us.push(u);
        xs.push(next);
    }
    means.push(mean_of(&xs[levels], n));
    SubtreeStates { anchor, x: xs, u: us, mean: means, mean_u: mean_us }
}

fn check_anchor(tree: &TreeModel, anchor: NodeId, x: &[f64]) -> Result<()> {
    if anchor.depth > tree.depth || anchor.index >= (1usize << anchor.depth) {
        return Err(Error::OffGrid(anchor.depth as f64 * tree.h));
    }
    if x.len() != tree.spec.n {
        return Err(Error::Invalid("anchor state has the wrong dimension".into()));
    }
    Ok(())
}

/// Conditional mean-field state from `x` at the anchor node.
pub fn tree_propagate(tree: &TreeModel, control: &TreeControl, anchor: NodeId, x: &[f64]) -> Result<SubtreeStates> {
    check_anchor(tree, anchor, x)?;
    Ok(propagate(tree, anchor, x, Dynamics::Anchored, Ctrl::of(control)))
}

/// Auxiliary process from `x` at the anchor node.
pub fn tree_propagate_aggregate(tree: &TreeModel, control: &TreeControl, anchor: NodeId, x: &[f64]) -> Result<SubtreeStates> {
    check_anchor(tree, anchor, x)?;
    Ok(propagate(tree, anchor, x, Dynamics::Aggregate, Ctrl::of(control)))
}

/// Exact cost of propagated anchored states.
pub fn subtree_cost(tree: &TreeModel, st: &SubtreeStates) -> f64 {
    let spec = &tree.spec;
    let (n, m) = (spec.n, spec.m);
    let h = tree.h;
    let levels = st.levels();
    let mut run = 0.0;
    let mut mf = 0.0;
    for r in 0..levels {
        let cell = st.anchor.depth + r;
        let count = 1usize << r;
        let (q, rr) = (spec.q.at(cell), spec.r.at(cell));
        let mut acc = 0.0;
        for i in 0..count {
            acc += quad(q, &st.x[r][i * n..(i + 1) * n]) + quad(rr, &st.u[r][i * m..(i + 1) * m]);
        }
        run += h * acc / count as f64;
        mf += h * (quad(spec.q_tilde.at(cell), &st.mean[r]) + quad(spec.r_tilde.at(cell), &st.mean_u[r]));
    }
    let count = 1usize << levels;
    let term: f64 = st.x[levels].chunks_exact(n).map(|x| quad(&spec.g, x)).sum::<f64>() / count as f64;
    let last = &st.mean[levels];
    let cross: Vec<f64> = st.x[0].iter().zip(spec.gamma2.iter()).map(|(x, g)| spec.gamma1 * x + g).collect();
    0.5 * (run + term + mf + quad(&spec.g_tilde, last)) + dot(&cross, last)
}

/// J(u; t, x) at the anchor node.
pub fn tree_cost(tree: &TreeModel, control: &TreeControl, anchor: NodeId, x: &[f64]) -> Result<f64> {
    Ok(subtree_cost(tree, &tree_propagate(tree, control, anchor, x)?))
}

/// Exact [J(u + v·1_[t,t+ε)) − J(u)]/ε at the anchor node, ε = `cells`·h.
pub fn tree_spike_derivative(tree: &TreeModel, control: &TreeControl, anchor: NodeId, x: &[f64], v: &[f64], cells: usize) -> Result<f64> {
    check_anchor(tree, anchor, x)?;
    if cells == 0 || anchor.depth + cells > tree.depth {
        return Err(Error::OffGrid(cells as f64 * tree.h));
    }
    if v.len() != tree.spec.m {
        return Err(Error::Invalid("perturbation must be an m-vector".into()));
    }
    let base = propagate(tree, anchor, x, Dynamics::Anchored, Ctrl::of(control));
    // freeze the realized controls: the perturbation is open-loop
    let mut ctrl = Ctrl { source: Source::Relative(&base.u), anchor_override: None, spike: Some((v, cells)) };
    let pert = propagate(tree, anchor, x, Dynamics::Anchored, ctrl);
    ctrl.spike = None;
    let _ = ctrl;
    Ok((subtree_cost(tree, &pert) - subtree_cost(tree, &base)) / (cells as f64 * tree.h))
}

#[derive(Clone, Debug)]
pub struct TreeEquilibrium {
    /// Per-level gains Θ_k, φ_k on the tree grid (terminal entry repeats the last level).
    pub law: FeedbackLaw,
    /// One-cell Hessian of the spike cost at each level.
    pub hessians: Vec<DMatrix<f64>>,
    /// Equilibrium controls along the auxiliary process from x0.
    pub controls: NodeField,
    pub states: NodeField,
    /// Max |spike gradient| at test states under the extracted law.
    pub gain_residual: f64,
}

impl TreeEquilibrium {
    pub fn min_hessian_eig(&self) -> f64 {
        self.hessians.iter().map(crate::linalg::min_eig_sym).fold(f64::INFINITY, f64::min)
    }
}

/// Spike gradient and frozen-control cost at level `j` for anchor state `x`
/// and anchor control `u`; deeper controls follow `law` along the auxiliary
/// process.
struct LevelProblem<'a> {
    tree: &'a TreeModel,
    law: &'a FeedbackLaw,
    j: usize,
}

impl LevelProblem<'_> {
    fn frozen(&self, x: &[f64], u: &[f64]) -> Vec<Vec<f64>> {
        let anchor = NodeId::new(self.j, 0);
        let ctrl = Ctrl { source: Source::Law(self.law), anchor_override: Some(u), spike: None };
        propagate(self.tree, anchor, x, Dynamics::Aggregate, ctrl).u
    }

    fn cost(&self, x: &[f64], frozen: &[Vec<f64>], v: &[f64]) -> f64 {
        let ctrl = Ctrl { source: Source::Relative(frozen), anchor_override: None, spike: Some((v, 1)) };
        subtree_cost(self.tree, &propagate(self.tree, NodeId::new(self.j, 0), x, Dynamics::Anchored, ctrl))
    }

    /// Exact gradient of the (quadratic) one-cell spike cost in v at v = 0.
    fn gradient(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let m = self.tree.spec.m;
        let frozen = self.frozen(x, u);
        DVector::from_fn(m, |i, _| {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let plus = self.cost(x, &frozen, &e);
            e[i] = -1.0;
            let minus = self.cost(x, &frozen, &e);
            0.5 * (plus - minus)
        })
    }

    fn hessian(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let m = self.tree.spec.m;
        let frozen = self.frozen(x, u);
        let j0 = self.cost(x, &frozen, &vec![0.0; m]);
        let unit = |i: usize, s: f64| {
            let mut e = vec![0.0; m];
            e[i] = s;
            e
        };
        let diag: Vec<f64> = (0..m).map(|i| self.cost(x, &frozen, &unit(i, 1.0)) + self.cost(x, &frozen, &unit(i, -1.0)) - 2.0 * j0).collect();
        DMatrix::from_fn(m, m, |a, b| {
            if a == b {
                diag[a]
            } else {
                let mut e = vec![0.0; m];
                e[a] = 1.0;
                e[b] = 1.0;
                // J(e_a+e_b) − J(0) = g_a + g_b + ½(H_aa + H_bb) + H_ab
                let jab = self.cost(x, &frozen, &e) - j0;
                let ga = 0.5 * (self.cost(x, &frozen, &unit(a, 1.0)) - self.cost(x, &frozen, &unit(a, -1.0)));
                let gb = 0.5 * (self.cost(x, &frozen, &unit(b, 1.0)) - self.cost(x, &frozen, &unit(b, -1.0)));
                jab - ga - gb - 0.5 * (diag[a] + diag[b])
            }
        })
    }
}

/// Discrete equilibrium by backward induction over levels: at each level the
/// control is the affine law that zeroes the exact one-cell spike gradient,
/// with deeper controls generated by the already-computed laws.
pub fn tree_equilibrium(tree: &TreeModel) -> Result<TreeEquilibrium> {
    let spec = &tree.spec;
    let (n, m, depth) = (spec.n, spec.m, tree.depth);
    let mut law = FeedbackLaw::zeros(spec.grid, n, m);
    let mut hessians = vec![DMatrix::zeros(m, m); depth];
    let mut gain_residual = 0.0f64;
    for j in (0..depth).rev() {
        let lp = LevelProblem { tree, law: &law, j };
        let zx = vec![0.0; n];
        let zu = vec![0.0; m];
        let c = lp.gradient(&zx, &zu);
        let mut mx = DMatrix::zeros(m, n);
        for a in 0..n {
            let mut e = zx.clone();
            e[a] = 1.0;
            mx.set_column(a, &(lp.gradient(&e, &zu) - &c));
        }
        let mut mu = DMatrix::zeros(m, m);
        for b in 0..m {
            let mut e = zu.clone();
            e[b] = 1.0;
            mu.set_column(b, &(lp.gradient(&zx, &e) - &c));
        }
        let mut rhs = DMatrix::zeros(m, n + 1);
        rhs.columns_mut(0, n).copy_from(&(-&mx));
        rhs.set_column(n, &(-&c));
        let (sol, ok) = pinv_solve(&mu, &rhs);
        if !ok {
            return Err(Error::NoDiscreteEquilibrium(j));
        }
        let theta = sol.columns(0, n).into_owned();
        let phi = DVector::from_column_slice(sol.column(n).as_slice());
        hessians[j] = lp.hessian(&zx, phi.as_slice());
        law.theta[j] = theta;
        law.phi[j] = phi;
        if j == depth - 1 {
            law.theta[depth] = law.theta[j].clone();
            law.phi[depth] = law.phi[j].clone();
        }
        // residual at a generic state
        let lp = LevelProblem { tree, law: &law, j };
        let probe: Vec<f64> = (0..n).map(|a| 0.75 - 0.5 * a as f64).collect();
        let mut u = vec![0.0; m];
        apply_law(&law, j, &probe, &mut u);
        let g = lp.gradient(&probe, &u);
        let scale = 1.0 + mu.abs().max();
        gain_residual = gain_residual.max(g.abs().max() / scale);
    }
    let st = propagate(tree, NodeId::ROOT, spec.x0.as_slice(), Dynamics::Aggregate, Ctrl { source: Source::Law(&law), anchor_override: None, spike: None });
    let controls = NodeField { dim: m, levels: st.u };
    let states = NodeField { dim: n, levels: st.x };
    Ok(TreeEquilibrium { law, hessians, controls, states, gain_residual })
}

/// Realizes a feedback law as per-node controls along the auxiliary process
/// started from `x0` at the root. Returns (controls, states).
pub fn realize_law(tree: &TreeModel, law: &FeedbackLaw, x0: &[f64]) -> (NodeField, NodeField) {
    let st = propagate(tree, NodeId::ROOT, x0, Dynamics::Aggregate, Ctrl { source: Source::Law(law), anchor_override: None, spike: None });
    (NodeField { dim: tree.spec.m, levels: st.u }, NodeField { dim: tree.spec.n, levels: st.x })
}

/// Generator data of a linear BSDE on the tree:
/// Y_k = E_kY_{k+1} + h[AᵀE_kY_{k+1} + ÃᵀE_tY_{k+1} + CᵀZ_k + C̃ᵀE_tZ_k
///        + F₁X_k + F₂E_tX_k + F₃u_k + F₄E_tu_k],
/// Y_N = −G X_N − G̃ E_tX_N − γ₂.
#[derive(Clone, Debug)]
pub struct BsdeForcing {
    /// Per absolute depth: [F₁, F₂, F₃, F₄].
    pub levels: Vec<[DMatrix<f64>; 4]>,
}

impl BsdeForcing {
    /// Forcing of the cost adjoint: F₁ = −Q, F₂ = −Q̃.
    pub fn cost_adjoint(spec: &ProblemSpec) -> Self {
        let (n, m) = (spec.n, spec.m);
        let levels = (0..spec.grid.steps())
            .map(|k| [-spec.q.at(k).clone(), -spec.q_tilde.at(k).clone(), DMatrix::zeros(n, m), DMatrix::zeros(n, m)])
            .collect();
        Self { levels }
    }

    /// Forcing Q₁..Q₄ built from 𝒫₁ at the tree nodes.
    pub fn representation(spec: &ProblemSpec, cp1: &crate::riccati::BackwardOdeSolution) -> Self {
        let levels = (0..spec.grid.steps()).map(|k| crate::model::q_coeffs_at(spec, k, &cp1.values[k])).collect();
        Self { levels }
    }
}

#[derive(Clone, Debug)]
pub struct TreeBsde {
    pub states: SubtreeStates,
    /// Relative levels 0..=L.
    pub y: Vec<Vec<f64>>,
    /// Relative levels 0..L.
    pub z: Vec<Vec<f64>>,
}

/// Exact discrete backward induction on propagated states.
pub fn solve_bsde_on(tree: &TreeModel, states: SubtreeStates, forcing: &BsdeForcing) -> TreeBsde {
    let spec = &tree.spec;
    let (n, m) = (spec.n, spec.m);
    let (h, sq) = (tree.h, tree.sqrt_h);
    let levels = states.levels();
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); levels + 1];
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); levels];
    let last = &states.mean[levels];
    let mut g_mean = vec![0.0; n];
    mv_add(&mut g_mean, &spec.g_tilde, last, 1.0);
    y[levels] = states.x[levels]
        .chunks_exact(n)
        .flat_map(|x| {
            let mut out: Vec<f64> = g_mean.iter().zip(spec.gamma2.iter()).map(|(a, b)| -a - b).collect();
            mv_add(&mut out, &spec.g, x, -1.0);
            out
        })
        .collect();
    for r in (0..levels).rev() {
        let cell = states.anchor.depth + r;
        let count = 1usize << r;
        let [f1, f2, f3, f4] = &forcing.levels[cell];
        let (at, ct) = (spec.a.at(cell).transpose(), spec.c.at(cell).transpose());
        let (att, ctt) = (spec.a_tilde.at(cell).transpose(), spec.c_tilde.at(cell).transpose());
        let next = &y[r + 1];
        let mut ey = vec![0.0; count * n];
        let mut zz = vec![0.0; count * n];
        for i in 0..count {
            for a in 0..n {
                let lo = next[(2 * i) * n + a];
                let hi = next[(2 * i + 1) * n + a];
                ey[i * n + a] = 0.5 * (lo + hi);
                zz[i * n + a] = (hi - lo) / (2.0 * sq);
            }
        }
        let mean_y = mean_of(next, n);
        let mean_z = mean_of(&zz, n);
        // node-independent part
        let mut common = vec![0.0; n];
        mv_add(&mut common, &att, &mean_y, 1.0);
        mv_add(&mut common, &ctt, &mean_z, 1.0);
        mv_add(&mut common, f2, &states.mean[r], 1.0);
        mv_add(&mut common, f4, &states.mean_u[r], 1.0);
        let mut yr = vec![0.0; count * n];
        for i in 0..count {
            let mut gen = common.clone();
            mv_add(&mut gen, &at, &ey[i * n..(i + 1) * n], 1.0);
            mv_add(&mut gen, &ct, &zz[i * n..(i + 1) * n], 1.0);
            mv_add(&mut gen, f1, &states.x[r][i * n..(i + 1) * n], 1.0);
            mv_add(&mut gen, f3, &states.u[r][i * m..(i + 1) * m], 1.0);
            for a in 0..n {
                yr[i * n + a] = ey[i * n + a] + h * gen[a];
            }
        }
        y[r] = yr;
        z[r] = zz;
    }
    TreeBsde { states, y, z }
}

/// (Y, Z) of the cost adjoint on the anchored state.
pub fn tree_bsde_solve(tree: &TreeModel, control: &TreeControl, anchor: NodeId, x: &[f64]) -> Result<TreeBsde> {
    let st = tree_propagate(tree, control, anchor, x)?;
    Ok(solve_bsde_on(tree, st, &BsdeForcing::cost_adjoint(&tree.spec)))
}

/// (𝓜, 𝓝) of the representation BSDE on the auxiliary process.
pub fn tree_repr_bsde_solve(
    tree: &TreeModel,
    control: &TreeControl,
    anchor: NodeId,
    x: &[f64],
    cp1: &crate::riccati::BackwardOdeSolution,
) -> Result<TreeBsde> {
    let st = tree_propagate_aggregate(tree, control, anchor, x)?;
    Ok(solve_bsde_on(tree, st, &BsdeForcing::representation(&tree.spec, cp1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatPath, VecPath};
    use crate::riccati::solve_equilibrium_system;

    fn scalar(steps: usize) -> ProblemSpec {
        let mut s = ProblemSpec::scalar(1.0, steps).unwrap();
        s.x0 = DVector::from_element(1, 1.0);
        s
    }

    fn open(spec: &ProblemSpec, u: f64) -> TreeControl {
        TreeControl::Feedback(FeedbackLaw::constant(spec.grid, DMatrix::zeros(spec.m, spec.n), DVector::from_element(spec.m, u)))
    }

    #[test]
    fn depth_bound() {
        assert!(matches!(TreeModel::new(&scalar(17)), Err(Error::DepthExceeded(17))));
    }

    #[test]
    fn zero_coefficients_freeze() {
        let spec = scalar(6);
        let tree = TreeModel::new(&spec).unwrap();
        let st = tree_propagate(&tree, &open(&spec, 0.0), NodeId::ROOT, &[2.0]).unwrap();
        assert!(st.x.iter().all(|l| l.iter().all(|v| *v == 2.0)));
    }

    #[test]
    fn one_step_arithmetic() {
        let mut spec = scalar(4);
        spec.drift = VecPath::constant(DVector::from_element(1, 0.3));
        spec.diffusion = VecPath::constant(DVector::from_element(1, 0.5));
        let tree = TreeModel::new(&spec).unwrap();
        let st = tree_propagate(&tree, &open(&spec, 0.0), NodeId::new(3, 5), &[1.0]).unwrap();
        let (h, sq) = (0.25f64, 0.5f64);
        assert_eq!(st.x[1], vec![1.0 + 0.3 * h - 0.5 * sq, 1.0 + 0.3 * h + 0.5 * sq]);
        assert!((st.mean[1][0] - (1.0 + 0.3 * h)).abs() < 1e-15);
    }

    #[test]
    fn conditional_mean_matches_recursion() {
        let mut spec = scalar(10);
        spec.a = MatPath::scalar(0.4);
        spec.a_tilde = MatPath::scalar(-0.3);
        spec.c = MatPath::scalar(0.6);
        spec.c_tilde = MatPath::scalar(0.2);
        spec.b = MatPath::scalar(1.0);
        spec.drift = VecPath::constant(DVector::from_element(1, 0.1));
        let tree = TreeModel::new(&spec).unwrap();
        let st = tree_propagate(&tree, &open(&spec, 0.5), NodeId::ROOT, &[1.0]).unwrap();
        let mut m = 1.0;
        for k in 0..=10 {
            assert!((st.mean[k][0] - m).abs() < 1e-13);
            m += 0.1 * (0.1 * m + 0.5 + 0.1);
        }
    }

    #[test]
    fn cost_examples() {
        let spec = scalar(5);
        let tree = TreeModel::new(&spec).unwrap();
        assert_eq!(tree_cost(&tree, &open(&spec, 1.0), NodeId::ROOT, &[1.0]).unwrap(), 0.0);

        let mut spec = scalar(5);
        spec.g = DMatrix::from_element(1, 1, 1.5);
        spec.g_tilde = DMatrix::from_element(1, 1, 0.5);
        spec.gamma1 = 2.0;
        spec.gamma2 = DVector::from_element(1, -0.25);
        let tree = TreeModel::new(&spec).unwrap();
        let x = 0.8;
        let j = tree_cost(&tree, &open(&spec, 0.0), NodeId::ROOT, &[x]).unwrap();
        let exact = 0.5 * 2.0 * x * x + (2.0 * x - 0.25) * x;
        assert!((j - exact).abs() < 1e-15);
    }

    #[test]
    fn spike_trivial_cases() {
        let spec = scalar(6);
        let tree = TreeModel::new(&spec).unwrap();
        assert_eq!(tree_spike_derivative(&tree, &open(&spec, 0.0), NodeId::new(2, 1), &[1.0], &[1.0], 2).unwrap(), 0.0);
        let mut spec = fixture(6);
        spec.x0 = DVector::from_element(1, 1.0);
        let tree = TreeModel::new(&spec).unwrap();
        assert_eq!(tree_spike_derivative(&tree, &open(&spec, 0.3), NodeId::new(2, 1), &[1.0], &[0.0], 2).unwrap(), 0.0);
    }

    /// n=m=1, T=1, A=C=0, B=D=1, mean-field coefficients 0.1, Q=R=G=1.
    pub(crate) fn fixture(steps: usize) -> ProblemSpec {
        let mut s = scalar(steps);
        s.b = MatPath::scalar(1.0);
        s.d = MatPath::scalar(1.0);
        s.a_tilde = MatPath::scalar(0.1);
        s.b_tilde = MatPath::scalar(0.1);
        s.c_tilde = MatPath::scalar(0.1);
        s.d_tilde = MatPath::scalar(0.1);
        s.q = MatPath::scalar(1.0);
        s.r = MatPath::scalar(1.0);
        s.g = DMatrix::from_element(1, 1, 1.0);
        s
    }

    #[test]
    fn equilibrium_trivial_cases() {
        let mut spec = scalar(6);
        spec.r = MatPath::scalar(1.0);
        let eq = tree_equilibrium(&TreeModel::new(&spec).unwrap()).unwrap();
        assert!(eq.controls.levels.iter().all(|l| l.iter().all(|u| *u == 0.0)));

        let mut spec = fixture(6);
        spec.b = MatPath::scalar(0.0);
        spec.d = MatPath::scalar(0.0);
        spec.b_tilde = MatPath::scalar(0.0);
        spec.d_tilde = MatPath::scalar(0.0);
        spec.diffusion = VecPath::constant(DVector::from_element(1, 0.3));
        let eq = tree_equilibrium(&TreeModel::new(&spec).unwrap()).unwrap();
        assert!(eq.controls.levels.iter().all(|l| l.iter().all(|u| *u == 0.0)));
    }

    #[test]
    fn equilibrium_spike_nonnegative_everywhere() {
        let mut spec = fixture(7);
        spec.diffusion = VecPath::constant(DVector::from_element(1, 0.2));
        spec.drift = VecPath::constant(DVector::from_element(1, 0.1));
        spec.gamma2 = DVector::from_element(1, 0.2);
        let tree = TreeModel::new(&spec).unwrap();
        let eq = tree_equilibrium(&tree).unwrap();
        assert!(eq.gain_residual < 1e-10, "{}", eq.gain_residual);
        assert!(eq.min_hessian_eig() > 0.0);
        let ctrl = TreeControl::NodeValues(eq.controls.clone());
        for depth in 0..7 {
            for idx in 0..(1usize << depth) {
                let x = eq.states.get(depth, idx).to_vec();
                for v in [-2.0, -1.0, 1.0, 2.0] {
                    let d = tree_spike_derivative(&tree, &ctrl, NodeId::new(depth, idx), &x, &[v], 1).unwrap();
                    assert!(d >= -1e-10, "depth {depth} idx {idx} v {v}: {d}");
                }
            }
        }
    }

    #[test]
    fn gains_independent_of_initial_state() {
        let spec = fixture(6);
        let a = tree_equilibrium(&TreeModel::new(&spec).unwrap()).unwrap();
        let mut s2 = spec.clone();
        s2.x0 = DVector::from_element(1, -3.0);
        let b = tree_equilibrium(&TreeModel::new(&s2).unwrap()).unwrap();
        for (x, y) in a.law.theta.iter().zip(&b.law.theta) {
            assert!((x - y).abs().max() < 1e-12);
        }
        assert!(a.law.phi.iter().all(|p| p.abs().max() < 1e-12));
    }

    #[test]
    fn bsde_zero_and_terminal_only() {
        let spec = scalar(6);
        let tree = TreeModel::new(&spec).unwrap();
        let b = tree_bsde_solve(&tree, &open(&spec, 0.0), NodeId::ROOT, &[1.0]).unwrap();
        assert!(b.y.iter().chain(&b.z).all(|l| l.iter().all(|v| *v == 0.0)));

        let mut spec = scalar(6);
        spec.g = DMatrix::from_element(1, 1, 2.0);
        spec.g_tilde = DMatrix::from_element(1, 1, 0.5);
        spec.gamma2 = DVector::from_element(1, 0.3);
        let tree = TreeModel::new(&spec).unwrap();
        let b = tree_bsde_solve(&tree, &open(&spec, 0.0), NodeId::new(2, 3), &[1.2]).unwrap();
        let want = -2.0 * 1.2 - 0.5 * 1.2 - 0.3;
        assert!(b.y.iter().all(|l| l.iter().all(|v| (v - want).abs() < 1e-14)));
    }

    #[test]
    fn equilibrium_gain_tracks_riccati() {
        let spec = fixture(10);
        let eq = tree_equilibrium(&TreeModel::new(&spec).unwrap()).unwrap();
        let cont = solve_equilibrium_system(&fixture(1000)).unwrap();
        let (a, b) = (eq.law.theta[0][(0, 0)], cont.law.theta[0][(0, 0)]);
        assert!(((a - b) / b).abs() < 0.1, "{a} vs {b}");
    }
}
