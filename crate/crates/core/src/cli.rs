//! Batch front end: `solve`, `simulate`, `verify`, `oracle-compare`, `export`.
//!
//! Exit statuses: 0 every requested check passed, 1 a check failed (or the
//! solver broke down), 2 bad invocation or invalid problem file, 3 a
//! requested check is not checkable on this problem.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, Table};
use crate::model::ProblemSpec;
use crate::oracle::{tree_cost, tree_equilibrium, NodeId, TreeControl, TreeModel, MAX_DEPTH};
use crate::riccati::{solve_equilibrium_system, EquilibriumSolution, MARGIN_TOL};
use crate::simulate::{evaluate_cost, simulate_closed_loop, spike_cost_derivatives, RngConfig, SpikeEstimate, SpikeSampling};
use crate::verify::{
    certify, check_lemma_equality, check_representation, check_uniqueness, run_reduction_suite, tree_spike_report, EquilibriumCertificate,
    LemmaReport, RepresentationControl, SpikeReport, Tolerances, UniquenessReport, EXACT_TOL, FIRST_ORDER_TOL, UNIQUENESS_RESIDUAL_TOL,
};

/// Reference grid for the continuous gains in `oracle-compare`.
const REFERENCE_STEPS: usize = 1024;
/// Spike report threshold, in standard errors.
const SPIKE_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ExitStatus {
    Pass = 0,
    Fail = 1,
    Usage = 2,
    NotCheckable = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// How a library error surfaces at the command line.
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Grid(_)
            | Error::Invalid(_)
            | Error::GridMismatch { .. }
            | Error::NotSymmetric(_)
            | Error::OffGrid(_)
            | Error::DepthExceeded(_)
            | Error::Json(_)
            | Error::Io(_) => ExitStatus::Usage,
            Error::NotCheckable { .. } => ExitStatus::NotCheckable,
            Error::NonFinite { .. } | Error::NoDiscreteEquilibrium(_) | Error::Csv(_) => ExitStatus::Fail,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfeq", version, about = "Open-loop equilibria of time-inconsistent conditional mean-field LQ problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the equilibrium system; write Riccati and gain CSVs.
    Solve(RunArgs),
    /// Closed-loop Monte Carlo: ensemble, cost and spike derivatives.
    Simulate(RunArgs),
    /// Build and check the equilibrium certificate.
    Verify(RunArgs),
    /// Refinement study of the tree oracle against the continuous solution.
    OracleCompare(RunArgs),
    /// Write the discretized coefficients and long-format solution series.
    Export(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Solve,
    Simulate,
    Verify,
    OracleCompare,
    Export,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Problem file (JSON).
    #[arg(long)]
    problem: PathBuf,
    /// Override the grid step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Outer (conditioning) samples for spike estimates.
    #[arg(long, default_value_t = 64)]
    outer: usize,
    /// Inner samples per outer sample.
    #[arg(long, default_value_t = 4096)]
    inner: usize,
    /// Spike widths, strictly decreasing and on the grid.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long, default_value = "mfeq-out")]
    out: PathBuf,
    #[arg(long, default_value_t = FIRST_ORDER_TOL)]
    tol_first_order: f64,
    #[arg(long, default_value_t = MARGIN_TOL)]
    tol_margin: f64,
    /// Monte Carlo paths for ensembles and cost estimates.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    /// Skip the Monte Carlo spike test.
    #[arg(long)]
    no_spike: bool,
    /// Also run the uniqueness checks (verify).
    #[arg(long)]
    uniqueness: bool,
    /// Tree depths for oracle-compare and the uniqueness residual.
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 12, 16])]
    depths: Vec<usize>,
}

/// Validated run configuration, echoed into the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub problem: PathBuf,
    pub steps: Option<usize>,
    pub seed: u64,
    pub outer: usize,
    pub inner: usize,
    /// None means the default ladder for the problem's grid.
    pub eps: Option<Vec<f64>>,
    pub out: PathBuf,
    pub tolerances: Tolerances,
    pub paths: usize,
    pub spike: bool,
    pub uniqueness: bool,
    pub depths: Vec<usize>,
}

impl RunConfig {
    fn from_args(command: CommandKind, a: RunArgs) -> Result<Self> {
        if a.outer < 2 || a.inner < 2 {
            return Err(Error::Invalid("--outer and --inner must be at least 2".into()));
        }
        if a.paths < 2 {
            return Err(Error::Invalid("--paths must be at least 2".into()));
        }
        if let Some(eps) = &a.eps {
            if eps.is_empty() || eps.iter().any(|e| !e.is_finite() || *e <= 0.0) {
                return Err(Error::Invalid("--eps entries must be positive".into()));
            }
            if eps.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Invalid("--eps ladder must be strictly decreasing".into()));
            }
        }
        if !(a.tol_first_order >= 0.0 && a.tol_margin >= 0.0) {
            return Err(Error::Invalid("tolerances must be nonnegative".into()));
        }
        if a.depths.iter().any(|&d| d == 0 || d > MAX_DEPTH) {
            return Err(Error::Invalid(format!("--depths entries must lie in 1..={MAX_DEPTH}")));
        }
        Ok(Self {
            command,
            problem: a.problem,
            steps: a.steps,
            seed: a.seed,
            outer: a.outer,
            inner: a.inner,
            eps: a.eps,
            out: a.out,
            tolerances: Tolerances { first_order: a.tol_first_order, margin: a.tol_margin },
            paths: a.paths,
            spike: !a.no_spike,
            uniqueness: a.uniqueness,
            depths: a.depths,
        })
    }

    pub fn load_problem(&self) -> Result<ProblemSpec> {
        let text = fs::read_to_string(&self.problem)
            .map_err(|e| Error::Invalid(format!("cannot read problem file {}: {e}", self.problem.display())))?;
        let mut spec = ProblemSpec::from_json_str(&text)?;
        if let Some(n) = self.steps {
            spec = spec.regrid(n)?;
        }
        spec.ensure_valid()?;
        Ok(spec)
    }

    /// Spike widths in cells. The default ladder is T/10, T/20, T/40 when the
    /// grid allows it, otherwise 4, 2 and 1 cells.
    pub fn eps_cells(&self, spec: &ProblemSpec) -> Result<Vec<usize>> {
        let (steps, h) = (spec.grid.steps(), spec.grid.step_size());
        let cells: Vec<usize> = match &self.eps {
            Some(list) => list
                .iter()
                .map(|&e| {
                    let c = (e / h).round();
                    if c < 1.0 || (c * h - e).abs() > 1e-9 * h.max(e) {
                        Err(Error::Invalid(format!("--eps value {e} is not a multiple of the step {h}")))
                    } else {
                        Ok(c as usize)
                    }
                })
                .collect::<Result<_>>()?,
            None if steps % 40 == 0 => vec![steps / 10, steps / 20, steps / 40],
            None => [4, 2, 1].into_iter().filter(|&c| c <= steps / 4).collect(),
        };
        let room = steps - spike_nodes(spec).last().copied().unwrap_or(0);
        if cells.is_empty() || cells.iter().any(|&c| c > room) {
            return Err(Error::Invalid(format!("--eps ladder does not fit after the last spike time (room for {room} cells)")));
        }
        Ok(cells)
    }
}

/// Spike times 0, T/4, T/2, 3T/4, snapped down to grid nodes.
fn spike_nodes(spec: &ProblemSpec) -> Vec<usize> {
    let steps = spec.grid.steps();
    let mut out: Vec<usize> = (0..4).map(|q| q * steps / 4).collect();
    out.dedup();
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    generated_unix: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    status: ExitStatus,
    exit_code: i32,
    message: Option<String>,
}

/// What a subcommand hands back to the driver.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub status: ExitStatus,
    /// Failing check or error text.
    pub message: Option<String>,
    /// Files written into the output directory.
    pub outputs: Vec<String>,
}

impl Outcome {
    fn pass(outputs: Vec<String>) -> Self {
        Self { status: ExitStatus::Pass, message: None, outputs }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => ExitStatus::Usage.code(),
            };
        }
    };
    let (kind, args) = match cli.command {
        Command::Solve(a) => (CommandKind::Solve, a),
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::Verify(a) => (CommandKind::Verify, a),
        Command::OracleCompare(a) => (CommandKind::OracleCompare, a),
        Command::Export(a) => (CommandKind::Export, a),
    };
    let cfg = match RunConfig::from_args(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mfeq: {e}");
            return ExitStatus::Usage.code();
        }
    };
    execute(&cfg)
}

/// Runs a validated configuration, writes the manifest and returns the exit code.
pub fn execute(cfg: &RunConfig) -> i32 {
    let outcome = fs::create_dir_all(&cfg.out).map_err(Error::from).and_then(|_| {
        let spec = cfg.load_problem()?;
        match cfg.command {
            CommandKind::Solve => cmd_solve(cfg, &spec),
            CommandKind::Simulate => cmd_simulate(cfg, &spec),
            CommandKind::Verify => cmd_verify(cfg, &spec),
            CommandKind::OracleCompare => cmd_compare_oracle(cfg, &spec),
            CommandKind::Export => cmd_export(cfg, &spec),
        }
    });
    let outcome = outcome.unwrap_or_else(|e| Outcome { status: ExitStatus::of(&e), message: Some(e.to_string()), outputs: Vec::new() });
    match (&outcome.status, &outcome.message) {
        (ExitStatus::Pass, _) => {}
        (ExitStatus::Fail, Some(m)) => eprintln!("mfeq: FAIL: {m}"),
        (ExitStatus::NotCheckable, Some(m)) => eprintln!("mfeq: NOT CHECKABLE: {m}"),
        (_, Some(m)) => eprintln!("mfeq: error: {m}"),
        (_, None) => {}
    }
    let manifest = Manifest {
        tool: "mfeq",
        version: env!("CARGO_PKG_VERSION"),
        generated_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config: cfg,
        outputs: outcome.outputs,
        status: outcome.status,
        exit_code: outcome.status.code(),
        message: outcome.message,
    };
    if cfg.out.is_dir() {
        if let Err(e) = io::write_json(&cfg.out.join("manifest.json"), &manifest) {
            eprintln!("mfeq: cannot write manifest: {e}");
        }
    }
    manifest.exit_code
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, written: Vec::new() }
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        t.write(&self.dir.join(name))?;
        self.written.push(name.into());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, v: &T) -> Result<()> {
        io::write_json(&self.dir.join(name), v)?;
        self.written.push(name.into());
        Ok(())
    }
}

#[derive(Serialize)]
struct SolutionDocument<'a> {
    n: usize,
    m: usize,
    horizon: f64,
    steps: usize,
    theta0: Vec<f64>,
    phi0: Vec<f64>,
    p1_asymmetry: f64,
    certificate: &'a EquilibriumCertificate,
}

fn solution_document<'a>(spec: &ProblemSpec, eq: &EquilibriumSolution, cert: &'a EquilibriumCertificate) -> SolutionDocument<'a> {
    SolutionDocument {
        n: spec.n,
        m: spec.m,
        horizon: spec.grid.horizon(),
        steps: spec.grid.steps(),
        theta0: eq.law.theta[0].transpose().iter().cloned().collect(),
        phi0: eq.law.phi[0].iter().cloned().collect(),
        p1_asymmetry: eq.p1_asymmetry,
        certificate: cert,
    }
}

fn write_solution(w: &mut Writer, spec: &ProblemSpec, eq: &EquilibriumSolution, cert: &EquilibriumCertificate) -> Result<()> {
    w.table("riccati.csv", &io::riccati_table(spec, eq))?;
    w.table("gains.csv", &io::gains_table(spec, eq))?;
    w.json("solution.json", &solution_document(spec, eq, cert))
}

pub fn cmd_solve(cfg: &RunConfig, spec: &ProblemSpec) -> Result<Outcome> {
    let eq = solve_equilibrium_system(spec)?;
    let cert = certify(spec, &eq, cfg.tolerances);
    let mut w = Writer::new(&cfg.out);
    write_solution(&mut w, spec, &eq, &cert)?;
    Ok(Outcome::pass(w.written))
}

fn run_spike_ladder(cfg: &RunConfig, spec: &ProblemSpec, eq: &EquilibriumSolution) -> Result<Vec<(f64, SpikeEstimate)>> {
    let cells = cfg.eps_cells(spec)?;
    let rng = RngConfig::new(cfg.seed);
    let sampling = SpikeSampling { outer: cfg.outer, inner: cfg.inner, paired: true };
    let vs: Vec<DVector<f64>> = (0..spec.m)
        .flat_map(|a| {
            [1.0, -1.0].map(|s| {
                let mut v = DVector::zeros(spec.m);
                v[a] = s;
                v
            })
        })
        .collect();
    let mut out = Vec::new();
    for t in spike_nodes(spec) {
        for e in spike_cost_derivatives(spec, &eq.law, t, &vs, &cells, &rng, sampling)? {
            out.push((spec.grid.time(t), e));
        }
    }
    Ok(out)
}

pub fn cmd_simulate(cfg: &RunConfig, spec: &ProblemSpec) -> Result<Outcome> {
    let eq = solve_equilibrium_system(spec)?;
    let rng = RngConfig::new(cfg.seed);
    let ens = simulate_closed_loop(spec, &eq.law, &rng, cfg.paths)?;
    let cost = evaluate_cost(spec, &ens)?;
    let mut w = Writer::new(&cfg.out);
    w.table("ensemble.csv", &io::ensemble_table(&ens, spec.n, spec.m))?;
    w.json("cost.json", &cost)?;
    if cfg.spike {
        let est = run_spike_ladder(cfg, spec, &eq)?;
        w.table("spike.csv", &io::spike_table(&est, spec.m))?;
        w.json("spike.json", &SpikeReport::from_estimates("monte carlo", SPIKE_SIGMAS, &est))?;
    }
    Ok(Outcome::pass(w.written))
}

/// One pass/fail line of the verify summary.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, value: f64, tolerance: f64, pass: bool) -> Self {
        Self { name: name.into(), value, tolerance, pass }
    }
}

#[derive(Serialize)]
struct OracleChecks {
    depth: usize,
    spike: Option<SpikeReport>,
    lemma: Option<LemmaReport>,
    error: Option<String>,
}

#[derive(Serialize)]
struct VerifyDocument<'a> {
    certificate: &'a EquilibriumCertificate,
    oracle: Option<OracleChecks>,
    uniqueness: Option<UniquenessReport>,
    checks: &'a [CheckRow],
    first_failure: Option<String>,
    uniqueness_checkable: Option<bool>,
}

pub fn cmd_verify(cfg: &RunConfig, spec: &ProblemSpec) -> Result<Outcome> {
    let eq = solve_equilibrium_system(spec)?;
    let mut cert = certify(spec, &eq, cfg.tolerances);
    let mut w = Writer::new(&cfg.out);
    write_solution(&mut w, spec, &eq, &cert)?;

    if cfg.spike {
        let est = run_spike_ladder(cfg, spec, &eq)?;
        w.table("spike.csv", &io::spike_table(&est, spec.m))?;
        cert = cert.with_spike(SpikeReport::from_estimates("monte carlo", SPIKE_SIGMAS, &est));
    }
    cert = cert.with_reductions(run_reduction_suite(spec)?);

    let mut rows = vec![
        CheckRow::new("first-order identities", cert.first_order_residual, cert.tolerances.first_order, cert.first_order_residual <= cert.tolerances.first_order),
        CheckRow::new("second-order condition", cert.second_order_margin, -cert.tolerances.margin, cert.second_order_margin >= -cert.tolerances.margin),
        CheckRow::new("range inclusion", cert.range_failures as f64, 0.0, cert.range_ok),
    ];
    if let Some(s) = &cert.spike_report {
        rows.push(CheckRow::new("spike positivity", s.worst_z, -s.sigmas, s.pass));
    }
    for r in &cert.reductions {
        rows.push(CheckRow::new(&format!("reductions: {}", r.name), r.gap, r.tol, r.pass));
    }

    let steps = spec.grid.steps();
    let oracle = (steps <= MAX_DEPTH).then(|| {
        let mut oc = OracleChecks { depth: steps, spike: None, lemma: None, error: None };
        match tree_spike_report(spec, steps) {
            Ok(r) => {
                let min = r.entries.iter().map(|e| e.derivative).fold(f64::INFINITY, f64::min);
                rows.push(CheckRow::new("oracle spike positivity", min, 0.0, r.pass));
                oc.spike = Some(r);
            }
            Err(e) => {
                rows.push(CheckRow::new("oracle spike positivity", f64::NAN, 0.0, false));
                oc.error = Some(e.to_string());
            }
        }
        match check_lemma_equality(spec, &eq.law, &[]) {
            Ok(r) => {
                rows.push(CheckRow::new("oracle mean-field identity", r.max_gap, EXACT_TOL, r.max_gap <= EXACT_TOL));
                oc.lemma = Some(r);
            }
            Err(e) => {
                rows.push(CheckRow::new("oracle mean-field identity", f64::NAN, EXACT_TOL, false));
                oc.error.get_or_insert(e.to_string());
            }
        }
        oc
    });

    let mut uniqueness = None;
    let mut not_checkable = None;
    if cfg.uniqueness {
        match check_uniqueness(spec, &eq, &cfg.depths) {
            Ok(u) => {
                rows.push(CheckRow::new("uniqueness homogeneous system", u.homogeneous_max, EXACT_TOL, u.homogeneous_max <= EXACT_TOL));
                let last = u.rows.last().map_or(0.0, |r| r.residual);
                rows.push(CheckRow::new("uniqueness representation residual", last, UNIQUENESS_RESIDUAL_TOL, last <= UNIQUENESS_RESIDUAL_TOL && u.decays()));
                uniqueness = Some(u);
            }
            Err(e @ Error::NotCheckable { .. }) => not_checkable = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }

    let first_failure = rows.iter().find(|r| !r.pass).map(|r| r.name.clone());
    let mut summary = Table::new(["check", "value", "tolerance", "pass"]);
    for r in &rows {
        summary.push(vec![r.name.clone(), fmt_f64(r.value), fmt_f64(r.tolerance), u8::from(r.pass).to_string()]);
    }
    w.table("summary.csv", &summary)?;
    let doc = VerifyDocument {
        certificate: &cert,
        oracle,
        uniqueness,
        checks: &rows,
        first_failure: first_failure.clone(),
        uniqueness_checkable: cfg.uniqueness.then_some(not_checkable.is_none()),
    };
    w.json("certificate.json", &doc)?;

    let (status, message) = match (first_failure, not_checkable) {
        (Some(name), _) => (ExitStatus::Fail, Some(name)),
        (None, Some(msg)) => (ExitStatus::NotCheckable, Some(msg)),
        (None, None) => (ExitStatus::Pass, None),
    };
    Ok(Outcome { status, message, outputs: w.written })
}

/// One depth of the oracle refinement study.
#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub depth: usize,
    pub tree_theta0: Vec<f64>,
    pub gain_gap_abs: f64,
    pub gain_gap_rel: f64,
    pub phi_gap_abs: f64,
    pub tree_cost: f64,
    pub mc_cost: f64,
    pub mc_std_error: f64,
    pub cost_z: f64,
    pub tree_spike_min: f64,
    pub representation_gap: f64,
}

pub fn oracle_rows(cfg: &RunConfig, spec: &ProblemSpec) -> Result<(Vec<OracleRow>, Vec<f64>)> {
    let reference = solve_equilibrium_system(&spec.regrid(REFERENCE_STEPS.max(spec.grid.steps()))?)?;
    let theta_ref = &reference.law.theta[0];
    let phi_ref = &reference.law.phi[0];
    let rng = RngConfig::new(cfg.seed);
    let control = RepresentationControl::Feedback { theta: theta_ref.clone(), phi: phi_ref.clone() };
    let mut rows = Vec::new();
    for &d in &cfg.depths {
        let tree = TreeModel::with_depth(spec, d)?;
        let teq = tree_equilibrium(&tree)?;
        let theta = &teq.law.theta[0];
        let gap = (theta - theta_ref).amax();
        let scale = theta_ref.amax();
        let tc = tree_cost(&tree, &TreeControl::Feedback(teq.law.clone()), NodeId::ROOT, spec.x0.as_slice())?;
        let mc = evaluate_cost(&tree.spec, &simulate_closed_loop(&tree.spec, &teq.law, &rng, cfg.paths)?)?;
        let spike = tree_spike_report(spec, d)?;
        let repr = check_representation(spec, &control, &[d])?;
        rows.push(OracleRow {
            depth: d,
            tree_theta0: theta.transpose().iter().cloned().collect(),
            gain_gap_abs: gap,
            gain_gap_rel: if scale > 0.0 { gap / scale } else { gap },
            phi_gap_abs: (&teq.law.phi[0] - phi_ref).amax(),
            tree_cost: tc,
            mc_cost: mc.mean,
            mc_std_error: mc.std_error,
            cost_z: if mc.std_error > 0.0 { (mc.mean - tc) / mc.std_error } else { 0.0 },
            tree_spike_min: spike.entries.iter().map(|e| e.derivative).fold(0.0, f64::min),
            representation_gap: repr.rows[0].gap,
        });
    }
    Ok((rows, reference.law.theta[0].transpose().iter().cloned().collect()))
}

pub fn cmd_compare_oracle(cfg: &RunConfig, spec: &ProblemSpec) -> Result<Outcome> {
    let (rows, theta_ref) = oracle_rows(cfg, spec)?;
    let k = theta_ref.len();
    let mut cols = vec!["depth".to_string()];
    cols.extend((1..=k).map(|i| format!("tree_theta0_{i}")));
    cols.extend(
        [
            "gain_gap_abs",
            "gain_gap_rel",
            "phi_gap_abs",
            "tree_cost",
            "mc_cost",
            "mc_std_error",
            "cost_z",
            "tree_spike_min",
            "representation_gap",
        ]
        .map(String::from),
    );
    let mut t = Table::new(cols);
    for r in &rows {
        let mut row = vec![r.depth.to_string()];
        row.extend(r.tree_theta0.iter().map(|x| fmt_f64(*x)));
        row.extend(
            [r.gain_gap_abs, r.gain_gap_rel, r.phi_gap_abs, r.tree_cost, r.mc_cost, r.mc_std_error, r.cost_z, r.tree_spike_min, r.representation_gap]
                .map(fmt_f64),
        );
        t.push(row);
    }
    let mut w = Writer::new(&cfg.out);
    w.table("oracle.csv", &t)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        reference_steps: usize,
        reference_theta0: &'a [f64],
        rows: &'a [OracleRow],
    }
    w.json("oracle.json", &Doc { reference_steps: REFERENCE_STEPS.max(spec.grid.steps()), reference_theta0: &theta_ref, rows: &rows })?;
    let bad = rows.iter().find(|r| r.cost_z.abs() > SPIKE_SIGMAS);
    Ok(match bad {
        Some(r) => Outcome {
            status: ExitStatus::Fail,
            message: Some(format!("cost cross-check at depth {}: {:.2} standard errors", r.depth, r.cost_z)),
            outputs: w.written,
        },
        None => Outcome::pass(w.written),
    })
}

pub fn cmd_export(cfg: &RunConfig, spec: &ProblemSpec) -> Result<Outcome> {
    let mut w = Writer::new(&cfg.out);
    fs::write(cfg.out.join("problem.json"), spec.to_json_string()? + "\n")?;
    w.written.push("problem.json".into());
    w.table("coefficients.csv", &io::coefficients_table(spec))?;
    let eq = solve_equilibrium_system(spec)?;
    let mut series = Table::new(["series", "time", "value"]);
    for tab in [io::gains_table(spec, &eq), io::riccati_table(spec, &eq)] {
        for row in &tab.rows {
            for (c, v) in tab.columns.iter().zip(row).skip(1) {
                series.push(vec![c.clone(), row[0].clone(), v.clone()]);
            }
        }
    }
    w.table("series.csv", &series)?;
    Ok(Outcome::pass(w.written))
}
