//! FISTA with exact projection onto the discrete continuity constraint.
//!
//! Each iteration takes a gradient step on the unweighted objective `𝒴`,
//! projects onto `{Div(P, M) + ρ̄_𝒟 = 0}` with one spectral Poisson solve, and
//! extrapolates with the usual momentum weights. Planning problems and games
//! share the loop; they differ in grid layout, Poisson variant and the
//! terminal term of the gradient.

use std::time::Instant;

use ndarray::{ArrayD, Axis};
use thiserror::Error;

use crate::costs::{self, CostError, CostModel, DEFAULT_DENSITY_FLOOR};
use crate::grid::{BoundaryData, Grid, GridError, GridShape, Norms, StaggeredFields, TimeBoundary};
use crate::poisson::SpectralPlan;

/// Relative tolerance of the mass-balance precondition.
pub const MASS_BALANCE_TOL: f64 = 1e-8;
/// Relative slack of the backtracking sufficient-decrease test.
pub const BACKTRACK_SLACK: f64 = 1e-12;
/// Objectives above this are treated as divergence.
pub const DIVERGENCE_OBJECTIVE: f64 = 1e12;
/// Backtracking gives up once η falls below this fraction of its initial value.
pub const MIN_STEP_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("initial and terminal masses differ: {mass0} vs {mass1}")]
    MassImbalance { mass0: f64, mass1: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Unsupported(&'static str),
    #[error("iteration diverged at step {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        report: Box<SolveReport>,
    },
}

/// A discretized planning problem or game.
#[derive(Debug, Clone)]
pub struct Problem {
    grid: Grid,
    bnd: BoundaryData,
    model: CostModel,
}

impl Problem {
    /// Planning / transport between `rho0` and `rho1`, sampled at spatial cell centers.
    pub fn mfp(shape: GridShape, rho0: ArrayD<f64>, rho1: ArrayD<f64>, model: CostModel) -> Result<Self, SolveError> {
        let grid = Grid::mfp(shape);
        let bnd = BoundaryData::new(&grid, rho0, Some(rho1))?;
        model.check(&grid)?;
        let w = grid.shape().space_cell_volume();
        let mass0 = w * bnd.rho0().sum();
        let mass1 = w * bnd.rho1().expect("pinned").sum();
        if (mass0 - mass1).abs() > MASS_BALANCE_TOL * mass0.abs().max(mass1.abs()) {
            return Err(SolveError::MassImbalance { mass0, mass1 });
        }
        Ok(Self { grid, bnd, model })
    }

    /// Potential game from `rho0`; the model should carry the terminal preference.
    pub fn mfg(shape: GridShape, rho0: ArrayD<f64>, model: CostModel) -> Result<Self, SolveError> {
        let grid = Grid::mfg(shape);
        let bnd = BoundaryData::new(&grid, rho0, None)?;
        model.check(&grid)?;
        Ok(Self { grid, bnd, model })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> &GridShape {
        self.grid.shape()
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.bnd
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn is_game(&self) -> bool {
        self.grid.time() == TimeBoundary::FreeTerminal
    }

    /// Density frozen at `ρ₀` with zero flux. Feasible for games and strictly inside the
    /// domain of `L` when `ρ₀ > 0`, unlike the projection of the all-ones start.
    pub fn resting_start(&self) -> StaggeredFields {
        let mut x = self.grid.zeros();
        let rho0 = self.bnd.rho0();
        for mut slice in x.component_mut(0).outer_iter_mut() {
            slice.assign(rho0);
        }
        x
    }

    /// `Σ_x ρ₀(x) Π_{d≥1} Δ_d`.
    pub fn initial_mass(&self) -> f64 {
        self.grid.shape().space_cell_volume() * self.bnd.rho0().sum()
    }

    /// Magnitude used to scale feasibility tolerances: `max(1, ‖ρ̄_𝒟‖₂)`.
    pub fn scale(&self) -> f64 {
        Norms::of_center(self.bnd.div_term(), self.grid.shape()).weighted_l2.max(1.0)
    }
}

/// Step-size rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    Constant(f64),
    /// Sufficient-decrease backtracking: each iteration starts from
    /// `growth · η_prev` and multiplies by `shrink` until the quadratic upper
    /// bound holds. `growth = 1` gives the classical non-increasing rule.
    Backtracking { initial: f64, shrink: f64, growth: f64 },
}

impl StepPolicy {
    pub fn initial(&self) -> f64 {
        match *self {
            StepPolicy::Constant(eta) => eta,
            StepPolicy::Backtracking { initial, .. } => initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub step: StepPolicy,
    /// Stop at the first iterate whose change in `‖·‖₂` is at most this.
    pub tol: f64,
    pub max_iters: usize,
    pub density_floor: f64,
    /// Record diagnostics every this many iterations (and at the last one).
    pub record_every: usize,
    /// Restart momentum when the iterate change grows (off by default).
    pub restart: bool,
    /// Check feasibility and mass after every projection, not only when recording.
    pub monitor_projection: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: StepPolicy::Constant(0.1),
            tol: 1e-6,
            max_iters: 50_000,
            density_floor: DEFAULT_DENSITY_FLOOR,
            record_every: 1,
            restart: false,
            monitor_projection: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::Config(m.to_string()));
        match self.step {
            StepPolicy::Constant(eta) if !(eta > 0.0 && eta.is_finite()) => return bad("step size must be positive"),
            StepPolicy::Backtracking { initial, shrink, growth } => {
                if !(initial > 0.0 && initial.is_finite()) {
                    return bad("initial step must be positive");
                }
                if !(shrink > 0.0 && shrink < 1.0) {
                    return bad("shrink factor must lie in (0, 1)");
                }
                if !(growth >= 1.0 && growth.is_finite()) {
                    return bad("growth factor must be at least 1");
                }
            }
            _ => {}
        }
        if !(self.tol >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        if self.max_iters == 0 && self.tol > 0.0 {
            // Zero iterations is allowed: it returns the initial guess.
        }
        if !(self.density_floor > 0.0) {
            return bad("density floor must be positive");
        }
        if self.record_every == 0 {
            return bad("record_every must be positive");
        }
        Ok(())
    }
}

/// The three convergence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residues {
    /// `‖x − proj(x − η∇𝒴(x))‖₂ / η`.
    pub stationarity: f64,
    /// `‖Div(P, M) + ρ̄_𝒟‖₂`.
    pub feasibility: f64,
    /// `max_t |Σ_x ρ̄(t, x) Π_{d≥1}Δ_d − Σ_x ρ₀(x) Π_{d≥1}Δ_d|`.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Volume-weighted objective.
    pub objective: f64,
    pub residues: Residues,
    pub min_density: f64,
    pub step: f64,
    pub elapsed: f64,
}

/// Per-level summary for multiscale drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInfo {
    pub shape: GridShape,
    pub iterations: usize,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub fields: StaggeredFields,
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
    pub objective: f64,
    pub residues: Residues,
    pub elapsed: f64,
    /// Largest feasibility and mass residues seen after any projection.
    pub max_feasibility: f64,
    pub max_mass: f64,
    /// Total number of cell evaluations that hit the density floor.
    pub clamped: usize,
    /// Poisson solves whose right-hand side had a mean component above tolerance.
    pub incompatible_solves: usize,
    pub levels: Vec<LevelInfo>,
    pub final_step: f64,
}

/// Reusable per-problem state: the spectral plan.
#[derive(Debug, Clone)]
pub struct Workspace {
    plan: SpectralPlan,
}

impl Workspace {
    pub fn new(problem: &Problem) -> Self {
        Self {
            plan: SpectralPlan::for_grid(problem.grid()),
        }
    }

    pub fn plan(&self) -> &SpectralPlan {
        &self.plan
    }
}

/// Euclidean projection onto `{Div(P, M) + ρ̄_𝒟 = 0}`.
///
/// Pinned grids solve `−Lap Φ̄ = Div(P, M) + ρ̄_𝒟` and add `Grad Φ̄`. Games
/// solve `(𝒟₀𝒟₀ᵀ + Σ_d 𝒟_d𝒟_dᵀ) Φ̄ = 𝒟₀P + ρ̄_𝒟 + Σ_d 𝒟_d M_d` and subtract
/// `(𝒟₀ᵀΦ̄, 𝒟_dᵀΦ̄)`; since `𝒟_dᵀ = −𝒟*_d` both are `x + Grad Φ̄`.
pub fn project(problem: &Problem, plan: &SpectralPlan, fields: &StaggeredFields) -> Result<StaggeredFields, SolveError> {
    let grid = problem.grid();
    let rhs = grid.continuity_residual(fields, problem.boundary())?;
    let phi = plan.solve(&rhs)?;
    let mut out = fields.clone();
    out.axpy(1.0, &grid.gradient(&phi)?);
    Ok(out)
}

/// Feasibility and mass residues (cheap; no gradient evaluation).
pub fn constraint_residues(problem: &Problem, fields: &StaggeredFields) -> Result<(f64, f64), SolveError> {
    let grid = problem.grid();
    let shape = grid.shape();
    let r = grid.continuity_residual(fields, problem.boundary())?;
    let feasibility = Norms::of_center(&r, shape).weighted_l2;
    let mut rho_bar = grid.face_average(0, fields.rho.view());
    rho_bar += problem.boundary().avg_term();
    let w = shape.space_cell_volume();
    let m0 = problem.initial_mass();
    let mass = rho_bar
        .axis_iter(Axis(0))
        .map(|slice| (w * slice.iter().fold(0.0, |a, v| a + v) - m0).abs())
        .fold(0.0, f64::max);
    Ok((feasibility, mass))
}

/// All three residues at `fields` for step `eta`.
pub fn residues(problem: &Problem, plan: &SpectralPlan, fields: &StaggeredFields, eta: f64, floor: f64) -> Result<Residues, SolveError> {
    let g = costs::objective_grad(problem.grid(), fields, problem.boundary(), problem.model(), floor)?;
    let mut step = fields.clone();
    step.axpy(-eta, &g.grad);
    let p = project(problem, plan, &step)?;
    let stationarity = Norms::of_fields(&fields.sub(&p), problem.shape()).weighted_l2 / eta;
    let (feasibility, mass) = constraint_residues(problem, fields)?;
    Ok(Residues {
        stationarity,
        feasibility,
        mass,
    })
}

fn min_density(problem: &Problem, fields: &StaggeredFields) -> f64 {
    let mut rho_bar = problem.grid().face_average(0, fields.rho.view());
    rho_bar += problem.boundary().avg_term();
    rho_bar.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Solves a planning problem (pinned time boundary).
pub fn solve_mfp(problem: &Problem, config: &SolverConfig, init: Option<&StaggeredFields>) -> Result<SolveReport, SolveError> {
    if problem.is_game() {
        return Err(SolveError::Unsupported("solve_mfp needs a planning problem"));
    }
    solve(problem, config, init)
}

/// Solves a potential game (free terminal slice).
pub fn solve_mfg(problem: &Problem, config: &SolverConfig, init: Option<&StaggeredFields>) -> Result<SolveReport, SolveError> {
    if !problem.is_game() {
        return Err(SolveError::Unsupported("solve_mfg needs a game problem"));
    }
    solve(problem, config, init)
}

/// FISTA for either problem class. `init` defaults to `P ≡ M ≡ 1` for planning
/// problems and to [`Problem::resting_start`] for games.
pub fn solve(problem: &Problem, config: &SolverConfig, init: Option<&StaggeredFields>) -> Result<SolveReport, SolveError> {
    let ws = Workspace::new(problem);
    solve_with(problem, &ws, config, init, &mut |_, _| {})
}

/// Shrinks `eta` until the projected step satisfies the sufficient-decrease
/// bound; `None` once `eta` drops below `min_eta`.
#[allow(clippy::too_many_arguments)]
fn backtrack(
    problem: &Problem,
    plan: &SpectralPlan,
    x_hat: &StaggeredFields,
    f_hat: f64,
    grad: &StaggeredFields,
    mut eta: f64,
    shrink: f64,
    min_eta: f64,
) -> Result<Option<(StaggeredFields, f64)>, SolveError> {
    let (grid, bnd, model) = (problem.grid(), problem.boundary(), problem.model());
    // The slack absorbs summation rounding once decreases become tiny.
    let slack = BACKTRACK_SLACK * f_hat.abs().max(1.0);
    while eta >= min_eta {
        let mut y = x_hat.clone();
        y.axpy(-eta, grad);
        let p = project(problem, plan, &y)?;
        let f_p = costs::unweighted_objective(grid, &p, bnd, model)?;
        let d = p.sub(x_hat);
        let bound = f_hat + d.dot(grad) + d.norm_sq() / (2.0 * eta);
        // From an infeasible extrapolation point only a finite candidate is required.
        let accept = if f_hat.is_finite() { f_p <= bound + slack } else { f_p.is_finite() };
        if accept {
            return Ok(Some((p, eta)));
        }
        eta *= shrink;
    }
    Ok(None)
}

/// [`solve`] with a reusable workspace and an observer called with every
/// new (projected) iterate.
pub fn solve_with(
    problem: &Problem,
    ws: &Workspace,
    config: &SolverConfig,
    init: Option<&StaggeredFields>,
    observer: &mut dyn FnMut(usize, &StaggeredFields),
) -> Result<SolveReport, SolveError> {
    config.validate()?;
    let grid = problem.grid();
    let shape = grid.shape();
    let bnd = problem.boundary();
    let model = problem.model();
    let plan = ws.plan();
    let start = Instant::now();
    let incompatible_before = plan.incompatible_count();
    let vol_sqrt = shape.cell_volume().sqrt();

    let mut x = match init {
        Some(f) => {
            grid.check_fields(f)?;
            f.clone()
        }
        None if problem.is_game() => problem.resting_start(),
        None => grid.filled(1.0),
    };
    let mut x_hat = x.clone();
    let mut tau = 1.0_f64;
    let mut eta = config.step.initial();
    let mut records = Vec::new();
    let mut clamped = 0usize;
    let mut max_feasibility = 0.0_f64;
    let mut max_mass = 0.0_f64;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut last_change = f64::INFINITY;

    let record = |k: usize, x: &StaggeredFields, eta: f64, records: &mut Vec<IterationRecord>| -> Result<f64, SolveError> {
        let objective = costs::objective_value(grid, x, bnd, model)?;
        let res = residues(problem, plan, x, eta, config.density_floor)?;
        records.push(IterationRecord {
            iter: k,
            objective,
            residues: res,
            min_density: min_density(problem, x),
            step: eta,
            elapsed: start.elapsed().as_secs_f64(),
        });
        Ok(objective)
    };

    let diverged = |k: usize, reason: String, x: StaggeredFields, records: Vec<IterationRecord>, eta: f64| {
        let elapsed = start.elapsed().as_secs_f64();
        SolveError::Diverged {
            iteration: k,
            reason,
            report: Box::new(SolveReport {
                fields: x,
                iterations: k,
                converged: false,
                records,
                objective: f64::NAN,
                residues: Residues {
                    stationarity: f64::NAN,
                    feasibility: f64::NAN,
                    mass: f64::NAN,
                },
                elapsed,
                max_feasibility: f64::NAN,
                max_mass: f64::NAN,
                clamped: 0,
                incompatible_solves: 0,
                levels: Vec::new(),
                final_step: eta,
            }),
        }
    };

    for k in 1..=config.max_iters {
        let mut f_hat = f64::NAN;
        if let StepPolicy::Backtracking { .. } = config.step {
            f_hat = costs::unweighted_objective(grid, &x_hat, bnd, model)?;
            if !f_hat.is_finite() && k > 1 {
                // Extrapolated outside the domain: restart momentum from the last iterate.
                x_hat = x.clone();
                tau = 1.0;
                f_hat = costs::unweighted_objective(grid, &x_hat, bnd, model)?;
            }
        }
        let mut g = costs::objective_grad(grid, &x_hat, bnd, model, config.density_floor)?;
        clamped += g.clamped;
        let x_new = match config.step {
            StepPolicy::Constant(_) => {
                let mut y = x_hat.clone();
                y.axpy(-eta, &g.grad);
                project(problem, plan, &y)?
            }
            StepPolicy::Backtracking { initial, shrink, growth } => {
                let start_eta = eta * growth;
                let min_eta = MIN_STEP_RATIO * initial;
                let mut found = backtrack(problem, plan, &x_hat, f_hat, &g.grad, start_eta, shrink, min_eta)?;
                if found.is_none() && x_hat != x {
                    // Retry from the last iterate without momentum before giving up.
                    x_hat = x.clone();
                    tau = 1.0;
                    f_hat = costs::unweighted_objective(grid, &x_hat, bnd, model)?;
                    g = costs::objective_grad(grid, &x_hat, bnd, model, config.density_floor)?;
                    clamped += g.clamped;
                    found = backtrack(problem, plan, &x_hat, f_hat, &g.grad, start_eta, shrink, min_eta)?;
                }
                match found {
                    Some((p, e)) => {
                        eta = e;
                        p
                    }
                    None => {
                        return Err(diverged(k, format!("line search collapsed (η < {min_eta:e})"), x, records, eta));
                    }
                }
            }
        };
        if !x_new.is_finite() {
            return Err(diverged(k, "non-finite iterate".into(), x, records, eta));
        }
        if config.monitor_projection {
            let (f, m) = constraint_residues(problem, &x_new)?;
            max_feasibility = max_feasibility.max(f);
            max_mass = max_mass.max(m);
        }

        let change = vol_sqrt * x_new.sub(&x).norm_sq().sqrt();
        let tau_next = 0.5 * (1.0 + (1.0 + 4.0 * tau * tau).sqrt());
        let restart = config.restart && change > last_change;
        let omega = if restart { 0.0 } else { (tau - 1.0) / tau_next };
        x_hat = x_new.clone();
        x_hat.axpy(omega, &x_new.sub(&x));
        tau = if restart { 1.0 } else { tau_next };
        last_change = change;
        x = x_new;
        iterations = k;
        observer(k, &x);

        let done = change <= config.tol;
        if done || k % config.record_every == 0 || k == config.max_iters {
            let objective = record(k, &x, eta, &mut records)?;
            if objective.is_finite() && objective > DIVERGENCE_OBJECTIVE {
                return Err(diverged(k, format!("objective {objective:e} exceeds {DIVERGENCE_OBJECTIVE:e}"), x, records, eta));
            }
        }
        if done {
            converged = true;
            break;
        }
    }

    if iterations == 0 {
        record(0, &x, eta, &mut records)?;
    }
    let (objective, res) = match records.last() {
        Some(r) => (r.objective, r.residues),
        None => unreachable!("at least one record"),
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok(SolveReport {
        fields: x,
        iterations,
        converged,
        records,
        objective,
        residues: res,
        elapsed,
        max_feasibility,
        max_mass,
        clamped,
        incompatible_solves: plan.incompatible_count() - incompatible_before,
        levels: vec![LevelInfo {
            shape: shape.clone(),
            iterations,
            elapsed,
        }],
        final_step: eta,
    })
}
