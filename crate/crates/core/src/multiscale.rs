//! Grid transfer by nearest-neighbour averaging, and the multilevel and
//! multigrid drivers built on it.
//!
//! A fine staggered point takes the mean of its nearest coarse points
//! (Euclidean distance in physical coordinates, all ties included); the
//! coarse grid is extended with its boundary slots (`ρ₀`, `ρ₁` on the time
//! boundary, zero flux on the walls) for this purpose. Restriction averages
//! over the inverse neighbourhoods with weights `1/|𝒩_j|`. Distances are
//! separable, so both maps factor into one sparse map per axis.

use std::time::Instant;

use ndarray::{concatenate, ArrayD, Axis, IxDyn};
use thiserror::Error;

use crate::costs::{self, CostModel};
use crate::grid::{BoundaryData, Grid, GridShape, StaggeredFields, TimeBoundary};
use crate::solver::{self, LevelInfo, Problem, SolveError, SolveReport, SolverConfig, Workspace};

/// Coordinates closer than this are treated as equidistant.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MultiscaleError {
    #[error("a hierarchy needs at least one level")]
    NoLevels,
    #[error("axis {axis} with {n} segments cannot be halved {times} times (coarsest level needs n ≥ 2)")]
    NotDivisible { axis: usize, n: usize, times: usize },
    #[error("grids {fine} and {coarse} are not related by a factor of two per axis")]
    Mismatch { fine: GridShape, coarse: GridShape },
    #[error("multiscale drivers support planning problems only")]
    GamesUnsupported,
    #[error("per-level tolerance list has {found} entries for {levels} levels")]
    ToleranceCount { found: usize, levels: usize },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Sparse map along one axis: output index → (input index, weight).
#[derive(Debug, Clone, PartialEq)]
struct AxisMap {
    rows: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    fn apply(&self, input: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
        let mut shape = input.shape().to_vec();
        shape[axis] = self.rows.len();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (r, row) in self.rows.iter().enumerate() {
            let mut dst = out.index_axis_mut(Axis(axis), r);
            for &(src, w) in row {
                dst.scaled_add(w, &input.index_axis(Axis(axis), src));
            }
        }
        out
    }
}

/// Argmin sets of `fine` points among `coarse` points.
fn nearest(fine: &[f64], coarse: &[f64]) -> Vec<Vec<usize>> {
    fine.iter()
        .map(|&x| {
            let best = coarse.iter().map(|&c| (c - x).abs()).fold(f64::INFINITY, f64::min);
            (0..coarse.len())
                .filter(|&i| (coarse[i] - x).abs() <= best + TIE_TOL)
                .collect()
        })
        .collect()
}

/// Transfer maps along one axis for one component.
#[derive(Debug, Clone, PartialEq)]
struct AxisTransfer {
    prolong: AxisMap,
    restrict: AxisMap,
    /// Boundary slots prepended/appended to the coarse array before prolongation.
    lead: bool,
    trail: bool,
}

fn axis_transfer(fine: &Grid, coarse: &Grid, component: usize, axis: usize) -> AxisTransfer {
    let nf = fine.shape().dims()[axis];
    let nc = coarse.shape().dims()[axis];
    if component != axis {
        let f: Vec<f64> = (0..nf).map(|k| fine.shape().center(axis, k)).collect();
        let c: Vec<f64> = (0..nc).map(|k| coarse.shape().center(axis, k)).collect();
        return build_transfer(&f, &c, 0, false, false);
    }
    let f: Vec<f64> = (0..fine.face_count(axis)).map(|k| fine.shape().face(axis, k)).collect();
    let interior: Vec<f64> = (0..coarse.face_count(axis)).map(|k| coarse.shape().face(axis, k)).collect();
    let trail = !(axis == 0 && coarse.time() == TimeBoundary::FreeTerminal);
    let mut c = vec![0.0];
    c.extend(&interior);
    if trail {
        c.push(1.0);
    }
    build_transfer(&f, &c, interior.len(), true, trail)
}

fn build_transfer(fine: &[f64], coarse_ext: &[f64], interior: usize, lead: bool, trail: bool) -> AxisTransfer {
    let sets = nearest(fine, coarse_ext);
    let prolong = AxisMap {
        rows: sets
            .iter()
            .map(|s| s.iter().map(|&i| (i, 1.0 / s.len() as f64)).collect())
            .collect(),
    };
    let first = usize::from(lead);
    let count = if lead || trail { interior } else { coarse_ext.len() };
    let restrict = AxisMap {
        rows: (first..first + count)
            .map(|i| {
                let members: Vec<(usize, f64)> = sets
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.contains(&i))
                    .map(|(j, s)| (j, 1.0 / s.len() as f64))
                    .collect();
                let total: f64 = members.iter().map(|(_, w)| w).sum();
                members.into_iter().map(|(j, w)| (j, w / total)).collect()
            })
            .collect(),
    };
    AxisTransfer {
        prolong,
        restrict,
        lead,
        trail,
    }
}

/// Transfer operators between a grid and its half-resolution parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    fine: Grid,
    coarse: Grid,
    /// `maps[component][axis]`.
    maps: Vec<Vec<AxisTransfer>>,
}

impl Transfer {
    pub fn new(fine: &Grid, coarse: &Grid) -> Result<Self, MultiscaleError> {
        let related = fine.time() == coarse.time()
            && fine.shape().ndim() == coarse.shape().ndim()
            && fine
                .shape()
                .dims()
                .iter()
                .zip(coarse.shape().dims())
                .all(|(&f, &c)| f == 2 * c);
        if !related {
            return Err(MultiscaleError::Mismatch {
                fine: fine.shape().clone(),
                coarse: coarse.shape().clone(),
            });
        }
        let ndim = fine.shape().ndim();
        let maps = (0..ndim)
            .map(|comp| (0..ndim).map(|axis| axis_transfer(fine, coarse, comp, axis)).collect())
            .collect();
        Ok(Self {
            fine: fine.clone(),
            coarse: coarse.clone(),
            maps,
        })
    }

    pub fn fine(&self) -> &Grid {
        &self.fine
    }

    pub fn coarse(&self) -> &Grid {
        &self.coarse
    }

    fn extend(&self, comp: usize, values: &ArrayD<f64>, bnd: &BoundaryData) -> ArrayD<f64> {
        let t = &self.maps[comp][comp];
        let mut slot_shape = values.shape().to_vec();
        slot_shape[comp] = 1;
        let slot = |src: Option<&ArrayD<f64>>| -> ArrayD<f64> {
            match src {
                Some(s) => s.clone().insert_axis(Axis(0)).into_dyn(),
                None => ArrayD::zeros(IxDyn(&slot_shape)),
            }
        };
        let (lead, trail) = if comp == 0 {
            (slot(Some(bnd.rho0())), slot(bnd.rho1()))
        } else {
            (slot(None), slot(None))
        };
        let mut parts = Vec::new();
        if t.lead {
            parts.push(lead.view());
        }
        parts.push(values.view());
        if t.trail {
            parts.push(trail.view());
        }
        concatenate(Axis(comp), &parts).expect("slot shapes match")
    }

    /// Coarse → fine, using the coarse boundary samples in the boundary slots.
    pub fn prolong(&self, coarse: &StaggeredFields, coarse_bnd: &BoundaryData) -> Result<StaggeredFields, MultiscaleError> {
        self.coarse.check_fields(coarse).map_err(SolveError::from)?;
        let mut comps = Vec::new();
        for (comp, values) in coarse.components().enumerate() {
            let mut a = self.extend(comp, values, coarse_bnd);
            for (axis, t) in self.maps[comp].iter().enumerate() {
                a = t.prolong.apply(&a, axis);
            }
            comps.push(a);
        }
        let rho = comps.remove(0);
        Ok(StaggeredFields { rho, flux: comps })
    }

    /// Fine → coarse.
    pub fn restrict(&self, fine: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError> {
        self.fine.check_fields(fine).map_err(SolveError::from)?;
        let mut comps = Vec::new();
        for (comp, values) in fine.components().enumerate() {
            let mut a = values.clone();
            for (axis, t) in self.maps[comp].iter().enumerate() {
                a = t.restrict.apply(&a, axis);
            }
            comps.push(a);
        }
        let rho = comps.remove(0);
        Ok(StaggeredFields { rho, flux: comps })
    }

    /// Averages spatial cell-center samples onto the coarse spatial grid.
    pub fn restrict_samples(&self, samples: &ArrayD<f64>) -> ArrayD<f64> {
        // Center maps of the density component act on spatial axes 1…D.
        let mut a = samples.clone();
        for axis in 1..self.fine.shape().ndim() {
            a = self.maps[0][axis].restrict.apply(&a, axis - 1);
        }
        a
    }
}

/// Problems on `L` nested grids; level 0 is the finest.
#[derive(Debug, Clone)]
pub struct LevelHierarchy {
    problems: Vec<Problem>,
    transfers: Vec<Transfer>,
}

impl LevelHierarchy {
    /// Builds `levels` grids by halving every axis. Coarse boundary densities,
    /// `Q` and `G` are averages of their fine children, so discrete masses
    /// agree across levels.
    pub fn new(problem: &Problem, levels: usize) -> Result<Self, MultiscaleError> {
        if levels == 0 {
            return Err(MultiscaleError::NoLevels);
        }
        if problem.is_game() {
            return Err(MultiscaleError::GamesUnsupported);
        }
        let factor = 1usize << (levels - 1);
        for (axis, &n) in problem.shape().dims().iter().enumerate() {
            if n % factor != 0 || n / factor < 2 {
                return Err(MultiscaleError::NotDivisible {
                    axis,
                    n,
                    times: levels - 1,
                });
            }
        }
        let mut problems = vec![problem.clone()];
        let mut transfers = Vec::new();
        for _ in 1..levels {
            let fine = problems.last().expect("nonempty");
            let shape = GridShape::new(fine.shape().dims().iter().map(|n| n / 2).collect::<Vec<_>>())
                .map_err(SolveError::from)?;
            let transfer = Transfer::new(fine.grid(), &Grid::mfp(shape.clone()))?;
            let bnd = fine.boundary();
            let rho0 = transfer.restrict_samples(bnd.rho0());
            let rho1 = transfer.restrict_samples(bnd.rho1().expect("planning problem"));
            let m = fine.model();
            let q = m.q().map(|q| transfer.restrict_samples(q));
            let model = CostModel::new(m.kind(), m.lambda_e(), m.lambda_q(), q).map_err(SolveError::from)?;
            let coarse = Problem::mfp(shape, rho0, rho1, model)?;
            problems.push(coarse);
            transfers.push(transfer);
        }
        Ok(Self { problems, transfers })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn level(&self, l: usize) -> &Problem {
        &self.problems[l]
    }

    /// Transfer between level `l` (fine) and `l + 1` (coarse).
    pub fn transfer(&self, l: usize) -> &Transfer {
        &self.transfers[l]
    }

    /// Prolongs a level-`l+1` iterate to level `l`.
    pub fn prolong(&self, l: usize, coarse: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError> {
        self.transfers[l].prolong(coarse, self.problems[l + 1].boundary())
    }

    /// Restricts a level-`l` iterate to level `l+1`.
    pub fn restrict(&self, l: usize, fine: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError> {
        self.transfers[l].restrict(fine)
    }
}

/// Options shared by the multilevel and multigrid drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleConfig {
    pub solver: SolverConfig,
    /// Per-level stopping tolerances, finest first; `None` uses `solver.tol` everywhere.
    pub level_tols: Option<Vec<f64>>,
    /// Project the corrected finest iterate back onto the constraint (multigrid only).
    pub final_projection: bool,
}

impl MultiscaleConfig {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            solver,
            level_tols: None,
            final_projection: true,
        }
    }

    fn level_config(&self, l: usize, budget: Option<usize>) -> SolverConfig {
        let mut c = self.solver.clone();
        if let Some(t) = &self.level_tols {
            c.tol = t[l];
        }
        if let Some(k) = budget {
            c.max_iters = k;
            c.tol = 0.0;
            c.record_every = k.max(1);
        }
        c
    }
}

/// One solver call at a level; `budget = Some(K)` runs exactly `K` iterations.
pub trait LevelSolver {
    fn levels(&self) -> usize;
    fn solve(&mut self, level: usize, init: &StaggeredFields, budget: Option<usize>) -> Result<SolveReport, MultiscaleError>;
    fn prolong(&self, level: usize, coarse: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError>;
    fn restrict(&self, level: usize, fine: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError>;
    fn ones(&self, level: usize) -> StaggeredFields;
    /// Final clean-up at the finest level (projection and fresh diagnostics).
    fn finish(&mut self, fields: StaggeredFields, report: SolveReport, project: bool) -> Result<SolveReport, MultiscaleError>;
}

/// FISTA on every level of a hierarchy.
pub struct FistaLevels<'a> {
    hierarchy: &'a LevelHierarchy,
    config: &'a MultiscaleConfig,
    workspaces: Vec<Workspace>,
}

impl<'a> FistaLevels<'a> {
    pub fn new(hierarchy: &'a LevelHierarchy, config: &'a MultiscaleConfig) -> Result<Self, MultiscaleError> {
        if let Some(t) = &config.level_tols {
            if t.len() != hierarchy.len() {
                return Err(MultiscaleError::ToleranceCount {
                    found: t.len(),
                    levels: hierarchy.len(),
                });
            }
        }
        Ok(Self {
            hierarchy,
            config,
            workspaces: hierarchy.problems.iter().map(Workspace::new).collect(),
        })
    }
}

impl LevelSolver for FistaLevels<'_> {
    fn levels(&self) -> usize {
        self.hierarchy.len()
    }

    fn solve(&mut self, level: usize, init: &StaggeredFields, budget: Option<usize>) -> Result<SolveReport, MultiscaleError> {
        let config = self.config.level_config(level, budget);
        let problem = self.hierarchy.level(level);
        Ok(solver::solve_with(problem, &self.workspaces[level], &config, Some(init), &mut |_, _| {})?)
    }

    fn prolong(&self, level: usize, coarse: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError> {
        self.hierarchy.prolong(level, coarse)
    }

    fn restrict(&self, level: usize, fine: &StaggeredFields) -> Result<StaggeredFields, MultiscaleError> {
        self.hierarchy.restrict(level, fine)
    }

    fn ones(&self, level: usize) -> StaggeredFields {
        self.hierarchy.level(level).grid().filled(1.0)
    }

    fn finish(&mut self, fields: StaggeredFields, mut report: SolveReport, project: bool) -> Result<SolveReport, MultiscaleError> {
        let problem = self.hierarchy.level(0);
        let plan = self.workspaces[0].plan();
        let fields = if project {
            solver::project(problem, plan, &fields)?
        } else {
            fields
        };
        let eta = report.final_step;
        let res = solver::residues(problem, plan, &fields, eta, self.config.solver.density_floor)?;
        report.objective = costs::objective_value(problem.grid(), &fields, problem.boundary(), problem.model())
            .map_err(SolveError::from)?;
        report.residues = res;
        report.max_feasibility = report.max_feasibility.max(res.feasibility);
        report.max_mass = report.max_mass.max(res.mass);
        report.fields = fields;
        Ok(report)
    }
}

fn merge(total: &mut Option<SolveReport>, levels: &mut Vec<LevelInfo>, level_report: SolveReport) {
    levels.extend(level_report.levels.iter().cloned());
    if let Some(t) = total {
        t.max_feasibility = t.max_feasibility.max(level_report.max_feasibility);
        t.max_mass = t.max_mass.max(level_report.max_mass);
        t.clamped += level_report.clamped;
        t.incompatible_solves += level_report.incompatible_solves;
    }
}

/// Multilevel schedule: full solve on the coarsest level from `P ≡ M ≡ 1`,
/// then a full solve on each finer level from the prolonged coarse result.
pub fn ml_schedule(solver: &mut dyn LevelSolver) -> Result<SolveReport, MultiscaleError> {
    let start = Instant::now();
    let top = solver.levels() - 1;
    let mut levels = Vec::new();
    let mut report = solver.solve(top, &solver.ones(top), None)?;
    levels.extend(report.levels.iter().cloned());
    let (mut max_f, mut max_m, mut clamped, mut incompatible) =
        (report.max_feasibility, report.max_mass, report.clamped, report.incompatible_solves);
    for l in (0..top).rev() {
        let init = solver.prolong(l, &report.fields)?;
        report = solver.solve(l, &init, None)?;
        levels.extend(report.levels.iter().cloned());
        max_f = max_f.max(report.max_feasibility);
        max_m = max_m.max(report.max_mass);
        clamped += report.clamped;
        incompatible += report.incompatible_solves;
    }
    report.levels = levels;
    report.max_feasibility = max_f;
    report.max_mass = max_m;
    report.clamped = clamped;
    report.incompatible_solves = incompatible;
    report.elapsed = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Multigrid V-schedule with `k` pre-smoothing iterations per level:
/// smooth and restrict on the way down, solve fully on the coarsest level,
/// then correct `z_l ← z_l + Solve(Pro z_{l+1}) − Pro z_{l+1}` on the way up.
/// `k = 0` runs the multilevel schedule.
pub fn mg_schedule(solver: &mut dyn LevelSolver, k: usize, final_projection: bool) -> Result<SolveReport, MultiscaleError> {
    if k == 0 {
        let r = ml_schedule(solver)?;
        let fields = r.fields.clone();
        return solver.finish(fields, r, false);
    }
    let start = Instant::now();
    let top = solver.levels() - 1;
    let mut levels = Vec::new();
    let mut total: Option<SolveReport> = None;

    let mut z: Vec<StaggeredFields> = Vec::with_capacity(top + 1);
    let mut init = solver.ones(0);
    for l in 0..=top {
        if l > 0 {
            init = solver.restrict(l - 1, &z[l - 1])?;
        }
        let r = solver.solve(l, &init, Some(k))?;
        z.push(r.fields.clone());
        if total.is_none() {
            total = Some(r.clone());
        }
        merge(&mut total, &mut levels, r);
    }

    let r = solver.solve(top, &z[top], None)?;
    z[top] = r.fields.clone();
    let mut last = r.clone();
    merge(&mut total, &mut levels, r);

    for l in (0..top).rev() {
        let pro = solver.prolong(l, &z[l + 1])?;
        let r = solver.solve(l, &pro, None)?;
        let mut corrected = z[l].clone();
        corrected.axpy(1.0, &r.fields);
        corrected.axpy(-1.0, &pro);
        z[l] = corrected;
        last = r.clone();
        merge(&mut total, &mut levels, r);
    }

    let total = total.expect("at least one level");
    let mut report = last;
    report.levels = levels;
    report.max_feasibility = total.max_feasibility;
    report.max_mass = total.max_mass;
    report.clamped = total.clamped;
    report.incompatible_solves = total.incompatible_solves;
    let fields = z.swap_remove(0);
    let mut report = solver.finish(fields, report, final_projection)?;
    report.elapsed = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Multilevel FISTA on a planning problem.
pub fn ml_fista(hierarchy: &LevelHierarchy, config: &MultiscaleConfig) -> Result<SolveReport, MultiscaleError> {
    let mut levels = FistaLevels::new(hierarchy, config)?;
    ml_schedule(&mut levels)
}

/// Multigrid FISTA on a planning problem with `k` pre-smoothing iterations.
pub fn mg_fista(hierarchy: &LevelHierarchy, config: &MultiscaleConfig, k: usize) -> Result<SolveReport, MultiscaleError> {
    let mut levels = FistaLevels::new(hierarchy, config)?;
    mg_schedule(&mut levels, k, config.final_projection)
}
