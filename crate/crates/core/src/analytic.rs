//! Closed-form 1D transport between `ρ₀(x) = x + ½` and `ρ₁ ≡ 1`, plus
//! brute-force oracles shared by the test suites.

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::costs::CostModel;
use crate::grid::{Grid, GridShape, StaggeredFields, TimeBoundary};
use crate::solver::{Problem, SolveError};

/// Below this time the `t = 0` branches are used.
pub const SMALL_T: f64 = 1e-6;
/// Largest number of unknowns accepted by [`dense_projection_oracle`].
pub const DENSE_ORACLE_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("point ({t}, {x}) lies outside [0,1]²")]
    OutOfDomain { t: f64, x: f64 },
    #[error("{0} unknowns exceed the dense oracle cap of {DENSE_ORACLE_CAP}")]
    TooLarge(usize),
    #[error("{0}")]
    Singular(&'static str),
}

fn check(t: f64, x: f64) -> Result<(), AnalyticError> {
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(AnalyticError::OutOfDomain { t, x })
    }
}

fn root(t: f64, x: f64) -> f64 {
    (2.0 * t * x + (0.5 * t - 1.0).powi(2)).sqrt()
}

/// Optimal density `ρ*(t, x)`.
pub fn exact_density(t: f64, x: f64) -> Result<f64, AnalyticError> {
    check(t, x)?;
    if t < SMALL_T {
        return Ok(x + 0.5);
    }
    let s = root(t, x);
    Ok((s + t - 1.0) / (t * s))
}

/// Optimal flux `m*(t, x)`.
pub fn exact_flux(t: f64, x: f64) -> Result<f64, AnalyticError> {
    check(t, x)?;
    if t < SMALL_T {
        return Ok(0.25 * x * (x - 1.0) * (2.0 * x + 1.0));
    }
    let s = root(t, x);
    let t2 = t * t;
    let t3 = t2 * t;
    Ok(x / t2 - (3.0 - t) / (2.0 * t3) * s - (t - 1.0) * (t2 - 4.0) / (8.0 * t3) / s - (3.0 * t - 4.0) / (2.0 * t3))
}

/// `W₂²(ρ₀, ρ₁) = 1/120`.
pub fn exact_w2sq() -> f64 {
    1.0 / 120.0
}

/// `W₂²` implied by an OT objective value. With `L = ‖β‖²/(2β₀)` the
/// minimal kinetic energy is `W₂²/2`.
pub fn w2sq_from_objective(objective: f64) -> f64 {
    2.0 * objective
}

/// The benchmark as a planning problem on an `n0 × n1` grid, with the OT model.
pub fn ot1d_problem(n0: usize, n1: usize) -> Result<Problem, SolveError> {
    let shape = GridShape::new(vec![n0, n1])?;
    let rho0 = ArrayD::from_shape_fn(IxDyn(&[n1]), |ix| shape.center(1, ix[0]) + 0.5);
    let rho1 = ArrayD::from_elem(IxDyn(&[n1]), 1.0);
    Problem::mfp(shape, rho0, rho1, CostModel::ot())
}

/// `ρ*` on the density faces and `m*` on the flux faces of a 1D pinned grid.
pub fn sample_exact(grid: &Grid) -> Result<StaggeredFields, AnalyticError> {
    let s = grid.shape();
    assert_eq!(s.space_ndim(), 1, "the exact solution is one-dimensional");
    let mut f = grid.zeros();
    for ((k, j), v) in f.rho.indexed_iter_mut().map(|(ix, v)| ((ix[0], ix[1]), v)) {
        *v = exact_density(s.face(0, k), s.center(1, j))?;
    }
    for ((k, j), v) in f.flux[0].indexed_iter_mut().map(|(ix, v)| ((ix[0], ix[1]), v)) {
        *v = exact_flux(s.center(0, k), s.face(1, j))?;
    }
    Ok(f)
}

/// Discretization error against the exact solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    /// `sqrt(Δ₀Δ₁) ‖(P, M) − (ρ*, m*)‖_F`.
    pub l2: f64,
    /// Largest entrywise deviation.
    pub max: f64,
}

pub fn error_norms(grid: &Grid, fields: &StaggeredFields) -> Result<ErrorNorms, AnalyticError> {
    let exact = sample_exact(grid)?;
    let diff = fields.sub(&exact);
    let n = crate::grid::Norms::of_fields(&diff, grid.shape());
    Ok(ErrorNorms {
        l2: n.weighted_l2,
        max: n.max_abs,
    })
}

/// Euclidean projection of `fields` onto the continuity constraint of
/// `problem`, by assembling the constraint matrix entry by entry and solving
/// the normal equations densely. Independent of the spectral machinery.
pub fn dense_projection_oracle(problem: &Problem, fields: &StaggeredFields) -> Result<StaggeredFields, AnalyticError> {
    let grid = problem.grid();
    let dims = grid.shape().dims().to_vec();
    let unknowns = fields.len();
    if unknowns > DENSE_ORACLE_CAP {
        return Err(AnalyticError::TooLarge(unknowns));
    }
    let cells: usize = dims.iter().product();
    let strides: Vec<usize> = (0..dims.len())
        .map(|d| dims[d + 1..].iter().product())
        .collect();

    // Column per unknown: +n_d on the cell before the face, −n_d on the one after.
    let mut a = DMatrix::<f64>::zeros(cells, unknowns);
    let mut col = 0;
    for axis in 0..dims.len() {
        let faces = grid.face_count(axis);
        let mut fshape = dims.clone();
        fshape[axis] = faces;
        for ix in ndarray::indices(IxDyn(&fshape)) {
            let mut before = 0;
            for d in 0..dims.len() {
                before += ix[d] * strides[d];
            }
            let inv = dims[axis] as f64;
            a[(before, col)] += inv;
            if ix[axis] + 1 < dims[axis] {
                a[(before + strides[axis], col)] -= inv;
            }
            col += 1;
        }
    }

    // b = ρ̄_𝒟 recomputed from the samples.
    let mut b = DVector::<f64>::zeros(cells);
    let n0 = dims[0] as f64;
    let last = (dims[0] - 1) * strides[0];
    for (s, v) in problem.boundary().rho0().iter().enumerate() {
        b[s] -= n0 * v;
    }
    if let Some(r1) = problem.boundary().rho1() {
        for (s, v) in r1.iter().enumerate() {
            b[last + s] += n0 * v;
        }
    }

    let x0 = DVector::from_iterator(unknowns, fields.values());
    let r = &a * &x0 + &b;
    let mut aat = &a * a.transpose();
    if grid.time() == TimeBoundary::Pinned {
        // Constants span the left null space; the rank-one shift leaves the
        // solution on consistent data unchanged.
        aat.add_scalar_mut(1.0 / cells as f64);
    }
    let lam = aat.lu().solve(&r).ok_or(AnalyticError::Singular("normal equations are singular"))?;
    let x = x0 - a.transpose() * lam;
    let mut out = fields.clone();
    out.assign_values(x.iter().copied());
    Ok(out)
}

/// Central-difference gradient of `f` with respect to every stored value.
pub fn finite_diff_gradient_oracle(f: &dyn Fn(&StaggeredFields) -> f64, fields: &StaggeredFields, h: f64) -> StaggeredFields {
    assert!(h > 0.0, "step must be positive");
    let base: Vec<f64> = fields.values().collect();
    let mut grad = vec![0.0; base.len()];
    let mut probe = fields.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        probe.assign_values(v.iter().copied());
        let up = f(&probe);
        v[i] = base[i] - h;
        probe.assign_values(v.iter().copied());
        let down = f(&probe);
        grad[i] = (up - down) / (2.0 * h);
    }
    let mut out = fields.clone();
    out.assign_values(grad.into_iter());
    out
}
