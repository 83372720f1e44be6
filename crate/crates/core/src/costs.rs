//! Running and terminal costs and the discrete objective with its gradient.
//!
//! The pointwise integrand is
//! `Y(β₀, β, x) = L(β₀, β) + λ_E F_E(β₀) + λ_Q Q(x) β₀` with the kinetic
//! cost `L(β₀, β) = ‖β‖² / (2β₀)`. Gradients are taken with respect to the
//! unweighted sum `𝒴`; [`objective_value`] reports the volume-weighted value.

use ndarray::{ArrayD, Axis, IxDyn};
use thiserror::Error;

use crate::grid::{BoundaryData, CentralField, Grid, GridError, StaggeredFields, TimeBoundary};

/// Default lower bound applied to averaged densities before differentiating.
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("{what} must be nonnegative and finite, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("the OT model has no interaction energy (lambda_e = {lambda_e})")]
    OtWithInteraction { lambda_e: f64 },
    #[error("{what} has an invalid sample {value} at flat index {index}")]
    InvalidSample {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Interaction cost `F_E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKind {
    /// No interaction: pure Benamou–Brenier transport.
    Ot,
    /// `ρ log ρ`.
    Entropy,
    /// `ρ² / 2`.
    Quadratic,
    /// `1 / ρ`.
    Reciprocal,
}

/// Terminal preference `λ_G ∫ ρ(1,·) G` of a mean-field game.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub lambda_g: f64,
    /// Samples at spatial cell centers; may be negative.
    pub g: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    kind: CostKind,
    lambda_e: f64,
    lambda_q: f64,
    q: Option<ArrayD<f64>>,
    terminal: Option<TerminalCost>,
}

impl CostModel {
    /// Optimal transport: kinetic energy only.
    pub fn ot() -> Self {
        Self {
            kind: CostKind::Ot,
            lambda_e: 0.0,
            lambda_q: 0.0,
            q: None,
            terminal: None,
        }
    }

    /// `q` holds samples of `Q` at the spatial cell centers; `None` means `Q ≡ 0`.
    pub fn new(kind: CostKind, lambda_e: f64, lambda_q: f64, q: Option<ArrayD<f64>>) -> Result<Self, CostError> {
        for (what, value) in [("lambda_e", lambda_e), ("lambda_q", lambda_q)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(CostError::Domain { what, value });
            }
        }
        if kind == CostKind::Ot && lambda_e != 0.0 {
            return Err(CostError::OtWithInteraction { lambda_e });
        }
        if let Some(q) = &q {
            if let Some((index, &value)) = q.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(CostError::InvalidSample { what: "Q", index, value });
            }
        }
        Ok(Self {
            kind,
            lambda_e,
            lambda_q,
            q,
            terminal: None,
        })
    }

    /// Adds a terminal preference (mean-field games only).
    pub fn with_terminal(mut self, lambda_g: f64, g: ArrayD<f64>) -> Result<Self, CostError> {
        if !(lambda_g.is_finite() && lambda_g >= 0.0) {
            return Err(CostError::Domain {
                what: "lambda_g",
                value: lambda_g,
            });
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CostError::InvalidSample { what: "G", index, value });
        }
        self.terminal = Some(TerminalCost { lambda_g, g });
        Ok(self)
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn lambda_e(&self) -> f64 {
        self.lambda_e
    }

    pub fn lambda_q(&self) -> f64 {
        self.lambda_q
    }

    pub fn q(&self) -> Option<&ArrayD<f64>> {
        self.q.as_ref()
    }

    pub fn terminal(&self) -> Option<&TerminalCost> {
        self.terminal.as_ref()
    }

    /// Checks sample shapes against a grid.
    pub fn check(&self, grid: &Grid) -> Result<(), CostError> {
        let space = grid.shape().space_dims();
        let check = |a: &ArrayD<f64>, what: &'static str| {
            if a.shape() != space {
                Err(CostError::Grid(GridError::Shape {
                    what,
                    expected: space.to_vec(),
                    found: a.shape().to_vec(),
                }))
            } else {
                Ok(())
            }
        };
        if let Some(q) = &self.q {
            check(q, "Q samples")?;
        }
        if let Some(t) = &self.terminal {
            check(&t.g, "G samples")?;
        }
        Ok(())
    }

    /// `Y(ρ, m, x)` given `‖m‖²` and `Q(x)`; `+∞` outside the domain of `L`.
    pub fn point_value(&self, rho: f64, m_sq: f64, q: f64) -> f64 {
        if rho < 0.0 || (rho == 0.0 && m_sq > 0.0) || rho.is_nan() {
            return f64::INFINITY;
        }
        let kinetic = if rho == 0.0 { 0.0 } else { m_sq / (2.0 * rho) };
        let mut y = kinetic;
        if self.lambda_e != 0.0 {
            y += self.lambda_e * interaction_value(self.kind, rho);
        }
        if self.lambda_q != 0.0 {
            y += self.lambda_q * q * rho;
        }
        y
    }
}

/// `L(β₀, β) = ‖β‖²/(2β₀)`, `L(0, 0) = 0` and `+∞` for `β₀ = 0, β ≠ 0`.
pub fn dynamic_cost(beta0: f64, beta: &[f64]) -> Result<f64, CostError> {
    if !(beta0 >= 0.0) {
        return Err(CostError::Domain {
            what: "beta0",
            value: beta0,
        });
    }
    let sq: f64 = beta.iter().map(|b| b * b).sum();
    Ok(if beta0 > 0.0 {
        sq / (2.0 * beta0)
    } else if sq == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// `(∂_{β₀} L, ∇_β L)` at `max(β₀, floor)`.
pub fn dynamic_cost_grad(beta0: f64, beta: &[f64], floor: f64) -> (f64, Vec<f64>) {
    let b0 = beta0.max(floor);
    let sq: f64 = beta.iter().map(|b| b * b).sum();
    (-sq / (2.0 * b0 * b0), beta.iter().map(|b| b / b0).collect())
}

fn interaction_value(kind: CostKind, rho: f64) -> f64 {
    match kind {
        CostKind::Ot => 0.0,
        CostKind::Entropy if rho > 0.0 => rho * rho.ln(),
        CostKind::Quadratic => 0.5 * rho * rho,
        CostKind::Reciprocal if rho > 0.0 => 1.0 / rho,
        _ => 0.0,
    }
}

fn interaction_slope(kind: CostKind, rho: f64) -> f64 {
    match kind {
        CostKind::Ot => 0.0,
        CostKind::Entropy => rho.ln() + 1.0,
        CostKind::Quadratic => rho,
        CostKind::Reciprocal => -1.0 / (rho * rho),
    }
}

/// `(F_E(ρ), F_E′(max(ρ, floor)))`.
pub fn interaction(kind: CostKind, rho: f64, floor: f64) -> Result<(f64, f64), CostError> {
    if !(rho >= 0.0) {
        return Err(CostError::Domain { what: "rho", value: rho });
    }
    Ok((interaction_value(kind, rho), interaction_slope(kind, rho.max(floor))))
}

/// Gradient of `𝒴` with clamping diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub grad: StaggeredFields,
    /// Number of cells whose averaged density fell below the floor.
    pub clamped: usize,
    /// Smallest averaged density before clamping.
    pub min_density: f64,
}

/// `Q` at a cell, given spatial samples broadcast along time.
fn q_at(q: Option<&[f64]>, cell: usize) -> f64 {
    q.map_or(0.0, |q| q[cell % q.len()])
}

fn contiguous(a: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Volume factor turning `𝒴` into the reported objective: `Π_d Δ_d` for
/// pinned problems and `Π_{d≥1} Δ_d` for games (whose `𝒴` already carries `Δ₀`).
pub fn objective_scale(grid: &Grid) -> f64 {
    match grid.time() {
        TimeBoundary::Pinned => grid.shape().cell_volume(),
        TimeBoundary::FreeTerminal => grid.shape().space_cell_volume(),
    }
}

/// The unweighted discrete objective `𝒴(P, M)` (including `Δ₀` and the
/// terminal term for games). Sums run sequentially in row-major cell order.
pub fn unweighted_objective(
    grid: &Grid,
    fields: &StaggeredFields,
    bnd: &BoundaryData,
    model: &CostModel,
) -> Result<f64, CostError> {
    model.check(grid)?;
    let (rho_bar, m_bar) = grid.average_to_center(fields, bnd)?;
    let rho = contiguous(&rho_bar);
    let ms: Vec<_> = m_bar.iter().map(contiguous).collect();
    let q_store = model.q.as_ref().map(contiguous);
    let q = q_store.as_deref();
    let mut total = 0.0;
    for (c, &r) in rho.iter().enumerate() {
        let m_sq = ms.iter().fold(0.0, |acc, m| acc + m[c] * m[c]);
        total += model.point_value(r, m_sq, q_at(q, c));
    }
    if grid.time() == TimeBoundary::FreeTerminal {
        total *= grid.shape().delta(0);
        if let Some(t) = &model.terminal {
            let last = fields.rho.index_axis(Axis(0), grid.shape().dims()[0] - 1);
            let term = last.iter().zip(t.g.iter()).fold(0.0, |acc, (p, g)| acc + p * g);
            total += t.lambda_g * term;
        }
    }
    Ok(total)
}

/// The reported objective, `objective_scale · 𝒴`; `+∞` when some averaged
/// density is negative or vanishes under nonzero flux.
pub fn objective_value(
    grid: &Grid,
    fields: &StaggeredFields,
    bnd: &BoundaryData,
    model: &CostModel,
) -> Result<f64, CostError> {
    Ok(objective_scale(grid) * unweighted_objective(grid, fields, bnd, model)?)
}

/// `∇𝒴(P, M)`: pointwise partials on the central grid mapped back with
/// `𝒜*_d`, plus the terminal preference for games.
pub fn objective_grad(
    grid: &Grid,
    fields: &StaggeredFields,
    bnd: &BoundaryData,
    model: &CostModel,
    floor: f64,
) -> Result<ObjectiveGrad, CostError> {
    model.check(grid)?;
    let (rho_bar, m_bar) = grid.average_to_center(fields, bnd)?;
    let space_d = m_bar.len();
    let rho = contiguous(&rho_bar);
    let ms: Vec<_> = m_bar.iter().map(contiguous).collect();
    let q_store = model.q.as_ref().map(contiguous);
    let q = q_store.as_deref();

    let cells = rho.len();
    let mut y0 = vec![0.0; cells];
    let mut yd = vec![vec![0.0; cells]; space_d];
    let mut clamped = 0;
    let mut min_density = f64::INFINITY;
    for c in 0..cells {
        let r = rho[c];
        min_density = min_density.min(r);
        if r < floor {
            clamped += 1;
        }
        let rc = r.max(floor);
        let inv = 1.0 / rc;
        let mut m_sq = 0.0;
        for d in 0..space_d {
            let m = ms[d][c];
            m_sq += m * m;
            yd[d][c] = m * inv;
        }
        let mut v = -0.5 * m_sq * inv * inv;
        if model.lambda_e != 0.0 {
            v += model.lambda_e * interaction_slope(model.kind, rc);
        }
        if model.lambda_q != 0.0 {
            v += model.lambda_q * q_at(q, c);
        }
        y0[c] = v;
    }
    if clamped > 0 {
        log::debug!("density floor active on {clamped} cells (min {min_density:e})");
    }

    let dims = IxDyn(grid.shape().dims());
    let mut y0 = CentralField::from_shape_vec(dims.clone(), y0).expect("cell count");
    let mut yd: Vec<CentralField> = yd
        .into_iter()
        .map(|v| CentralField::from_shape_vec(dims.clone(), v).expect("cell count"))
        .collect();
    let games = grid.time() == TimeBoundary::FreeTerminal;
    if games {
        let dt = grid.shape().delta(0);
        y0 *= dt;
        for y in &mut yd {
            *y *= dt;
        }
    }
    let mut grad = grid.average_to_faces(&y0, &yd)?;
    if games {
        mfg_terminal_grad(grid, &mut grad, model);
    }
    Ok(ObjectiveGrad {
        grad,
        clamped,
        min_density,
    })
}

/// Adds `λ_G G(x)` to the density gradient on the free terminal slice.
/// No-op for pinned layouts or models without a terminal cost.
pub fn mfg_terminal_grad(grid: &Grid, grad: &mut StaggeredFields, model: &CostModel) {
    if grid.time() != TimeBoundary::FreeTerminal {
        return;
    }
    if let Some(t) = &model.terminal {
        if t.lambda_g == 0.0 {
            return;
        }
        let last = grid.shape().dims()[0] - 1;
        grad.rho
            .index_axis_mut(Axis(0), last)
            .scaled_add(t.lambda_g, &t.g);
    }
}
