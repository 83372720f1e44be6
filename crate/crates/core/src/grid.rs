//! Staggered grids on the unit box `[0,1]^(D+1)` (axis 0 is time).
//!
//! Three families of points are used:
//!
//! * cell centers, `n₀ × n₁ × … × n_D` values at `((k₀+½)Δ₀, …, (k_D+½)Δ_D)`;
//! * density faces, stored in [`StaggeredFields::rho`], normal to the time axis;
//! * flux faces, stored in [`StaggeredFields::flux`]`[d-1]`, normal to space axis `d`.
//!
//! Face arrays hold interior faces only. Along the face axis, storage offset
//! `k` is the face between cells `k` and `k+1`, located at `(k+1)Δ`; in the
//! 1-based half-integer notation this is the face `j = k + 3/2`. The zero-flux
//! condition on the spatial boundary is therefore structural. For
//! [`TimeBoundary::FreeTerminal`] (mean-field games) the time axis carries one
//! extra face at `k = n₀-1`, the free terminal slice at `t = 1`.
//!
//! Arrays are dense and row-major over `(t, x₁, …, x_D)`.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use thiserror::Error;

/// Scalar values on the cell-center grid.
pub type CentralField = ArrayD<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("a grid needs a time axis and at least one space axis, got {0} axes")]
    TooFewAxes(usize),
    #[error("axis {axis} has {n} segments, at least 2 are required")]
    TooCoarse { axis: usize, n: usize },
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{what} has an invalid sample {value} at flat index {index}")]
    InvalidSample {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{0}")]
    Boundary(&'static str),
}

/// Segment counts per axis; `Δ_d = 1/n_d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridShape {
    n: Vec<usize>,
}

impl GridShape {
    pub fn new(n: impl Into<Vec<usize>>) -> Result<Self, GridError> {
        let n = n.into();
        if n.len() < 2 {
            return Err(GridError::TooFewAxes(n.len()));
        }
        if let Some((axis, &bad)) = n.iter().enumerate().find(|(_, &v)| v < 2) {
            return Err(GridError::TooCoarse { axis, n: bad });
        }
        Ok(Self { n })
    }

    /// All segment counts, time first.
    pub fn dims(&self) -> &[usize] {
        &self.n
    }

    pub fn space_dims(&self) -> &[usize] {
        &self.n[1..]
    }

    /// Number of axes, `D + 1`.
    pub fn ndim(&self) -> usize {
        self.n.len()
    }

    /// Spatial dimension `D`.
    pub fn space_ndim(&self) -> usize {
        self.n.len() - 1
    }

    pub fn delta(&self, axis: usize) -> f64 {
        1.0 / self.n[axis] as f64
    }

    /// `Π_d Δ_d` over all axes.
    pub fn cell_volume(&self) -> f64 {
        self.n.iter().map(|&n| 1.0 / n as f64).product()
    }

    /// `Π_{d≥1} Δ_d`.
    pub fn space_cell_volume(&self) -> f64 {
        self.n[1..].iter().map(|&n| 1.0 / n as f64).product()
    }

    /// Number of cells.
    pub fn cells(&self) -> usize {
        self.n.iter().product()
    }

    pub fn space_cells(&self) -> usize {
        self.n[1..].iter().product()
    }

    /// Coordinate of the `k`-th (0-based) cell center along `axis`.
    pub fn center(&self, axis: usize, k: usize) -> f64 {
        (k as f64 + 0.5) / self.n[axis] as f64
    }

    /// Coordinate of the `k`-th (0-based) interior face along `axis`.
    pub fn face(&self, axis: usize, k: usize) -> f64 {
        (k + 1) as f64 / self.n[axis] as f64
    }

    /// The grid with every axis halved, if every `n_d` is even and the
    /// result keeps at least two segments per axis.
    pub fn coarsen(&self) -> Option<GridShape> {
        if self.n.iter().all(|&n| n % 2 == 0 && n >= 4) {
            Some(GridShape {
                n: self.n.iter().map(|&n| n / 2).collect(),
            })
        } else {
            None
        }
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.n.iter().map(|n| n.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Which time boundaries carry prescribed densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeBoundary {
    /// Both `ρ(0,·) = ρ₀` and `ρ(1,·) = ρ₁` are prescribed (planning / transport).
    Pinned,
    /// Only `ρ(0,·)` is prescribed; the terminal slice is a free unknown (games).
    FreeTerminal,
}

/// Density on time faces and flux on space faces.
#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredFields {
    pub rho: ArrayD<f64>,
    /// `flux[d-1]` holds `M_d` for space axis `d = 1…D`.
    pub flux: Vec<ArrayD<f64>>,
}

impl StaggeredFields {
    /// Component `a` (0 = density, `d ≥ 1` = flux along axis `d`).
    pub fn component(&self, axis: usize) -> &ArrayD<f64> {
        if axis == 0 {
            &self.rho
        } else {
            &self.flux[axis - 1]
        }
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut ArrayD<f64> {
        if axis == 0 {
            &mut self.rho
        } else {
            &mut self.flux[axis - 1]
        }
    }

    /// Components in storage order: density first, then fluxes by axis.
    pub fn components(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        std::iter::once(&self.rho).chain(self.flux.iter())
    }

    pub fn components_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        std::iter::once(&mut self.rho).chain(self.flux.iter_mut())
    }

    /// Total number of stored values.
    pub fn len(&self) -> usize {
        self.components().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in storage order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.components().flat_map(|c| c.iter().copied())
    }

    /// Overwrites all values from an iterator in storage order.
    pub fn assign_values(&mut self, mut values: impl Iterator<Item = f64>) {
        for c in self.components_mut() {
            for v in c.iter_mut() {
                *v = values.next().expect("not enough values");
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> StaggeredFields {
        StaggeredFields {
            rho: self.rho.mapv(&f),
            flux: self.flux.iter().map(|m| m.mapv(&f)).collect(),
        }
    }

    pub fn zip_map(&self, other: &StaggeredFields, f: impl Fn(f64, f64) -> f64) -> StaggeredFields {
        let zip = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out
        };
        StaggeredFields {
            rho: zip(&self.rho, &other.rho),
            flux: self.flux.iter().zip(&other.flux).map(|(a, b)| zip(a, b)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &StaggeredFields) {
        for (a, b) in self.components_mut().zip(other.components()) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn sub(&self, other: &StaggeredFields) -> StaggeredFields {
        self.zip_map(other, |a, b| a - b)
    }

    /// Inner product `Σ P¹P² + Σ_d Σ M_d¹ M_d²`, summed sequentially in storage order.
    pub fn dot(&self, other: &StaggeredFields) -> f64 {
        self.values().zip(other.values()).fold(0.0, |acc, (a, b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().fold(0.0, |acc, a| acc + a * a)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.components().map(|c| c.shape().to_vec()).collect()
    }
}

/// Sequential inner product of two central fields.
pub fn center_dot(a: &CentralField, b: &CentralField) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Frobenius, volume-weighted ℓ² and sup norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub frobenius: f64,
    /// `sqrt(Π_d Δ_d) · frobenius`.
    pub weighted_l2: f64,
    pub max_abs: f64,
}

impl Norms {
    fn from_values(values: impl Iterator<Item = f64>, shape: &GridShape) -> Norms {
        let (sq, max) = values.fold((0.0_f64, 0.0_f64), |(s, m), v| (s + v * v, m.max(v.abs())));
        let frobenius = sq.sqrt();
        Norms {
            frobenius,
            weighted_l2: shape.cell_volume().sqrt() * frobenius,
            max_abs: max,
        }
    }

    pub fn of_fields(fields: &StaggeredFields, shape: &GridShape) -> Norms {
        Self::from_values(fields.values(), shape)
    }

    pub fn of_center(field: &CentralField, shape: &GridShape) -> Norms {
        Self::from_values(field.iter().copied(), shape)
    }
}

/// Boundary samples and the derived central-grid boundary vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    rho0: ArrayD<f64>,
    rho1: Option<ArrayD<f64>>,
    avg_term: CentralField,
    div_term: CentralField,
}

impl BoundaryData {
    /// `rho1` must be given for [`TimeBoundary::Pinned`] grids and omitted for
    /// [`TimeBoundary::FreeTerminal`] ones. Samples are point values at the
    /// spatial cell centers and must be nonnegative.
    pub fn new(grid: &Grid, rho0: ArrayD<f64>, rho1: Option<ArrayD<f64>>) -> Result<Self, GridError> {
        let shape = grid.shape();
        let space = shape.space_dims().to_vec();
        check_sample(&rho0, &space, "rho0")?;
        match (grid.time(), &rho1) {
            (TimeBoundary::Pinned, None) => {
                return Err(GridError::Boundary("a pinned time boundary needs a terminal density"))
            }
            (TimeBoundary::FreeTerminal, Some(_)) => {
                return Err(GridError::Boundary("a free terminal slice takes no terminal density"))
            }
            (_, Some(r1)) => check_sample(r1, &space, "rho1")?,
            _ => {}
        }

        let n0 = shape.dims()[0];
        let inv_dt = n0 as f64;
        let mut avg_term = CentralField::zeros(IxDyn(shape.dims()));
        let mut div_term = CentralField::zeros(IxDyn(shape.dims()));
        avg_term.index_axis_mut(Axis(0), 0).assign(&(&rho0 * 0.5));
        div_term.index_axis_mut(Axis(0), 0).assign(&(&rho0 * -inv_dt));
        if let Some(r1) = &rho1 {
            avg_term.index_axis_mut(Axis(0), n0 - 1).assign(&(r1 * 0.5));
            div_term.index_axis_mut(Axis(0), n0 - 1).assign(&(r1 * inv_dt));
        }
        Ok(Self {
            rho0,
            rho1,
            avg_term,
            div_term,
        })
    }

    pub fn rho0(&self) -> &ArrayD<f64> {
        &self.rho0
    }

    pub fn rho1(&self) -> Option<&ArrayD<f64>> {
        self.rho1.as_ref()
    }

    /// `ρ̄_𝒜`: half the boundary density on the first/last time slice.
    pub fn avg_term(&self) -> &CentralField {
        &self.avg_term
    }

    /// `ρ̄_𝒟`: `∓ρ/Δ₀` on the first/last time slice.
    pub fn div_term(&self) -> &CentralField {
        &self.div_term
    }
}

fn check_sample(a: &ArrayD<f64>, space: &[usize], what: &'static str) -> Result<(), GridError> {
    if a.shape() != space {
        return Err(GridError::Shape {
            what,
            expected: space.to_vec(),
            found: a.shape().to_vec(),
        });
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(GridError::InvalidSample { what, index, value });
    }
    Ok(())
}

/// A grid shape together with its time-boundary layout; all discrete
/// operators are methods on this type.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    shape: GridShape,
    time: TimeBoundary,
}

impl Grid {
    pub fn new(shape: GridShape, time: TimeBoundary) -> Self {
        Self { shape, time }
    }

    /// Planning / transport layout.
    pub fn mfp(shape: GridShape) -> Self {
        Self::new(shape, TimeBoundary::Pinned)
    }

    /// Mean-field game layout.
    pub fn mfg(shape: GridShape) -> Self {
        Self::new(shape, TimeBoundary::FreeTerminal)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn time(&self) -> TimeBoundary {
        self.time
    }

    /// Number of stored faces along `axis`.
    pub fn face_count(&self, axis: usize) -> usize {
        let n = self.shape.dims()[axis];
        if axis == 0 && self.time == TimeBoundary::FreeTerminal {
            n
        } else {
            n - 1
        }
    }

    /// Shape of the face array normal to `axis`.
    pub fn face_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.dims().to_vec();
        s[axis] = self.face_count(axis);
        s
    }

    fn open_end(&self, axis: usize) -> bool {
        axis == 0 && self.time == TimeBoundary::FreeTerminal
    }

    pub fn filled(&self, value: f64) -> StaggeredFields {
        StaggeredFields {
            rho: ArrayD::from_elem(IxDyn(&self.face_shape(0)), value),
            flux: (1..self.shape.ndim())
                .map(|d| ArrayD::from_elem(IxDyn(&self.face_shape(d)), value))
                .collect(),
        }
    }

    pub fn zeros(&self) -> StaggeredFields {
        self.filled(0.0)
    }

    pub fn center_zeros(&self) -> CentralField {
        CentralField::zeros(IxDyn(self.shape.dims()))
    }

    pub fn check_fields(&self, fields: &StaggeredFields) -> Result<(), GridError> {
        if fields.flux.len() != self.shape.space_ndim() {
            return Err(GridError::Shape {
                what: "flux component count",
                expected: vec![self.shape.space_ndim()],
                found: vec![fields.flux.len()],
            });
        }
        for (axis, c) in fields.components().enumerate() {
            let expected = self.face_shape(axis);
            if c.shape() != expected.as_slice() {
                return Err(GridError::Shape {
                    what: if axis == 0 { "density faces" } else { "flux faces" },
                    expected,
                    found: c.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn check_center(&self, field: &CentralField, what: &'static str) -> Result<(), GridError> {
        if field.shape() != self.shape.dims() {
            return Err(GridError::Shape {
                what,
                expected: self.shape.dims().to_vec(),
                found: field.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `ρ̄ = 𝒜₀(P) + ρ̄_𝒜` and `m̄_d = 𝒜_d(M_d)`.
    pub fn average_to_center(
        &self,
        fields: &StaggeredFields,
        bnd: &BoundaryData,
    ) -> Result<(CentralField, Vec<CentralField>), GridError> {
        self.check_fields(fields)?;
        self.check_center(bnd.avg_term(), "boundary average term")?;
        let mut rho_bar = self.face_average(0, fields.rho.view());
        rho_bar += bnd.avg_term();
        let m_bar = (1..self.shape.ndim())
            .map(|d| self.face_average(d, fields.flux[d - 1].view()))
            .collect();
        Ok((rho_bar, m_bar))
    }

    /// `𝒜_d` without boundary contributions.
    pub fn face_average(&self, axis: usize, faces: ArrayViewD<f64>) -> CentralField {
        let n = self.shape.dims()[axis];
        let k = faces.len_of(Axis(axis));
        let mut shape = faces.shape().to_vec();
        shape[axis] = n;
        let mut out = CentralField::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(0..k)).scaled_add(0.5, &faces);
        let m = k.min(n - 1);
        out.slice_axis_mut(Axis(axis), Slice::from(1..m + 1))
            .scaled_add(0.5, &faces.slice_axis(Axis(axis), Slice::from(0..m)));
        out
    }

    /// `𝒜*_d`: each face takes the mean of its two adjacent centers (a face
    /// with a single adjacent center takes half of it).
    pub fn center_average(&self, axis: usize, center: ArrayViewD<f64>) -> ArrayD<f64> {
        let n = self.shape.dims()[axis];
        let k = self.face_count(axis);
        let mut out = center.slice_axis(Axis(axis), Slice::from(0..k)).to_owned();
        out *= 0.5;
        let m = k.min(n - 1);
        out.slice_axis_mut(Axis(axis), Slice::from(0..m))
            .scaled_add(0.5, &center.slice_axis(Axis(axis), Slice::from(1..m + 1)));
        out
    }

    /// Maps central-grid partials back to the faces: `(𝒜*₀ U₀, {𝒜*_d U_d})`.
    pub fn average_to_faces(
        &self,
        rho_part: &CentralField,
        flux_parts: &[CentralField],
    ) -> Result<StaggeredFields, GridError> {
        self.check_center(rho_part, "density partials")?;
        if flux_parts.len() != self.shape.space_ndim() {
            return Err(GridError::Shape {
                what: "flux partial count",
                expected: vec![self.shape.space_ndim()],
                found: vec![flux_parts.len()],
            });
        }
        for part in flux_parts {
            self.check_center(part, "flux partials")?;
        }
        Ok(StaggeredFields {
            rho: self.center_average(0, rho_part.view()),
            flux: flux_parts
                .iter()
                .enumerate()
                .map(|(i, u)| self.center_average(i + 1, u.view()))
                .collect(),
        })
    }

    /// `𝒟_d`: difference of face values into the cells, `+F/Δ` on the first
    /// cell, `−F/Δ` on the last.
    pub fn face_difference(&self, axis: usize, faces: ArrayViewD<f64>) -> CentralField {
        let n = self.shape.dims()[axis];
        let inv = n as f64;
        let k = faces.len_of(Axis(axis));
        let mut shape = faces.shape().to_vec();
        shape[axis] = n;
        let mut out = CentralField::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(0..k)).assign(&faces);
        let m = k.min(n - 1);
        out.slice_axis_mut(Axis(axis), Slice::from(1..m + 1))
            .scaled_add(-1.0, &faces.slice_axis(Axis(axis), Slice::from(0..m)));
        out *= inv;
        out
    }

    /// `Div(P, M) = 𝒟₀(P) + Σ_d 𝒟_d(M_d)`.
    pub fn divergence(&self, fields: &StaggeredFields) -> Result<CentralField, GridError> {
        self.check_fields(fields)?;
        let mut out = self.face_difference(0, fields.rho.view());
        for d in 1..self.shape.ndim() {
            out += &self.face_difference(d, fields.flux[d - 1].view());
        }
        Ok(out)
    }

    /// Spatial part of the divergence, `Σ_{d≥1} 𝒟_d(M_d)`.
    pub fn space_divergence(&self, fields: &StaggeredFields) -> Result<CentralField, GridError> {
        self.check_fields(fields)?;
        let mut out = self.center_zeros();
        for d in 1..self.shape.ndim() {
            out += &self.face_difference(d, fields.flux[d - 1].view());
        }
        Ok(out)
    }

    /// Discrete continuity residual `Div(P, M) + ρ̄_𝒟`.
    pub fn continuity_residual(
        &self,
        fields: &StaggeredFields,
        bnd: &BoundaryData,
    ) -> Result<CentralField, GridError> {
        let mut r = self.divergence(fields)?;
        self.check_center(bnd.div_term(), "boundary divergence term")?;
        r += bnd.div_term();
        Ok(r)
    }

    /// `𝒟*_d`: forward difference of centers onto the faces. A free terminal
    /// face sees an implicit zero beyond the last cell, so that `𝒟*₀ = −𝒟₀ᵀ`
    /// in both layouts.
    pub fn center_difference(&self, axis: usize, center: ArrayViewD<f64>) -> ArrayD<f64> {
        let n = self.shape.dims()[axis];
        let k = self.face_count(axis);
        let mut shape = center.shape().to_vec();
        shape[axis] = k;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(0..n - 1)).assign(
            &(&center.slice_axis(Axis(axis), Slice::from(1..n))
                - &center.slice_axis(Axis(axis), Slice::from(0..n - 1))),
        );
        if self.open_end(axis) {
            out.slice_axis_mut(Axis(axis), Slice::from(n - 1..n))
                .assign(&center.slice_axis(Axis(axis), Slice::from(n - 1..n)).mapv(|v| -v));
        }
        out *= n as f64;
        out
    }

    /// `Grad(Φ̄) = {𝒟*_d Φ̄}_{d=0…D}`.
    pub fn gradient(&self, phi: &CentralField) -> Result<StaggeredFields, GridError> {
        self.check_center(phi, "potential")?;
        Ok(StaggeredFields {
            rho: self.center_difference(0, phi.view()),
            flux: (1..self.shape.ndim())
                .map(|d| self.center_difference(d, phi.view()))
                .collect(),
        })
    }

    /// Three-point second difference along one axis with homogeneous Neumann
    /// ends (and a zero ghost value past a free terminal face).
    pub fn second_difference(&self, axis: usize, phi: ArrayViewD<f64>) -> CentralField {
        let n = self.shape.dims()[axis];
        let ax = Axis(axis);
        let diff = &phi.slice_axis(ax, Slice::from(1..n)) - &phi.slice_axis(ax, Slice::from(0..n - 1));
        let mut out = CentralField::zeros(phi.raw_dim());
        out.slice_axis_mut(ax, Slice::from(0..n - 1)).assign(&diff);
        out.slice_axis_mut(ax, Slice::from(1..n)).scaled_add(-1.0, &diff);
        if self.open_end(axis) {
            out.slice_axis_mut(ax, Slice::from(n - 1..n))
                .scaled_add(-1.0, &phi.slice_axis(ax, Slice::from(n - 1..n)));
        }
        out *= (n * n) as f64;
        out
    }

    /// `Lap = Σ_d 𝒟_dd`, evaluated directly with the three-point stencil.
    pub fn laplacian(&self, phi: &CentralField) -> Result<CentralField, GridError> {
        self.check_center(phi, "potential")?;
        let mut out = self.second_difference(0, phi.view());
        for d in 1..self.shape.ndim() {
            out += &self.second_difference(d, phi.view());
        }
        Ok(out)
    }
}
