//! Spectral solvers for the Poisson systems of the projection step.
//!
//! The Neumann Laplacian of a pinned grid is diagonalized by the orthonormal
//! type-II cosine basis on every axis. On a free-terminal grid the time axis
//! uses the quarter-shifted basis `cos((j+½)(i+½)π/(n+½))` instead, which
//! diagonalizes the Neumann-at-start, zero-ghost-at-end stencil and has no
//! null space. Indices here are 0-based.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{ArrayD, Axis, Dimension, IxDyn};
use rustdct::{DctPlanner, TransformType2And3};

use crate::grid::{CentralField, Grid, GridError, GridShape, StaggeredFields, TimeBoundary};

/// Mean components below this fraction of `‖rhs‖_F` are treated as rounding.
pub const COMPAT_TOL: f64 = 1e-8;

/// Which family of Poisson problems a plan solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Pure Neumann Laplacian (singular, pseudo-inverse).
    Mfp,
    /// `𝒟₀𝒟₀ᵀ + Σ_d 𝒟_d𝒟_dᵀ` with a free terminal slice (invertible).
    Mfg,
}

impl Variant {
    pub fn of(grid: &Grid) -> Self {
        match grid.time() {
            TimeBoundary::Pinned => Variant::Mfp,
            TimeBoundary::FreeTerminal => Variant::Mfg,
        }
    }

    pub fn time_boundary(self) -> TimeBoundary {
        match self {
            Variant::Mfp => TimeBoundary::Pinned,
            Variant::Mfg => TimeBoundary::FreeTerminal,
        }
    }
}

/// How the cosine axes are transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformMode {
    /// FFT-based DCT-II/III where available.
    Fast,
    /// Dense basis-matrix products on every axis.
    Direct,
}

#[derive(Clone)]
enum AxisTransform {
    Fast {
        dct: Arc<dyn TransformType2And3<f64>>,
        /// Orthonormal scale of mode 0 and of the remaining modes.
        scale0: f64,
        scale: f64,
    },
    /// Row `i` of `basis` is mode `i` sampled at the `n` centers.
    Matrix { basis: Vec<f64> },
}

impl std::fmt::Debug for AxisTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisTransform::Fast { .. } => write!(f, "Fast"),
            AxisTransform::Matrix { .. } => write!(f, "Matrix"),
        }
    }
}

/// Orthonormal cosine mode `i` of a Neumann axis with `n` cells, at cell `j`.
pub fn neumann_mode(n: usize, i: usize, j: usize) -> f64 {
    let norm = if i == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    norm * ((j as f64 + 0.5) * i as f64 * PI / n as f64).cos()
}

/// Orthonormal quarter-shifted mode `i` of a free-terminal time axis, at cell `j`.
pub fn shifted_mode(n: usize, i: usize, j: usize) -> f64 {
    let half = n as f64 + 0.5;
    (4.0 / (2.0 * n as f64 + 1.0)).sqrt() * ((j as f64 + 0.5) * (i as f64 + 0.5) * PI / half).cos()
}

/// Eigenvalue of the 1D Neumann stencil for mode `i`.
pub fn neumann_eigenvalue(n: usize, i: usize) -> f64 {
    let nf = n as f64;
    let s = (i as f64 * PI / (2.0 * nf)).sin();
    -4.0 * nf * nf * s * s
}

/// Eigenvalue of the 1D free-terminal stencil for mode `i`.
pub fn shifted_eigenvalue(n: usize, i: usize) -> f64 {
    let nf = n as f64;
    let s = ((i as f64 + 0.5) * PI / (2.0 * nf + 1.0)).sin();
    -4.0 * nf * nf * s * s
}

/// Eigendecomposition of the discrete Laplacian for one grid.
#[derive(Debug)]
pub struct SpectralPlan {
    shape: GridShape,
    variant: Variant,
    axes: Vec<AxisTransform>,
    eigenvalues: ArrayD<f64>,
    incompatible: AtomicUsize,
}

impl Clone for SpectralPlan {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            variant: self.variant,
            axes: self.axes.clone(),
            eigenvalues: self.eigenvalues.clone(),
            incompatible: AtomicUsize::new(self.incompatible.load(Ordering::Relaxed)),
        }
    }
}

impl SpectralPlan {
    pub fn new(shape: &GridShape, variant: Variant) -> Self {
        Self::with_mode(shape, variant, TransformMode::Fast)
    }

    pub fn for_grid(grid: &Grid) -> Self {
        Self::new(grid.shape(), Variant::of(grid))
    }

    pub fn with_mode(shape: &GridShape, variant: Variant, mode: TransformMode) -> Self {
        let mut planner = DctPlanner::new();
        let axes = shape
            .dims()
            .iter()
            .enumerate()
            .map(|(axis, &n)| {
                let shifted = axis == 0 && variant == Variant::Mfg;
                if shifted || mode == TransformMode::Direct {
                    let mode_fn = if shifted { shifted_mode } else { neumann_mode };
                    let basis = (0..n).flat_map(|i| (0..n).map(move |j| mode_fn(n, i, j))).collect();
                    AxisTransform::Matrix { basis }
                } else {
                    AxisTransform::Fast {
                        dct: planner.plan_dct2(n),
                        scale0: (1.0 / n as f64).sqrt(),
                        scale: (2.0 / n as f64).sqrt(),
                    }
                }
            })
            .collect();

        let per_axis: Vec<Vec<f64>> = shape
            .dims()
            .iter()
            .enumerate()
            .map(|(axis, &n)| {
                (0..n)
                    .map(|i| {
                        if axis == 0 && variant == Variant::Mfg {
                            shifted_eigenvalue(n, i)
                        } else {
                            neumann_eigenvalue(n, i)
                        }
                    })
                    .collect()
            })
            .collect();
        let eigenvalues = ArrayD::from_shape_fn(IxDyn(shape.dims()), |ix| {
            (0..ix.ndim()).map(|d| per_axis[d][ix[d]]).sum()
        });

        Self {
            shape: shape.clone(),
            variant,
            axes,
            eigenvalues,
            incompatible: AtomicUsize::new(0),
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// `λ^i` on the central index set.
    pub fn eigenvalues(&self) -> &ArrayD<f64> {
        &self.eigenvalues
    }

    /// How many Neumann solves had to discard a mean component above tolerance.
    pub fn incompatible_count(&self) -> usize {
        self.incompatible.load(Ordering::Relaxed)
    }

    /// Basis vector `Ψ^i` (0-based multi-index) evaluated on the grid.
    pub fn basis_vector(&self, i: &[usize]) -> CentralField {
        let dims = self.shape.dims();
        ArrayD::from_shape_fn(IxDyn(dims), |ix| {
            (0..dims.len())
                .map(|d| {
                    if d == 0 && self.variant == Variant::Mfg {
                        shifted_mode(dims[d], i[d], ix[d])
                    } else {
                        neumann_mode(dims[d], i[d], ix[d])
                    }
                })
                .product()
        })
    }

    fn check(&self, field: &CentralField) -> Result<(), GridError> {
        if field.shape() != self.shape.dims() {
            return Err(GridError::Shape {
                what: "Poisson right-hand side",
                expected: self.shape.dims().to_vec(),
                found: field.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn transform(&self, field: &mut CentralField, inverse: bool) {
        for (axis, t) in self.axes.iter().enumerate() {
            let n = self.shape.dims()[axis];
            let mut buf = vec![0.0; n];
            let mut out = vec![0.0; n];
            let mut scratch = match t {
                AxisTransform::Fast { dct, .. } => vec![0.0; dct.get_scratch_len()],
                AxisTransform::Matrix { .. } => Vec::new(),
            };
            for mut lane in field.lanes_mut(Axis(axis)) {
                for (b, v) in buf.iter_mut().zip(lane.iter()) {
                    *b = *v;
                }
                match t {
                    AxisTransform::Fast { dct, scale0, scale } => {
                        if inverse {
                            buf[0] *= 2.0 * scale0;
                            for b in &mut buf[1..] {
                                *b *= scale;
                            }
                            dct.process_dct3_with_scratch(&mut buf, &mut scratch);
                        } else {
                            dct.process_dct2_with_scratch(&mut buf, &mut scratch);
                            buf[0] *= scale0;
                            for b in &mut buf[1..] {
                                *b *= scale;
                            }
                        }
                        for (v, b) in lane.iter_mut().zip(&buf) {
                            *v = *b;
                        }
                    }
                    AxisTransform::Matrix { basis } => {
                        if inverse {
                            out.fill(0.0);
                            for (i, &c) in buf.iter().enumerate() {
                                let row = &basis[i * n..(i + 1) * n];
                                for (o, &b) in out.iter_mut().zip(row) {
                                    *o += c * b;
                                }
                            }
                        } else {
                            for (i, o) in out.iter_mut().enumerate() {
                                let row = &basis[i * n..(i + 1) * n];
                                *o = row.iter().zip(&buf).fold(0.0, |acc, (b, x)| acc + b * x);
                            }
                        }
                        for (v, o) in lane.iter_mut().zip(&out) {
                            *v = *o;
                        }
                    }
                }
            }
        }
    }

    /// Coefficients `⟨U, Ψ^i⟩` for every mode.
    pub fn forward(&self, field: &CentralField) -> Result<CentralField, GridError> {
        self.check(field)?;
        let mut out = field.as_standard_layout().into_owned();
        self.transform(&mut out, false);
        Ok(out)
    }

    /// `Σ_i c_i Ψ^i`.
    pub fn inverse(&self, coeffs: &CentralField) -> Result<CentralField, GridError> {
        self.check(coeffs)?;
        let mut out = coeffs.as_standard_layout().into_owned();
        self.transform(&mut out, true);
        Ok(out)
    }

    fn solve_modes(&self, rhs: &CentralField) -> Result<CentralField, GridError> {
        let mut c = self.forward(rhs)?;
        let zero = c.first().copied().unwrap_or(0.0);
        if self.variant == Variant::Mfp {
            let norm = rhs.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
            if zero.abs() > COMPAT_TOL * norm {
                self.incompatible.fetch_add(1, Ordering::Relaxed);
                log::warn!("Poisson right-hand side has mean component {zero:e} (|rhs| = {norm:e}); discarded");
            }
        }
        c.zip_mut_with(&self.eigenvalues, |v, &lam| *v = if lam == 0.0 { 0.0 } else { *v / -lam });
        self.inverse(&c)
    }

    /// The zero-mean `Φ̄` with `−Lap(Φ̄) = rhs` on the complement of the
    /// constants. A mean component in `rhs` is discarded and counted.
    pub fn solve_neumann(&self, rhs: &CentralField) -> Result<CentralField, GridError> {
        assert_eq!(self.variant, Variant::Mfp, "solve_neumann needs a pinned-grid plan");
        self.solve_modes(rhs)
    }

    /// The unique `Φ̄` with `(𝒟₀𝒟₀ᵀ + Σ_d 𝒟_d𝒟_dᵀ) Φ̄ = rhs` on a free-terminal grid.
    pub fn solve_mfg(&self, rhs: &CentralField) -> Result<CentralField, GridError> {
        assert_eq!(self.variant, Variant::Mfg, "solve_mfg needs a free-terminal plan");
        self.solve_modes(rhs)
    }

    /// Dispatches to the solver of this plan's variant.
    pub fn solve(&self, rhs: &CentralField) -> Result<CentralField, GridError> {
        self.solve_modes(rhs)
    }
}

/// Estimated spectral norms of the projection building blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorNorms {
    /// `‖Grad ∘ Lap⁻¹ ∘ Div‖₂`.
    pub grad_lapinv_div: f64,
    /// `‖Grad ∘ Lap⁻¹‖₂`.
    pub grad_lapinv: f64,
}

/// Closed-form values from the mode sweep on a pinned grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSweep {
    /// `max_{d, i: i_d ≠ 0} sqrt(σ_{d,i}² / |λ^i|)`.
    pub grad_lapinv_div: f64,
    /// `max_{i ≠ 0} sqrt(Σ_d σ_{d,i}²) / |λ^i| = max 1/sqrt|λ^i|`.
    pub grad_lapinv: f64,
    /// `max_{i ≠ 0} 1/|λ^i|`, the expression obtained by dropping the square root.
    pub inverse_eigenvalue: f64,
}

/// Enumerates every mode and evaluates the per-mode norm ratios with
/// `σ_{d,i} = −2 n_d sin(i_d π / (2 n_d))`.
pub fn mode_sweep(shape: &GridShape) -> ModeSweep {
    let dims = shape.dims();
    let sigma = |d: usize, i: usize| -2.0 * dims[d] as f64 * (i as f64 * PI / (2.0 * dims[d] as f64)).sin();
    let mut out = ModeSweep {
        grad_lapinv_div: 0.0,
        grad_lapinv: 0.0,
        inverse_eigenvalue: 0.0,
    };
    for ix in ndarray::indices(IxDyn(dims)) {
        if ix.as_array_view().iter().all(|&i| i == 0) {
            continue;
        }
        let sig: Vec<f64> = (0..dims.len()).map(|d| sigma(d, ix[d])).collect();
        let lam: f64 = sig.iter().map(|s| s * s).sum();
        for (d, s) in sig.iter().enumerate() {
            if ix[d] != 0 {
                out.grad_lapinv_div = out.grad_lapinv_div.max((s * s / lam).sqrt());
            }
        }
        out.grad_lapinv = out.grad_lapinv.max(lam.sqrt() / lam);
        out.inverse_eigenvalue = out.inverse_eigenvalue.max(1.0 / lam);
    }
    out
}

/// Largest eigenvalue of a symmetric operator by Lanczos with full
/// reorthogonalization; exact once the Krylov space is invariant.
fn lanczos_max(start: Vec<f64>, steps: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let n0 = dot(&start, &start).sqrt();
    let mut basis: Vec<Vec<f64>> = vec![start.into_iter().map(|x| x / n0).collect()];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let scale = |a: &[f64], b: &[f64]| a.iter().chain(b).fold(0.0_f64, |m, x| m.max(x.abs()));
    for _ in 0..steps.min(basis[0].len()) {
        let v = basis.last().expect("nonempty");
        let mut w = apply(v);
        alpha.push(dot(v, &w));
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&w, &w).sqrt();
        if b <= 1e-12 * scale(&alpha, &beta).max(1e-300) {
            break;
        }
        beta.push(b);
        basis.push(w.into_iter().map(|x| x / b).collect());
    }
    let k = alpha.len();
    let t = DMatrix::from_fn(k, k, |i, j| match i.abs_diff(j) {
        0 => alpha[i],
        1 => beta[i.min(j)],
        _ => 0.0,
    });
    t.symmetric_eigenvalues().iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
}

/// Lanczos estimates of `‖Grad∘Lap⁻¹∘Div‖₂` and `‖Grad∘Lap⁻¹‖₂` on a
/// pinned grid, applying the actual discrete operators. The weighted norm
/// scales domain and range alike, so the Frobenius operator norm is returned.
pub fn operator_norm_checks(shape: &GridShape) -> OperatorNorms {
    operator_norm_checks_with(shape, 400)
}

/// `steps` bounds the Krylov dimension.
pub fn operator_norm_checks_with(shape: &GridShape, steps: usize) -> OperatorNorms {
    let grid = Grid::mfp(shape.clone());
    let plan = SpectralPlan::new(shape, Variant::Mfp);
    // Deterministic, non-symmetric start vectors excite every mode.
    let seed = |len: usize| -> Vec<f64> {
        (0..len).map(|k| ((k as f64 + 1.0) * 0.754877666).fract() - 0.5 + 1e-3 * k as f64).collect()
    };
    // Lap⁻¹ here is the pseudo-inverse Σ (1/λ) Ψ Ψᵀ = −solve_neumann.
    let lap_inv = |u: &CentralField| plan.solve_neumann(u).expect("shape").mapv(|v| -v);

    let template = grid.zeros();
    let n_faces = template.len();
    let glid = |x: &[f64]| -> Vec<f64> {
        let mut f = template.clone();
        f.assign_values(x.iter().copied());
        let phi = lap_inv(&grid.divergence(&f).expect("shape"));
        grid.gradient(&phi).expect("shape").values().collect()
    };
    let a = lanczos_max(seed(n_faces), steps, glid).abs().sqrt();

    let dims = IxDyn(shape.dims());
    let gl_t_gl = |x: &[f64]| -> Vec<f64> {
        let u = CentralField::from_shape_vec(dims.clone(), x.to_vec()).expect("shape");
        let g: StaggeredFields = grid.gradient(&lap_inv(&u)).expect("shape");
        // (Grad Lap⁻¹)ᵀ = Lap⁻¹ (−Div).
        lap_inv(&grid.divergence(&g).expect("shape").mapv(|v| -v)).iter().copied().collect()
    };
    let b = lanczos_max(seed(shape.cells()), steps, gl_t_gl).sqrt();

    OperatorNorms {
        grad_lapinv_div: a,
        grad_lapinv: b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: &[usize]) -> GridShape {
        GridShape::new(n.to_vec()).unwrap()
    }

    /// Assembles `−Lap` column by column from the grid stencil.
    fn dense_neg_laplacian(grid: &Grid) -> DMatrix<f64> {
        let n = grid.shape().cells();
        let dims = IxDyn(grid.shape().dims());
        let mut a = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let u = CentralField::from_shape_vec(dims.clone(), e).unwrap();
            for (r, v) in grid.laplacian(&u).unwrap().iter().enumerate() {
                a[(r, c)] = -v;
            }
        }
        a
    }

    fn random_center(dims: &[usize], rng: &mut ChaCha8Rng) -> CentralField {
        ArrayD::from_shape_fn(IxDyn(dims), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_rhs_gives_zero() {
        for v in [Variant::Mfp, Variant::Mfg] {
            let p = SpectralPlan::new(&shape(&[3, 4]), v);
            let z = CentralField::zeros(IxDyn(&[3, 4]));
            assert!(p.solve(&z).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_mode_is_inverted() {
        let s = shape(&[2, 2]);
        let p = SpectralPlan::new(&s, Variant::Mfp);
        let psi = p.basis_vector(&[1, 0]);
        let lam = p.eigenvalues()[[1, 0]];
        assert!((lam + 8.0).abs() < 1e-12);
        let phi = p.solve_neumann(&psi.mapv(|v| -lam * v)).unwrap();
        for (a, b) in phi.iter().zip(psi.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn neumann_matches_dense_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [vec![3, 4], vec![4, 4, 4], vec![2, 3, 4]] {
            let g = Grid::mfp(shape(&n));
            let p = SpectralPlan::new(g.shape(), Variant::Mfp);
            let mut rhs = random_center(&n, &mut rng);
            let mean = rhs.mean().unwrap();
            rhs.mapv_inplace(|v| v - mean);
            // −Lap + 𝟙𝟙ᵀ/N is nonsingular and agrees with the pseudo-inverse on
            // zero-mean data.
            let n_cells = rhs.len();
            let a = dense_neg_laplacian(&g).add_scalar(1.0 / n_cells as f64);
            let b = nalgebra::DVector::from_iterator(n_cells, rhs.iter().copied());
            let x = a.lu().solve(&b).unwrap();
            let phi = p.solve_neumann(&rhs).unwrap();
            for (u, v) in phi.iter().zip(x.iter()) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
            assert!(phi.sum().abs() < 1e-10);
            assert_eq!(p.incompatible_count(), 0);
        }
    }

    #[test]
    fn incompatible_rhs_is_projected_and_counted() {
        let p = SpectralPlan::new(&shape(&[3, 3]), Variant::Mfp);
        let phi = p.solve_neumann(&CentralField::from_elem(IxDyn(&[3, 3]), 1.0)).unwrap();
        assert!(phi.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(p.incompatible_count(), 1);
    }

    #[test]
    fn mfg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [vec![3, 3], vec![4, 2, 3], vec![4, 4, 4]] {
            let g = Grid::mfg(shape(&n));
            let p = SpectralPlan::for_grid(&g);
            let a = dense_neg_laplacian(&g);
            for rhs in [random_center(&n, &mut rng), CentralField::from_elem(IxDyn(&n), 1.0)] {
                let b = nalgebra::DVector::from_iterator(rhs.len(), rhs.iter().copied());
                let x = a.clone().lu().solve(&b).unwrap();
                let phi = p.solve_mfg(&rhs).unwrap();
                assert!(phi.iter().any(|v| v.abs() > 1e-3));
                for (u, v) in phi.iter().zip(x.iter()) {
                    assert!((u - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fast_and_direct_transforms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [vec![5, 7], vec![16, 64], vec![4, 6, 8], vec![3, 4], vec![2, 3, 4]] {
            for v in [Variant::Mfp, Variant::Mfg] {
                let fast = SpectralPlan::with_mode(&shape(&n), v, TransformMode::Fast);
                let direct = SpectralPlan::with_mode(&shape(&n), v, TransformMode::Direct);
                let u = random_center(&n, &mut rng);
                let a = fast.forward(&u).unwrap();
                let b = direct.forward(&u).unwrap();
                let scale = u.iter().fold(0.0f64, |m, x| m.max(x.abs())) * (u.len() as f64).sqrt();
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
                }
                let back = fast.inverse(&a).unwrap();
                for (x, y) in back.iter().zip(u.iter()) {
                    assert!((x - y).abs() <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn bases_are_orthonormal_eigenvectors() {
        for n in [vec![2, 2], vec![3, 4], vec![4, 4], vec![2, 3, 4]] {
            for v in [Variant::Mfp, Variant::Mfg] {
                let g = Grid::new(shape(&n), v.time_boundary());
                let p = SpectralPlan::new(g.shape(), v);
                let modes: Vec<(Vec<usize>, CentralField)> = ndarray::indices(IxDyn(&n))
                    .into_iter()
                    .map(|ix| {
                        let i: Vec<usize> = ix.as_array_view().to_vec();
                        let b = p.basis_vector(&i);
                        (i, b)
                    })
                    .collect();
                for (i, a) in &modes {
                    let lap = g.laplacian(a).unwrap();
                    let lam = p.eigenvalues()[IxDyn(i)];
                    for (x, y) in lap.iter().zip(a.iter()) {
                        assert!((x - lam * y).abs() <= 1e-10 * lam.abs().max(1.0));
                    }
                    for (k, b) in &modes {
                        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                        let expect = if i == k { 1.0 } else { 0.0 };
                        assert!((dot - expect).abs() < 1e-12);
                    }
                }
                let signs_ok = p.eigenvalues().iter().all(|&l| match v {
                    Variant::Mfp => l <= 0.0,
                    Variant::Mfg => l < 0.0,
                });
                assert!(signs_ok);
            }
        }
    }

    #[test]
    fn mode_sweep_on_two_by_two() {
        // Modes (1,0), (0,1): λ = −8, σ² = 8; mode (1,1): λ = −16.
        let s = mode_sweep(&shape(&[2, 2]));
        assert!((s.grad_lapinv_div - 1.0).abs() < 1e-12);
        assert!((s.grad_lapinv - 1.0 / 8f64.sqrt()).abs() < 1e-12);
        assert!((s.inverse_eigenvalue - 0.125).abs() < 1e-12);
        let est = operator_norm_checks(&shape(&[2, 2]));
        assert!((est.grad_lapinv_div - s.grad_lapinv_div).abs() < 1e-9);
        assert!((est.grad_lapinv - s.grad_lapinv).abs() < 1e-9);
    }

    #[test]
    fn lanczos_matches_sweep() {
        // [8, 8, 7] has two smallest eigenvalues within 0.5% of each other.
        for n in [vec![3, 5], vec![8, 8], vec![2, 7, 4], vec![8, 8, 7]] {
            let s = shape(&n);
            let sweep = mode_sweep(&s);
            let est = operator_norm_checks(&s);
            assert!((est.grad_lapinv_div - sweep.grad_lapinv_div).abs() < 1e-9);
            assert!((est.grad_lapinv - sweep.grad_lapinv).abs() < 1e-9, "{est:?} {sweep:?}");
        }
    }
}
