//! Turning [`DensitySource`]s into samples at spatial cell centres, and
//! assembling the [`Problem`] a config describes.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use mfp_core::analytic::{exact_density, AnalyticError};
use mfp_core::costs::{CostError, CostModel};
use mfp_core::grid::{GridError, GridShape};
use mfp_core::solver::{Problem, SolveError};
use ndarray::{Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::config::{DensitySource, ProblemConfig};

/// Image files larger than this are refused before decoding.
pub const MAX_IMAGE_BYTES: u64 = 64 << 20;
/// Mask mode marks pixels at or above this (normalized) gray level.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: file is {bytes} bytes, limit is {MAX_IMAGE_BYTES}")]
    TooLarge { path: PathBuf, bytes: u64 },
    #[error("{what}: zero total mass")]
    ZeroMass { what: String },
    #[error("{what}: {message}")]
    Shape { what: String, message: String },
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

fn shape_err(what: &str, message: String) -> SourceError {
    SourceError::Shape {
        what: what.to_string(),
        message,
    }
}

/// Spatial cell-centre coordinates of `shape` (which includes the time axis).
fn space_field(shape: &GridShape, f: impl Fn(&[f64]) -> f64) -> ArrayD<f64> {
    let space = shape.space_dims().to_vec();
    let mut x = vec![0.0; space.len()];
    ArrayD::from_shape_fn(IxDyn(&space), |ix| {
        for (d, xd) in x.iter_mut().enumerate() {
            *xd = shape.center(d + 1, ix[d]);
        }
        f(&x)
    })
}

fn mass(samples: &ArrayD<f64>, shape: &GridShape) -> f64 {
    samples.sum() * shape.space_cell_volume()
}

fn normalize(mut samples: ArrayD<f64>, shape: &GridShape, what: &str) -> Result<ArrayD<f64>, SourceError> {
    let m = mass(&samples, shape);
    if !(m > 0.0) {
        return Err(SourceError::ZeroMass { what: what.to_string() });
    }
    samples.mapv_inplace(|v| v / m);
    Ok(samples)
}

/// Samples of `source` on the spatial cell centres of `shape`. `what` names
/// the source in error messages; relative image paths resolve against `base`.
pub fn sample(source: &DensitySource, shape: &GridShape, base: &Path, what: &str) -> Result<ArrayD<f64>, SourceError> {
    let dim = shape.space_ndim();
    match source {
        DensitySource::Uniform { value } => {
            if !(value.is_finite() && *value >= 0.0) {
                return Err(shape_err(what, format!("uniform value must be nonnegative, got {value}")));
            }
            Ok(space_field(shape, |_| *value))
        }
        DensitySource::Ot1dExact { time } => {
            if dim != 1 {
                return Err(shape_err(what, format!("ot1d-exact needs one space axis, got {dim}")));
            }
            let mut out = space_field(shape, |_| 0.0);
            for (k, v) in out.iter_mut().enumerate() {
                *v = exact_density(*time, shape.center(1, k))?;
            }
            Ok(out)
        }
        DensitySource::Gaussian { blobs, background } => {
            if let Some(b) = blobs.iter().find(|b| b.center.len() != dim) {
                return Err(shape_err(what, format!("blob centre {:?} has {} coordinates, grid has {dim}", b.center, b.center.len())));
            }
            if let Some(b) = blobs.iter().find(|b| !(b.sigma > 0.0 && b.weight >= 0.0)) {
                return Err(shape_err(what, format!("blob needs sigma > 0 and weight ≥ 0, got {} and {}", b.sigma, b.weight)));
            }
            if !(*background >= 0.0) {
                return Err(shape_err(what, format!("background must be nonnegative, got {background}")));
            }
            let raw = space_field(shape, |x| {
                background
                    + blobs
                        .iter()
                        .map(|b| {
                            let r2: f64 = x.iter().zip(&b.center).map(|(a, c)| (a - c).powi(2)).sum();
                            b.weight * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                        })
                        .sum::<f64>()
            });
            normalize(raw, shape, what)
        }
        DensitySource::Rect { lo, hi, value } => {
            if lo.len() != dim || hi.len() != dim {
                return Err(shape_err(what, format!("rect corners need {dim} coordinates")));
            }
            if !(value.is_finite() && *value >= 0.0) {
                return Err(shape_err(what, format!("rect value must be nonnegative, got {value}")));
            }
            Ok(space_field(shape, |x| {
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v < *b);
                if inside {
                    *value
                } else {
                    0.0
                }
            }))
        }
        DensitySource::Image { path, normalize: norm, mask } => {
            if dim != 2 {
                return Err(shape_err(what, format!("image sources need two space axes, got {dim}")));
            }
            let space = shape.space_dims();
            let path = base.join(path);
            let samples = load_image_density(&path, [space[0], space[1]], *norm && !*mask, *mask)?;
            let out = samples.into_dyn();
            if *norm && !*mask {
                // Per-pixel normalization above is over pixels; rescale to the grid's measure.
                return normalize(out, shape, what);
            }
            Ok(out)
        }
    }
}

/// Reads an 8- or 16-bit binary PGM and resamples it to `dims` (rows along
/// the first space axis) by nearest neighbour: output cell `i` takes source
/// row `⌊(i + ½)·H / n⌋`. Gray levels map to `[0, 1]`. With `normalize` the
/// samples sum to one; with `mask` they are thresholded to `{0, 1}`.
pub fn load_image_density(path: &Path, dims: [usize; 2], normalize: bool, mask: bool) -> Result<Array2<f64>, SourceError> {
    let io = |source| SourceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = std::fs::metadata(path).map_err(io)?.len();
    if bytes > MAX_IMAGE_BYTES {
        return Err(SourceError::TooLarge {
            path: path.to_path_buf(),
            bytes,
        });
    }
    let image_err = |message: String| SourceError::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = ImageReader::open(path).map_err(io)?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader.decode().map_err(|e| image_err(e.to_string()))?;
    let (w, h, gray): (usize, usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(g) => (
            g.width() as usize,
            g.height() as usize,
            g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        ),
        DynamicImage::ImageLuma16(g) => (
            g.width() as usize,
            g.height() as usize,
            g.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(),
        ),
        other => return Err(image_err(format!("expected a grayscale PGM, got {:?}", other.color()))),
    };
    if w == 0 || h == 0 {
        return Err(image_err("empty image".into()));
    }
    let [n0, n1] = dims;
    let mut out = Array2::from_shape_fn((n0, n1), |(i, j)| {
        let r = (((i as f64 + 0.5) * h as f64 / n0 as f64).floor() as usize).min(h - 1);
        let c = (((j as f64 + 0.5) * w as f64 / n1 as f64).floor() as usize).min(w - 1);
        gray[r * w + c]
    });
    if mask {
        out.mapv_inplace(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 });
    } else if normalize {
        let total = out.sum();
        if !(total > 0.0) {
            return Err(SourceError::ZeroMass {
                what: path.display().to_string(),
            });
        }
        out.mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Builds the problem described by `cfg`. Planning runs rescale `ρ₁` to the
/// discrete mass of `ρ₀`.
pub fn build_problem(cfg: &ProblemConfig, base: &Path) -> Result<Problem, SourceError> {
    let shape = GridShape::new(cfg.shape.clone())?;
    let q = cfg.q.as_ref().map(|s| sample(s, &shape, base, "problem.q")).transpose()?;
    let clear = |mut rho: ArrayD<f64>| {
        if let (true, Some(q)) = (cfg.clear_obstacle, &q) {
            rho.zip_mut_with(q, |r, &m| {
                if m >= MASK_THRESHOLD {
                    *r = 0.0;
                }
            });
        }
        rho
    };
    let rho0 = clear(sample(&cfg.rho0, &shape, base, "problem.rho0")?);
    let m0 = mass(&rho0, &shape);
    if !(m0 > 0.0) {
        return Err(SourceError::ZeroMass { what: "problem.rho0".into() });
    }
    let rho1 = match (&cfg.rho1, cfg.game) {
        (_, true) => None,
        (Some(src), false) => {
            let mut rho1 = clear(sample(src, &shape, base, "problem.rho1")?);
            let m1 = mass(&rho1, &shape);
            if !(m1 > 0.0) {
                return Err(SourceError::ZeroMass { what: "problem.rho1".into() });
            }
            rho1.mapv_inplace(|v| v * (m0 / m1));
            Some(rho1)
        }
        (None, false) => return Err(shape_err("problem.rho1", "planning problems need a terminal density".into())),
    };
    let mut model = CostModel::new(cfg.kind.into(), cfg.lambda_e, cfg.lambda_q, q)?;
    let Some(rho1) = rho1 else {
        if let Some(g) = &cfg.g {
            model = model.with_terminal(cfg.lambda_g, sample(g, &shape, base, "problem.g")? * cfg.g_scale)?;
        }
        return Ok(Problem::mfg(shape, rho0, model)?);
    };
    Ok(Problem::mfp(shape, rho0, rho1, model)?)
}
