//! Executing a config and writing its artifacts.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `diagnostics.csv` | `iter,objective,stationarity,feasibility,mass,min_density,step` |
//! | `timing.csv` | `iter,elapsed` (seconds since the start of the recorded solve) |
//! | `snapshot_NN.csv` | `x1,…,xD,rho` on the central slice nearest each requested time |
//! | `snapshot_NN.pgm` | 8-bit heatmap of the same slice (2D space only) |
//! | `density.pgm` | space–time heatmap of `ρ̄` (1D space only) |
//! | `summary.txt`, `summary.kv` | final figures, human-readable and `key=value` |
//!
//! Floating-point values are written with 17 significant digits and parse
//! back to the same bits. Wall-clock time lives only in `timing.csv` and the
//! summaries, so identical configs give byte-identical diagnostics.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use log::info;
use mfp_core::analytic::{error_norms, exact_w2sq, w2sq_from_objective, AnalyticError, ErrorNorms};
use mfp_core::grid::{CentralField, Grid};
use mfp_core::multiscale::{mg_fista, ml_fista, LevelHierarchy, MultiscaleError};
use mfp_core::solver::{solve, Problem, SolveError, SolveReport};
use ndarray::{ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, DensitySource, Init, ModelKind, RunConfig, SolverSection, Variant};
use crate::sources::{build_problem, SourceError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Unsupported(String),
    /// The solver diverged; partial diagnostics were written to `dir`.
    #[error("solver diverged ({reason}); partial diagnostics in {dir}")]
    Diverged { reason: String, dir: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One solver variant with its multigrid depth `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub k: usize,
}

impl VariantSpec {
    pub fn name(&self) -> String {
        match self.variant {
            Variant::Fista => "fista".into(),
            Variant::Mlfista => "mlfista".into(),
            Variant::Mgfista => format!("mgfista({})", self.k),
        }
    }

    /// Parses `fista`, `mlfista`, `mgfista` or `mgfista(K)`; a bare
    /// `mgfista` takes `default_k`.
    pub fn parse(text: &str, default_k: usize) -> Result<Self, RunError> {
        let t = text.trim().to_ascii_lowercase();
        let bad = || RunError::Unsupported(format!("unknown variant {text:?}"));
        let spec = match t.as_str() {
            "fista" => VariantSpec { variant: Variant::Fista, k: default_k },
            "mlfista" => VariantSpec { variant: Variant::Mlfista, k: default_k },
            "mgfista" => VariantSpec { variant: Variant::Mgfista, k: default_k },
            _ => {
                let k = t
                    .strip_prefix("mgfista(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(bad)?;
                VariantSpec { variant: Variant::Mgfista, k }
            }
        };
        Ok(spec)
    }
}

/// Initial iterate for plain FISTA; `None` means the solver default.
fn initial_fields(problem: &Problem, init: Init, seed: u64) -> Option<mfp_core::grid::StaggeredFields> {
    match init {
        Init::Auto => None,
        Init::Ones => Some(problem.grid().filled(1.0)),
        Init::Resting => Some(problem.resting_start()),
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = problem.grid().zeros();
            for c in f.components_mut() {
                c.mapv_inplace(|_| 1.0 + rng.gen_range(-0.5..0.5));
            }
            Some(f)
        }
    }
}

/// Runs one variant on `problem`.
pub fn solve_variant(problem: &Problem, section: &SolverSection, spec: VariantSpec, seed: u64) -> Result<SolveReport, RunError> {
    if spec.variant != Variant::Fista && !matches!(section.init, Init::Auto | Init::Ones) {
        return Err(RunError::Unsupported("custom initialization applies to plain fista only".into()));
    }
    match spec.variant {
        Variant::Fista => {
            let init = initial_fields(problem, section.init, seed);
            Ok(solve(problem, &section.solver_config(), init.as_ref())?)
        }
        Variant::Mlfista => {
            let h = LevelHierarchy::new(problem, section.levels)?;
            Ok(ml_fista(&h, &section.multiscale_config())?)
        }
        Variant::Mgfista => {
            let h = LevelHierarchy::new(problem, section.levels)?;
            Ok(mg_fista(&h, &section.multiscale_config(), spec.k)?)
        }
    }
}

/// Pulls the partial report out of a divergence, if that is what happened.
pub fn diverged_report(err: &RunError) -> Option<(&str, &SolveReport)> {
    let solve_err = match err {
        RunError::Solve(e) | RunError::Multiscale(MultiscaleError::Solve(e)) => e,
        _ => return None,
    };
    match solve_err {
        SolveError::Diverged { reason, report, .. } => Some((reason.as_str(), report)),
        _ => None,
    }
}

/// Whether the config is the closed-form 1D transport benchmark.
pub fn is_ot1d_benchmark(cfg: &RunConfig) -> bool {
    let p = &cfg.problem;
    p.shape.len() == 2
        && p.kind == ModelKind::Ot
        && !p.game
        && p.lambda_q == 0.0
        && matches!(p.rho0, DensitySource::Ot1dExact { time } if time == 0.0)
        && matches!(p.rho1, Some(DensitySource::Ot1dExact { time }) if time == 1.0)
}

/// Index of the central time slice nearest `t`; slice `j` sits at `(j + ½)Δ₀`.
pub fn snapshot_slice(t: f64, n0: usize) -> usize {
    let j = (t * n0 as f64 - 0.5).round();
    j.clamp(0.0, (n0 - 1) as f64) as usize
}

/// The cell-centre density `ρ̄` of a solution.
pub fn central_density(problem: &Problem, report: &SolveReport) -> Result<CentralField, RunError> {
    let (rho, _) = problem
        .grid()
        .average_to_center(&report.fields, problem.boundary())
        .map_err(SolveError::from)?;
    Ok(rho)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: SolveReport,
    /// Central density at each requested snapshot: `(requested t, slice index, samples)`.
    pub snapshots: Vec<(f64, usize, ArrayD<f64>)>,
    pub errors: Option<ErrorNorms>,
}

/// Parses, solves and writes all artifacts into `out`.
pub fn run(cfg: &RunConfig, out: &Path, seed: u64) -> Result<RunOutput, RunError> {
    let problem = build_problem(&cfg.problem, &cfg.base_dir)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let spec = VariantSpec {
        variant: cfg.solver.variant,
        k: cfg.solver.k,
    };
    info!("solving {:?} with {} into {}", cfg.problem.shape, spec.name(), out.display());
    let report = match solve_variant(&problem, &cfg.solver, spec, seed) {
        Ok(r) => r,
        Err(e) => {
            if let Some((reason, partial)) = diverged_report(&e) {
                write_diagnostics(out, partial)?;
                return Err(RunError::Diverged {
                    reason: reason.to_string(),
                    dir: out.to_path_buf(),
                });
            }
            return Err(e);
        }
    };
    write_diagnostics(out, &report)?;

    let rho = central_density(&problem, &report)?;
    let grid = problem.grid();
    let n0 = grid.shape().dims()[0];
    let mut snapshots = Vec::new();
    for (i, &t) in cfg.output.snapshots.iter().enumerate() {
        let j = snapshot_slice(t, n0);
        let slice = rho.index_axis(Axis(0), j).to_owned();
        write_snapshot(&out.join(format!("snapshot_{i:02}.csv")), grid, &slice)?;
        if cfg.output.heatmaps && slice.ndim() == 2 {
            write_heatmap(&out.join(format!("snapshot_{i:02}.pgm")), &slice)?;
        }
        snapshots.push((t, j, slice));
    }
    if cfg.output.heatmaps && rho.ndim() == 2 {
        write_heatmap(&out.join("density.pgm"), &rho)?;
    }

    let errors = if is_ot1d_benchmark(cfg) {
        Some(error_norms(grid, &report.fields)?)
    } else {
        None
    };
    let output = RunOutput {
        dir: out.to_path_buf(),
        report,
        snapshots,
        errors,
    };
    write_summary(out, cfg, &spec, &output)?;
    info!(
        "done: {} iterations, objective {:.6e}, {:.3}s",
        output.report.iterations, output.report.objective, output.report.elapsed
    );
    Ok(output)
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `diagnostics.csv` and `timing.csv` for the recorded iterations.
pub fn write_diagnostics(dir: &Path, report: &SolveReport) -> Result<(), RunError> {
    let path = dir.join("diagnostics.csv");
    let mut w = create(&path)?;
    let mut text = String::from("iter,objective,stationarity,feasibility,mass,min_density,step\n");
    for r in &report.records {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt(r.objective),
            fmt(r.residues.stationarity),
            fmt(r.residues.feasibility),
            fmt(r.residues.mass),
            fmt(r.min_density),
            fmt(r.step)
        );
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;

    let path = dir.join("timing.csv");
    let mut w = create(&path)?;
    let mut text = String::from("iter,elapsed\n");
    for r in &report.records {
        let _ = writeln!(text, "{},{}", r.iter, fmt(r.elapsed));
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))
}

/// Rows of `x1,…,xD,rho` in row-major order over the spatial cells.
pub fn write_snapshot(path: &Path, grid: &Grid, slice: &ArrayD<f64>) -> Result<(), RunError> {
    let shape = grid.shape();
    let mut text: String = (1..=slice.ndim()).map(|d| format!("x{d},")).collect();
    text.push_str("rho\n");
    for (ix, v) in slice.indexed_iter() {
        for d in 0..slice.ndim() {
            text.push_str(&fmt(shape.center(d + 1, ix[d])));
            text.push(',');
        }
        text.push_str(&fmt(*v));
        text.push('\n');
    }
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Reads a CSV written by this module: the header and the numeric rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(io_err(path))?.split(',').map(str::to_string).collect(),
        None => {
            return Err(RunError::Format {
                path: path.to_path_buf(),
                message: "empty file".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        let row = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RunError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 2),
            })?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// 8-bit grayscale heatmap scaled so the largest value is white. The first
/// axis runs down the rows.
pub fn write_heatmap(path: &Path, field: &ArrayD<f64>) -> Result<(), RunError> {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let max = field.iter().fold(0.0_f64, |m, &v| m.max(v));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels: Vec<u8> = field.iter().map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8).collect();
    let file = create(path)?;
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pixels, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| RunError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn write_summary(dir: &Path, cfg: &RunConfig, spec: &VariantSpec, out: &RunOutput) -> Result<(), RunError> {
    let r = &out.report;
    let min_density = r.records.last().map_or(f64::NAN, |rec| rec.min_density);
    let total_iterations: usize = r.levels.iter().map(|l| l.iterations).sum::<usize>().max(r.iterations);
    let shape = cfg.problem.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut kv: Vec<(&str, String)> = vec![
        ("variant", spec.name()),
        ("shape", shape.clone()),
        ("iterations", r.iterations.to_string()),
        ("total_iterations", total_iterations.to_string()),
        ("converged", r.converged.to_string()),
        ("objective", fmt(r.objective)),
        ("stationarity", fmt(r.residues.stationarity)),
        ("feasibility", fmt(r.residues.feasibility)),
        ("mass", fmt(r.residues.mass)),
        ("max_feasibility", fmt(r.max_feasibility)),
        ("max_mass", fmt(r.max_mass)),
        ("min_density", fmt(min_density)),
        ("final_step", fmt(r.final_step)),
        ("elapsed", fmt(r.elapsed)),
    ];
    if let Some(e) = &out.errors {
        let w2 = w2sq_from_objective(r.objective);
        kv.push(("error_l2", fmt(e.l2)));
        kv.push(("error_max", fmt(e.max)));
        kv.push(("w2sq", fmt(w2)));
        kv.push(("w2sq_error", fmt((w2 - exact_w2sq()).abs())));
    }
    let path = dir.join("summary.kv");
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(&path, text).map_err(io_err(&path))?;

    let mut text = format!(
        "{} on {shape}: {} after {} iterations in {:.3} s\n",
        spec.name(),
        if r.converged { "converged" } else { "stopped" },
        r.iterations,
        r.elapsed
    );
    let _ = writeln!(text, "objective      {:.10e}", r.objective);
    let _ = writeln!(text, "stationarity   {:.3e}", r.residues.stationarity);
    let _ = writeln!(text, "feasibility    {:.3e} (max {:.3e})", r.residues.feasibility, r.max_feasibility);
    let _ = writeln!(text, "mass           {:.3e} (max {:.3e})", r.residues.mass, r.max_mass);
    let _ = writeln!(text, "min density    {min_density:.3e}");
    for l in &r.levels {
        let _ = writeln!(text, "level {}  {} iterations  {:.3} s", l.shape, l.iterations, l.elapsed);
    }
    if let Some(e) = &out.errors {
        let w2 = w2sq_from_objective(r.objective);
        let _ = writeln!(text, "‖E‖₂           {:.4e}", e.l2);
        let _ = writeln!(text, "‖E‖∞           {:.4e}", e.max);
        let _ = writeln!(text, "W₂²            {w2:.10e} (error {:.4e})", (w2 - exact_w2sq()).abs());
    }
    for (i, (t, j, _)) in out.snapshots.iter().enumerate() {
        let _ = writeln!(text, "snapshot_{i:02}   t = {t} → slice {j}");
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, text).map_err(io_err(&path))
}

/// Parses a `summary.kv` file.
pub fn read_summary(path: &Path) -> Result<Vec<(String, String)>, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
