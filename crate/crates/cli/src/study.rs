//! Grid-refinement study on the closed-form 1D transport benchmark.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use log::info;
use mfp_core::analytic::{error_norms, exact_w2sq, ot1d_problem, w2sq_from_objective};
use mfp_core::solver::solve;

use crate::config::{ModelKind, RunConfig};
use crate::run::{is_ot1d_benchmark, RunError};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n0: usize,
    pub n1: usize,
    pub iterations: usize,
    pub converged: bool,
    pub error_l2: f64,
    pub error_max: f64,
    pub w2sq: f64,
    pub w2sq_error: f64,
    pub objective: f64,
    pub seconds: f64,
}

/// Rows in ladder order; `orders[i]` compares rows `i` and `i + 1` as
/// `log₂(e_coarse / e_fine)` for `‖E‖₂`, `‖E‖∞` and the `W₂²` error.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub orders: Vec<[f64; 3]>,
}

pub fn order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

fn check(cfg: &RunConfig) -> Result<(), RunError> {
    let p = &cfg.problem;
    if p.shape.len() != 2 {
        return Err(RunError::Unsupported(format!(
            "convergence study needs one space axis, config has {}",
            p.shape.len().saturating_sub(1)
        )));
    }
    if p.kind != ModelKind::Ot || p.game || !is_ot1d_benchmark(cfg) {
        return Err(RunError::Unsupported(
            "convergence study needs the 1D OT benchmark (kind = \"ot\", ot1d-exact sources at t = 0 and 1)".into(),
        ));
    }
    Ok(())
}

/// Solves the benchmark on every `(n0, n1)` of `grids` with the config's
/// solver settings (plain FISTA), using up to `threads` grids at a time.
pub fn convergence_study(cfg: &RunConfig, grids: &[[usize; 2]], threads: usize) -> Result<StudyTable, RunError> {
    check(cfg)?;
    let solver = cfg.solver.solver_config();
    let results: Vec<Mutex<Option<Result<StudyRow, RunError>>>> = grids.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let run_one = |[n0, n1]: [usize; 2]| -> Result<StudyRow, RunError> {
        info!("study grid ({n0}, {n1})");
        let problem = ot1d_problem(n0, n1)?;
        let r = solve(&problem, &solver, None)?;
        let e = error_norms(problem.grid(), &r.fields)?;
        let w2sq = w2sq_from_objective(r.objective);
        Ok(StudyRow {
            n0,
            n1,
            iterations: r.iterations,
            converged: r.converged,
            error_l2: e.l2,
            error_max: e.max,
            w2sq,
            w2sq_error: (w2sq - exact_w2sq()).abs(),
            objective: r.objective,
            seconds: r.elapsed,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, grids.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&g) = grids.get(i) else { break };
                *results[i].lock().expect("result lock") = Some(run_one(g));
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every grid ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let orders = rows
        .windows(2)
        .map(|w| {
            [
                order(w[0].error_l2, w[1].error_l2),
                order(w[0].error_max, w[1].error_max),
                order(w[0].w2sq_error, w[1].w2sq_error),
            ]
        })
        .collect();
    Ok(StudyTable { rows, orders })
}

impl StudyTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Δ₀ | Δ₁ | ‖E‖₂ | order | ‖E‖∞ | order | W₂² error | order | iterations |\n\
             |----|----|------|-------|------|-------|-----------|-------|------------|\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let o = |m: usize| {
                i.checked_sub(1)
                    .map_or_else(|| "–".to_string(), |p| format!("{:.2}", self.orders[p][m]))
            };
            let _ = writeln!(
                s,
                "| 1/{} | 1/{} | {:.2e} | {} | {:.2e} | {} | {:.2e} | {} | {} |",
                r.n0,
                r.n1,
                r.error_l2,
                o(0),
                r.error_max,
                o(1),
                r.w2sq_error,
                o(2),
                r.iterations
            );
        }
        s
    }

    /// Full-precision CSV; the first row has empty order columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n0,n1,iterations,converged,error_l2,order_l2,error_max,order_max,w2sq,w2sq_error,order_w2sq,seconds\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let o = |m: usize| i.checked_sub(1).map_or(String::new(), |p| format!("{:.16e}", self.orders[p][m]));
            let _ = writeln!(
                s,
                "{},{},{},{},{:.16e},{},{:.16e},{},{:.16e},{:.16e},{},{:.6}",
                r.n0,
                r.n1,
                r.iterations,
                r.converged,
                r.error_l2,
                o(0),
                r.error_max,
                o(1),
                r.w2sq,
                r.w2sq_error,
                o(2),
                r.seconds
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, text) in [("study.md", self.to_markdown()), ("study.csv", self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })?;
        }
        Ok(())
    }
}
