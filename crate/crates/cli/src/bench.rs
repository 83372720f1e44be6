//! Side-by-side comparison of solver variants on one problem.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use mfp_core::solver::SolveReport;

use crate::config::RunConfig;
use crate::run::{solve_variant, RunError, VariantSpec};
use crate::sources::build_problem;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    /// Iterations at the finest level.
    pub iterations: usize,
    /// Iterations summed over all levels.
    pub total_iterations: usize,
    pub seconds: f64,
    pub objective: f64,
    pub stationarity: f64,
    /// Largest residues seen after any projection.
    pub feasibility: f64,
    pub mass: f64,
}

impl BenchRow {
    pub fn from_report(spec: &VariantSpec, r: &SolveReport) -> Self {
        let total = r.levels.iter().map(|l| l.iterations).sum::<usize>().max(r.iterations);
        Self {
            variant: spec.name(),
            iterations: r.iterations,
            total_iterations: total,
            seconds: r.elapsed,
            objective: r.objective,
            stationarity: r.residues.stationarity,
            feasibility: r.max_feasibility,
            mass: r.max_mass,
        }
    }
}

/// Runs each variant in turn on the config's problem and tolerance.
pub fn bench(cfg: &RunConfig, variants: &[VariantSpec], seed: u64) -> Result<Vec<BenchRow>, RunError> {
    let problem = build_problem(&cfg.problem, &cfg.base_dir)?;
    variants
        .iter()
        .map(|spec| {
            info!("bench {}", spec.name());
            let r = solve_variant(&problem, &cfg.solver, *spec, seed)?;
            Ok(BenchRow::from_report(spec, &r))
        })
        .collect()
}

pub fn to_markdown(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "| variant | iterations | total iterations | seconds | objective | stationarity | feasibility | mass |\n\
         |---------|------------|------------------|---------|-----------|--------------|-------------|------|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.8e} | {:.2e} | {:.2e} | {:.2e} |",
            r.variant, r.iterations, r.total_iterations, r.seconds, r.objective, r.stationarity, r.feasibility, r.mass
        );
    }
    s
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,iterations,total_iterations,seconds,objective,stationarity,feasibility,mass\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.variant, r.iterations, r.total_iterations, r.seconds, r.objective, r.stationarity, r.feasibility, r.mass
        );
    }
    s
}

pub fn write(rows: &[BenchRow], dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (name, text) in [("bench.md", to_markdown(rows)), ("bench.csv", to_csv(rows))] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    #[test]
    fn single_variant_gives_one_row() {
        let text = "[problem]\nshape = [8, 16]\nrho0 = { type = \"uniform\" }\nrho1 = { type = \"uniform\" }\n";
        let cfg = RunConfig::parse(text).unwrap();
        let rows = bench(&cfg, &[VariantSpec { variant: Variant::Fista, k: 0 }], 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(to_markdown(&rows).lines().count(), 3);
        assert_eq!(to_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn all_variants_conserve_mass() {
        let text = "[problem]\nshape = [16, 32]\n\
                    rho0 = { type = \"gaussian\", blobs = [{ center = [0.3], sigma = 0.08 }], background = 0.1 }\n\
                    rho1 = { type = \"gaussian\", blobs = [{ center = [0.7], sigma = 0.08 }], background = 0.1 }\n\
                    [solver]\nlevels = 2\nk = 3\ntol = 1e-4\n";
        let cfg = RunConfig::parse(text).unwrap();
        let specs: Vec<_> = ["fista", "mlfista", "mgfista"].iter().map(|v| VariantSpec::parse(v, 3).unwrap()).collect();
        let rows = bench(&cfg, &specs, 0).unwrap();
        assert_eq!(rows[2].variant, "mgfista(3)");
        assert!(rows[1].total_iterations > rows[1].iterations);
        for r in &rows {
            assert!(r.mass <= 1e-12, "{}: {}", r.variant, r.mass);
        }
    }
}
