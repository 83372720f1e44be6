//! Run configuration: a TOML file with `[problem]`, `[solver]`, `[output]`
//! and `[study]` sections.
//!
//! ```toml
//! [problem]
//! shape = [64, 256]
//! kind = "ot"
//! rho0 = { type = "gaussian", blobs = [{ center = [0.3], sigma = 0.05 }], background = 0.1 }
//! rho1 = { type = "gaussian", blobs = [{ center = [0.7], sigma = 0.05 }], background = 0.1 }
//!
//! [solver]
//! variant = "mlfista"
//! levels = 3
//! tol = 1e-4
//! ```
//!
//! Errors carry the 1-based line of the offending key when it can be found.

use std::path::{Path, PathBuf};

use mfp_core::costs::{CostKind, DEFAULT_DENSITY_FLOOR};
use mfp_core::multiscale::MultiscaleConfig;
use mfp_core::solver::{SolverConfig, StepPolicy};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config line {line}: {key}: {message}")]
    Invalid { line: usize, key: String, message: String },
    #[error("config: {key}: {message}")]
    InvalidUnlocated { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Ot,
    Entropy,
    Quadratic,
    Reciprocal,
}

impl From<ModelKind> for CostKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Ot => CostKind::Ot,
            ModelKind::Entropy => CostKind::Entropy,
            ModelKind::Quadratic => CostKind::Quadratic,
            ModelKind::Reciprocal => CostKind::Reciprocal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec<f64>,
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

/// Where spatial samples come from.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySource {
    Uniform {
        #[serde(default = "one")]
        value: f64,
    },
    /// The closed-form 1D transport benchmark at time `time` (0 or 1).
    Ot1dExact {
        #[serde(default)]
        time: f64,
    },
    /// Sum of Gaussian bumps plus a constant background, scaled to unit mass.
    Gaussian {
        blobs: Vec<Blob>,
        #[serde(default)]
        background: f64,
    },
    /// 8- or 16-bit binary PGM, resampled to the spatial grid.
    Image {
        path: PathBuf,
        #[serde(default = "yes")]
        normalize: bool,
        #[serde(default)]
        mask: bool,
    },
    /// `value` inside the axis-aligned box `[lo, hi]`, zero outside.
    Rect {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default = "one")]
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub shape: Vec<usize>,
    #[serde(default)]
    pub kind: ModelKind,
    /// Potential game with a free terminal density instead of a pinned `ρ₁`.
    #[serde(default)]
    pub game: bool,
    #[serde(default)]
    pub lambda_e: f64,
    #[serde(default)]
    pub lambda_q: f64,
    #[serde(default)]
    pub lambda_g: f64,
    pub rho0: DensitySource,
    pub rho1: Option<DensitySource>,
    pub q: Option<DensitySource>,
    pub g: Option<DensitySource>,
    /// Multiplier applied to the sampled `g`; negative values turn a bump into an attractor.
    #[serde(default = "one")]
    pub g_scale: f64,
    /// Zero the boundary densities wherever `Q ≥ 0.5` before mass matching.
    #[serde(default)]
    pub clear_obstacle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Fista,
    Mlfista,
    Mgfista,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    #[default]
    Constant,
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// The solver default: `resting` for games, `ones` otherwise.
    #[default]
    Auto,
    /// `P ≡ M ≡ 1`.
    Ones,
    /// `P(t) ≡ ρ₀`, `M ≡ 0`.
    Resting,
    /// `1 + U(−½, ½)` per entry, drawn from the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub variant: Variant,
    /// Pre-smoothing iterations for `mgfista`.
    pub k: usize,
    pub levels: usize,
    pub step: StepKind,
    pub eta: f64,
    pub shrink: f64,
    pub growth: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub density_floor: f64,
    pub record_every: usize,
    pub restart: bool,
    pub level_tols: Option<Vec<f64>>,
    pub final_projection: bool,
    pub init: Init,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            variant: Variant::Fista,
            k: 5,
            levels: 3,
            step: StepKind::Constant,
            eta: d.step.initial(),
            shrink: 0.5,
            growth: 1.0,
            tol: d.tol,
            max_iters: d.max_iters,
            density_floor: DEFAULT_DENSITY_FLOOR,
            record_every: d.record_every,
            restart: d.restart,
            level_tols: None,
            final_projection: true,
            init: Init::Auto,
        }
    }
}

impl SolverSection {
    pub fn solver_config(&self) -> SolverConfig {
        let step = match self.step {
            StepKind::Constant => StepPolicy::Constant(self.eta),
            StepKind::Backtracking => StepPolicy::Backtracking {
                initial: self.eta,
                shrink: self.shrink,
                growth: self.growth,
            },
        };
        SolverConfig {
            step,
            tol: self.tol,
            max_iters: self.max_iters,
            density_floor: self.density_floor,
            record_every: self.record_every,
            restart: self.restart,
            ..SolverConfig::default()
        }
    }

    pub fn multiscale_config(&self) -> MultiscaleConfig {
        MultiscaleConfig {
            solver: self.solver_config(),
            level_tols: self.level_tols.clone(),
            final_projection: self.final_projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Times in `[0, 1]`; each maps to the nearest cell-centre time slice.
    pub snapshots: Vec<f64>,
    pub heatmaps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            snapshots: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            heatmaps: true,
        }
    }
}

/// Grid ladder for `convergence-study`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub grids: Vec<[usize; 2]>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            grids: vec![[16, 64], [32, 128], [64, 256], [128, 512]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub study: StudyConfig,
    /// Directory relative paths are resolved against (the config's directory).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]` (dotted sections allowed), or of the
/// section header itself when the key is absent.
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') && !line.starts_with("[[") {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(1),
            message: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let err = |section: &str, key: &str, message: String| match locate(text, section, key) {
            Some(line) => ConfigError::Invalid {
                line,
                key: format!("{section}.{key}"),
                message,
            },
            None => ConfigError::InvalidUnlocated {
                key: format!("{section}.{key}"),
                message,
            },
        };
        let p = &self.problem;
        if p.shape.len() < 2 || p.shape.iter().any(|&n| n < 2) {
            return Err(err("problem", "shape", format!("need a time axis and at least one space axis, each with n ≥ 2, got {:?}", p.shape)));
        }
        if p.game && p.rho1.is_some() {
            return Err(err("problem", "rho1", "games have a free terminal density; use g instead".into()));
        }
        if !p.game && p.rho1.is_none() {
            return Err(err("problem", "rho1", "planning problems need a terminal density".into()));
        }
        for (key, v) in [("lambda_e", p.lambda_e), ("lambda_q", p.lambda_q), ("lambda_g", p.lambda_g)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(err("problem", key, format!("must be a nonnegative number, got {v}")));
            }
        }
        if !p.g_scale.is_finite() {
            return Err(err("problem", "g_scale", format!("must be finite, got {}", p.g_scale)));
        }
        if p.lambda_q > 0.0 && p.q.is_none() {
            return Err(err("problem", "lambda_q", "needs a q source".into()));
        }
        if p.lambda_g > 0.0 && p.g.is_none() {
            return Err(err("problem", "lambda_g", "needs a g source".into()));
        }
        let s = &self.solver;
        if !(s.eta.is_finite() && s.eta > 0.0) {
            return Err(err("solver", "eta", format!("must be positive, got {}", s.eta)));
        }
        if !(s.tol.is_finite() && s.tol >= 0.0) {
            return Err(err("solver", "tol", format!("must be nonnegative, got {}", s.tol)));
        }
        if s.max_iters == 0 || s.record_every == 0 {
            return Err(err("solver", "max_iters", "max_iters and record_every must be positive".into()));
        }
        if s.variant == Variant::Mgfista && s.levels < 2 {
            return Err(err("solver", "levels", "mgfista needs at least two levels".into()));
        }
        if s.variant != Variant::Fista && p.game {
            return Err(err("solver", "variant", "multilevel variants support planning problems only".into()));
        }
        if let Some(t) = &s.level_tols {
            if t.len() != s.levels {
                return Err(err("solver", "level_tols", format!("expected {} entries, got {}", s.levels, t.len())));
            }
        }
        if let Some(bad) = self.output.snapshots.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(err("output", "snapshots", format!("times must lie in [0, 1], got {bad}")));
        }
        if let Some(bad) = self.study.grids.iter().find(|g| g[0] < 2 || g[1] < 2) {
            return Err(err("study", "grids", format!("invalid grid {bad:?}")));
        }
        Ok(())
    }

    /// Output directory: the command-line override, the configured one, or `out`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        match (cli, &self.output.dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(d)) => self.base_dir.join(d),
            (None, None) => PathBuf::from("out"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[problem]\nshape = [4, 8]\nrho0 = { type = \"uniform\" }\nrho1 = { type = \"uniform\" }\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.problem.kind, ModelKind::Ot);
        assert_eq!(c.solver.variant, Variant::Fista);
        assert_eq!(c.solver.solver_config(), SolverConfig::default());
        assert_eq!(c.output.snapshots.len(), 5);
        assert_eq!(c.study.grids[3], [128, 512]);
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = format!("{MINIMAL}\n[solver]\ntol = = 3\n");
        match RunConfig::parse(&text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_error_reports_line() {
        let text = format!("{MINIMAL}\n[output]\n# comment\nsnapshots = [0.5, 1.5]\n");
        match RunConfig::parse(&text) {
            Err(ConfigError::Invalid { line, key, .. }) => {
                assert_eq!(line, 8);
                assert_eq!(key, "output.snapshots");
            }
            other => panic!("{other:?}"),
        }
        let text = "[problem]\nshape = [4]\nrho0 = { type = \"uniform\" }\nrho1 = { type = \"uniform\" }\n";
        match RunConfig::parse(text) {
            Err(ConfigError::Invalid { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[solver]\nstep_size = 0.1\n");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Parse { line: 7, .. })));
    }

    #[test]
    fn terminal_scale_and_resting_init() {
        let game = "[problem]\nshape = [4, 8]\ngame = true\nlambda_g = 1.0\ng_scale = -2.0\n\
                    rho0 = { type = \"uniform\" }\ng = { type = \"uniform\" }\n";
        let c = RunConfig::parse(&format!("{game}[solver]\ninit = \"resting\"\n")).unwrap();
        assert_eq!(c.problem.g_scale, -2.0);
        assert_eq!(c.solver.init, Init::Resting);
        let bad = game.replace("-2.0", "nan");
        assert!(matches!(RunConfig::parse(&bad), Err(ConfigError::Invalid { line: 5, .. })));
    }

    #[test]
    fn multigrid_needs_two_levels() {
        let text = format!("{MINIMAL}\n[solver]\nvariant = \"mgfista\"\nlevels = 1\n");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid { line: 8, .. })));
    }

    #[test]
    fn sources_parse() {
        let text = "[problem]\nshape = [4, 8, 8]\ngame = true\nlambda_q = 2.0\n\
                    rho0 = { type = \"gaussian\", blobs = [{ center = [0.3, 0.5], sigma = 0.1 }], background = 0.1 }\n\
                    q = { type = \"image\", path = \"m.pgm\", mask = true }\n";
        let c = RunConfig::parse(text).unwrap();
        assert!(matches!(c.problem.q, Some(DensitySource::Image { mask: true, normalize: true, .. })));
        match &c.problem.rho0 {
            DensitySource::Gaussian { blobs, background } => {
                assert_eq!(blobs[0].weight, 1.0);
                assert_eq!(*background, 0.1);
            }
            other => panic!("{other:?}"),
        }
    }
}
