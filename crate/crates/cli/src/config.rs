//! Run configuration: a TOML file describing the shape ensemble, basis,
//! perturbation and statistics settings.

use std::fmt;
use std::path::{Path, PathBuf};

use qbilliard_core::perturb::{EpsilonRule, PerturbParams, Tau};
use qbilliard_core::quantum::{BasisSpec, DEFAULT_INFLATION, MIN_DIMENSION};
use qbilliard_core::BilliardShape;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} invalid field(s):\n{}", .0.len(), list(.0))]
    Invalid(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRecord {
    pub name: String,
    pub width: f64,
    pub height: f64,
    pub curvature1: f64,
    pub offset1: f64,
    pub curvature2: f64,
    pub offset2: f64,
}

impl ShapeRecord {
    pub fn shape(&self) -> BilliardShape {
        BilliardShape {
            width: self.width,
            height: self.height,
            curvature1: self.curvature1,
            offset1: self.offset1,
            curvature2: self.curvature2,
            offset2: self.offset2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub n_max_x: usize,
    pub n_max_y: usize,
    pub keep_fraction: f64,
    /// Explicit V0. When absent, V0 = `step_factor` times the Weyl energy of
    /// level `target_levels` for each shape.
    #[serde(default)]
    pub step_height: Option<f64>,
    #[serde(default = "default_step_factor")]
    pub step_factor: f64,
    #[serde(default = "default_target_levels")]
    pub target_levels: usize,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
}

fn default_step_factor() -> f64 {
    10.0
}
fn default_target_levels() -> usize {
    580
}
fn default_inflation() -> f64 {
    DEFAULT_INFLATION
}

impl BasisConfig {
    /// Basis with V0 resolved for the given shape.
    pub fn spec_for(&self, shape: &BilliardShape) -> BasisSpec {
        let step_height = self
            .step_height
            .unwrap_or_else(|| self.step_factor * qbilliard_core::quantum::weyl_energy(self.target_levels, shape.area()));
        BasisSpec { n_max_x: self.n_max_x, n_max_y: self.n_max_y, step_height, keep_fraction: self.keep_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Only read when `epsilon_rule = "explicit"`.
    #[serde(default)]
    pub epsilon: f64,
    pub tau: Tau,
    pub epsilon_rule: EpsilonRule,
    #[serde(default = "default_delta_o_window")]
    pub delta_o_window: usize,
    /// Levels in the finite-tau consistency window.
    #[serde(default = "default_check_levels")]
    pub check_levels: usize,
    /// The consistency check uses `tau = check_tau_factor / Delta`.
    #[serde(default = "default_check_tau_factor")]
    pub check_tau_factor: f64,
}

impl PerturbConfig {
    pub fn params(&self) -> PerturbParams {
        PerturbParams { epsilon: self.epsilon, tau: self.tau, epsilon_rule: self.epsilon_rule }
    }
}

fn default_delta_o_window() -> usize {
    qbilliard_core::perturb::DELTA_O_WINDOW
}
fn default_check_levels() -> usize {
    200
}
fn default_check_tau_factor() -> f64 {
    1e4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default = "default_unfold_window")]
    pub unfold_window: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_unfold_window() -> usize {
    25
}
fn default_bins() -> usize {
    25
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { unfold_window: default_unfold_window(), histogram_bins: default_bins() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    /// Collisions per ergodic-average trajectory.
    #[serde(default = "default_collisions")]
    pub n_collisions: u64,
    /// Number of random starts for the ergodic average.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_lyapunov_collisions")]
    pub lyapunov_collisions: u64,
    /// Collisions written per trajectory dump (when dumps are enabled).
    #[serde(default = "default_dump")]
    pub dump_collisions: u64,
}

fn default_collisions() -> u64 {
    10_000
}
fn default_trajectories() -> usize {
    2
}
fn default_lyapunov_collisions() -> u64 {
    20_000
}
fn default_dump() -> u64 {
    1_000
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            n_collisions: default_collisions(),
            trajectories: default_trajectories(),
            lyapunov_collisions: default_lyapunov_collisions(),
            dump_collisions: default_dump(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub test_mode: bool,
    /// Where spectra are cached; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Shapes solved concurrently.
    pub jobs: usize,
    pub dump_trajectories: bool,
    pub shapes: Vec<ShapeRecord>,
    pub basis: BasisConfig,
    pub perturb: PerturbConfig,
    pub stats: StatsConfig,
    pub classical: ClassicalConfig,
}

impl RunConfig {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// The file as written: every top-level field optional so that missing
/// ones can be reported together with the other violations.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    test_mode: bool,
    cache_dir: Option<PathBuf>,
    jobs: Option<usize>,
    #[serde(default)]
    dump_trajectories: bool,
    #[serde(default, rename = "shape")]
    shapes: Vec<ShapeRecord>,
    basis: Option<BasisConfig>,
    perturb: Option<PerturbConfig>,
    #[serde(default)]
    stats: StatsConfig,
    #[serde(default)]
    classical: ClassicalConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub test_mode: bool,
    pub dump_trajectories: bool,
}

pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_config(path, &Overrides::default())
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut bad = Vec::new();
    let mut violation = |field: &str, rule: &str| bad.push(Violation { field: field.into(), rule: rule.into() });

    let seed = overrides.seed.or(raw.seed);
    if seed.is_none() {
        violation("seed", "required: a fixed seed makes reports reproducible");
    }
    let output_dir = overrides.output_dir.clone().or(raw.output_dir);
    if output_dir.is_none() {
        violation("output_dir", "required");
    }
    let test_mode = overrides.test_mode || raw.test_mode;
    if raw.shapes.is_empty() {
        violation("shape", "at least one [[shape]] entry is required");
    }
    let mut names = std::collections::BTreeSet::new();
    for (i, s) in raw.shapes.iter().enumerate() {
        if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            violation(&format!("shape[{i}].name"), "must be non-empty and use only [A-Za-z0-9_-]");
        }
        if !names.insert(s.name.clone()) {
            violation(&format!("shape[{i}].name"), "duplicate shape name");
        }
        for v in s.shape().violations(test_mode) {
            violation(&format!("shape[{i}].{}", v.field), &v.rule);
        }
    }
    match &raw.basis {
        None => violation("basis", "required section"),
        Some(b) => {
            if b.n_max_x * b.n_max_y < MIN_DIMENSION {
                violation("basis.n_max_x", &format!("n_max_x * n_max_y must be at least {MIN_DIMENSION}"));
            }
            if !(b.keep_fraction > 0.0 && b.keep_fraction <= 1.0) {
                violation("basis.keep_fraction", "must lie in (0, 1]");
            }
            if let Some(v) = b.step_height {
                if !(v > 0.0 && v.is_finite()) {
                    violation("basis.step_height", "must be positive");
                }
            }
            if !(b.step_factor > 0.0) {
                violation("basis.step_factor", "must be positive");
            }
            if b.target_levels == 0 {
                violation("basis.target_levels", "must be positive");
            }
            if !(b.inflation > 1.0) {
                violation("basis.inflation", "must exceed 1");
            }
        }
    }
    match &raw.perturb {
        None => violation("perturb", "required section"),
        Some(p) => {
            if let Err(e) = p.params().validate() {
                violation("perturb", &e.to_string());
            }
            if p.delta_o_window == 0 {
                violation("perturb.delta_o_window", "must be positive");
            }
            if p.check_levels < 2 {
                violation("perturb.check_levels", "must be at least 2");
            }
            if !(p.check_tau_factor > 0.0) {
                violation("perturb.check_tau_factor", "must be positive");
            }
        }
    }
    if raw.stats.unfold_window == 0 {
        violation("stats.unfold_window", "must be positive");
    }
    if raw.stats.histogram_bins == 0 {
        violation("stats.histogram_bins", "must be positive");
    }
    if raw.classical.trajectories == 0 {
        violation("classical.trajectories", "must be positive");
    }
    if raw.classical.n_collisions < 1000 {
        violation("classical.n_collisions", "must be at least 1000");
    }
    if raw.classical.lyapunov_collisions < 1000 {
        violation("classical.lyapunov_collisions", "must be at least 1000");
    }
    if raw.jobs == Some(0) {
        violation("jobs", "must be positive");
    }
    if !bad.is_empty() {
        return Err(ConfigError::Invalid(bad));
    }
    Ok(RunConfig {
        seed: seed.unwrap(),
        output_dir: output_dir.unwrap(),
        test_mode,
        cache_dir: raw.cache_dir,
        jobs: raw.jobs.unwrap_or(1),
        dump_trajectories: overrides.dump_trajectories || raw.dump_trajectories,
        shapes: raw.shapes,
        basis: raw.basis.unwrap(),
        perturb: raw.perturb.unwrap(),
        stats: raw.stats,
        classical: raw.classical,
    })
}

/// Re-serialises a validated config (used for the manifest echo).
pub fn to_toml(config: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Echo<'a> {
        seed: u64,
        output_dir: &'a Path,
        test_mode: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        cache_dir: Option<&'a Path>,
        jobs: usize,
        dump_trajectories: bool,
        basis: &'a BasisConfig,
        perturb: &'a PerturbConfig,
        stats: &'a StatsConfig,
        classical: &'a ClassicalConfig,
        shape: &'a [ShapeRecord],
    }
    toml::to_string(&Echo {
        seed: config.seed,
        output_dir: &config.output_dir,
        test_mode: config.test_mode,
        cache_dir: config.cache_dir.as_deref(),
        jobs: config.jobs,
        dump_trajectories: config.dump_trajectories,
        basis: &config.basis,
        perturb: &config.perturb,
        stats: &config.stats,
        classical: &config.classical,
        shape: &config.shapes,
    })
    .expect("config serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn shipped_config_parses() {
        let c = parse_config(SAMPLE, &Overrides::default()).unwrap();
        assert_eq!(c.shapes.len(), 3);
        assert_eq!(c.perturb.tau, Tau::Infinite);
        let again = parse_config(&to_toml(&c), &Overrides::default()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn equal_curvatures_name_the_symmetry_rule() {
        let text = SAMPLE.replacen("curvature2 = 0.30", "curvature2 = 0.20", 1);
        let Err(ConfigError::Invalid(v)) = parse_config(&text, &Overrides::default()) else {
            panic!("expected violations");
        };
        assert!(v.iter().any(|v| v.field == "shape[0].curvature2" && v.rule.contains("symmetry")), "{v:?}");
    }

    #[test]
    fn missing_seed_is_a_violation_reported_with_the_others() {
        let text: String = SAMPLE.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
        let text = text.replacen("keep_fraction = 0.06", "keep_fraction = 1.5", 1);
        let Err(ConfigError::Invalid(v)) = parse_config(&text, &Overrides::default()) else {
            panic!("expected violations");
        };
        assert!(v.iter().any(|v| v.field == "seed"));
        assert!(v.iter().any(|v| v.field == "basis.keep_fraction"));
        let ok = parse_config(&text.replacen("keep_fraction = 1.5", "keep_fraction = 0.06", 1), &Overrides {
            seed: Some(5),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ok.seed, 5);
    }

    #[test]
    fn zero_curvature_needs_test_mode() {
        let text = SAMPLE.replacen("curvature1 = 0.20", "curvature1 = 0.0", 1);
        assert!(matches!(parse_config(&text, &Overrides::default()), Err(ConfigError::Invalid(_))));
        let text = text.replacen("curvature2 = 0.30", "curvature2 = 0.0", 1);
        let ok = parse_config(&text, &Overrides { test_mode: true, ..Default::default() }).unwrap();
        assert!(ok.test_mode);
    }

    #[test]
    fn syntax_errors_are_parse_errors() {
        assert!(matches!(parse_config("seed = [", &Overrides::default()), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_config("sed = 3", &Overrides::default()), Err(ConfigError::Parse(_))));
    }
}
