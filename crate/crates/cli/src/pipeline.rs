//! End-to-end experiment: classical checks, H0 spectra with stability
//! certification, the infinite-tau perturbation and pooled spacing statistics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qbilliard_core::classical::{self, ClassicalError, TrajectoryState};
use qbilliard_core::perturb::{
    self, EpsilonChoice, EpsilonRule, OperatorMatrix, PerturbError, Tau, TauConsistency,
};
use qbilliard_core::quantum::{self, BasisSpec, QuantumError, Spectrum};
use qbilliard_core::stats::{self, FitReport, SpacingSample, StatsError};
use qbilliard_core::BilliardShape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::SpectrumCache;
use crate::config::{ClassicalConfig, RunConfig, ShapeRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cache: {0}")]
    Cache(String),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("all {0} shapes failed; see the manifest for details")]
    AllShapesFailed(usize),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSummary {
    pub lyapunov_per_collision: f64,
    pub lyapunov_per_time: f64,
    pub lyapunov_converged: bool,
    pub lyapunov_trace: Vec<f64>,
    pub lyapunov_collisions: u64,
    /// Time averages of `p_x^2 / p^2`, one per random start.
    pub o_averages: Vec<f64>,
    /// `max - min` of `o_averages`.
    pub o_spread: f64,
    pub o_collisions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumSummary {
    pub basis: BasisSpec,
    pub dimension: usize,
    pub inflation: f64,
    pub kept_levels: usize,
    pub stable_levels: usize,
    pub highest_stable_energy: f64,
    pub max_stable_drift: f64,
    pub weyl_slope: f64,
    pub weyl_expected: f64,
    pub weyl_relative_error: f64,
    pub warnings: Vec<String>,
    pub spacings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub epsilon_rule: EpsilonRule,
    pub tau: Tau,
    pub choice: EpsilonChoice,
    /// Mean windowed fluctuation scale over the lower and upper halves of
    /// the certified levels.
    pub delta_o_lower: f64,
    pub delta_o_upper: f64,
    pub delta_o_half_ratio: f64,
    pub operator_asymmetry: f64,
    pub tau_check: Option<TauConsistency>,
    pub perturbed_levels: usize,
    pub spacings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ShapeStatus {
    Completed,
    Failed { stage: String, error: String },
}

/// Run-specific facts that legitimately differ between reruns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_hit: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: BilliardShape,
    pub status: ShapeStatus,
    /// Paths relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub classical: Option<ClassicalSummary>,
    pub quantum: Option<QuantumSummary>,
    pub perturbation: Option<PerturbationSummary>,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReport {
    pub shapes: Vec<String>,
    pub h0: FitReport,
    pub h_eps: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub shapes: Vec<ShapeEntry>,
    pub pooled: Option<PooledReport>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub execution: Execution,
}

impl RunManifest {
    pub fn shape(&self, name: &str) -> Option<&ShapeEntry> {
        self.shapes.iter().find(|s| s.name == name)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Independent RNG stream per shape so results do not depend on scheduling.
fn shape_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Lyapunov exponent from one random start and ergodic `O` averages from
/// `trajectories` further starts. Also returns the collision states of each
/// average run's first `dump` collisions when `dump > 0`.
pub fn classical_stage(
    shape: &BilliardShape,
    cfg: &ClassicalConfig,
    rng: &mut ChaCha8Rng,
    dump: u64,
) -> Result<(ClassicalSummary, Vec<Vec<TrajectoryState>>), ClassicalError> {
    let start = TrajectoryState::random(shape, 1.0, rng);
    let lyap = classical::lyapunov(shape, &start, cfg.lyapunov_collisions)?;
    let mut averages = Vec::with_capacity(cfg.trajectories);
    let mut dumps = Vec::new();
    for _ in 0..cfg.trajectories {
        let start = TrajectoryState::random(shape, 1.0, rng);
        averages.push(classical::time_average_o(shape, &start, cfg.n_collisions)?);
        if dump > 0 {
            dumps.push(classical::evolve(shape, &start, dump)?);
        }
    }
    let lo = averages.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = averages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        ClassicalSummary {
            lyapunov_per_collision: lyap.per_collision_exponent,
            lyapunov_per_time: lyap.exponent,
            lyapunov_converged: lyap.is_converged(),
            lyapunov_trace: lyap.convergence_trace,
            lyapunov_collisions: cfg.lyapunov_collisions,
            o_averages: averages,
            o_spread: hi - lo,
            o_collisions: cfg.n_collisions,
        },
        dumps,
    ))
}

/// Outputs of one shape needed for pooling.
struct ShapeSamples {
    h0: SpacingSample,
    h_eps: SpacingSample,
}

struct ShapeRun<'a> {
    config: &'a RunConfig,
    record: &'a ShapeRecord,
    index: usize,
    dir: PathBuf,
    rel: PathBuf,
    entry: ShapeEntry,
}

impl ShapeRun<'_> {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, RunError>) -> Result<T, (String, RunError)> {
        let t0 = Instant::now();
        log::info!("[{}] {stage}", self.record.name);
        let out = f(self);
        self.entry.execution.timings.insert(stage.to_string(), t0.elapsed().as_secs_f64());
        out.map_err(|e| (stage.to_string(), e))
    }

    fn artifact(&mut self, key: &str, file: &str) -> PathBuf {
        self.entry.artifacts.insert(key.to_string(), self.rel.join(file));
        self.dir.join(file)
    }

    fn run(&mut self, cache: &SpectrumCache) -> Result<ShapeSamples, (String, RunError)> {
        let shape = self.record.shape();
        let cfg = self.config;

        self.timed("classical", |run| {
            let mut rng = shape_rng(cfg.seed, run.index);
            let dump = if cfg.dump_trajectories { cfg.classical.dump_collisions } else { 0 };
            let (summary, dumps) = classical_stage(&shape, &cfg.classical, &mut rng, dump)?;
            let path = run.artifact("classical", "classical.json");
            write_json(&path, &summary)?;
            for (k, states) in dumps.iter().enumerate() {
                let path = run.artifact(&format!("trajectory_{k}"), &format!("trajectory_{k}.txt"));
                write_with(&path, |w| classical::write_trajectory_table(w, states))?;
            }
            run.entry.classical = Some(summary);
            Ok(())
        })?;

        let basis = cfg.basis.spec_for(&shape);
        let spectrum = self.timed("spectrum", |run| {
            let (spectrum, hit) = cache.stability_check(&shape, &basis, cfg.basis.inflation)?;
            run.entry.execution.cache_hit = Some(hit);
            let path = run.artifact("spectrum", "spectrum.txt");
            let meta: Vec<(String, String)> = spectrum.warnings.iter().map(|w| ("warning".to_string(), w.clone())).collect();
            write_with(&path, |w| quantum::write_spectrum(w, &spectrum, &meta))?;
            Ok(spectrum)
        })?;
        let stable = spectrum.stable_energies().len();

        let h0 = self.timed("h0_statistics", |run| {
            let levels = spectrum.stable_energies();
            let weyl_error = stats::weyl_relative_error(levels, shape.area())?;
            let sample = stats::unfold(levels, cfg.stats.unfold_window, &run.record.name)?;
            let drift = spectrum.drift.as_ref().map_or(f64::NAN, |d| d[..stable].iter().copied().fold(0.0, f64::max));
            run.entry.quantum = Some(QuantumSummary {
                basis,
                dimension: basis.dimension(),
                inflation: cfg.basis.inflation,
                kept_levels: spectrum.len(),
                stable_levels: stable,
                highest_stable_energy: levels.last().copied().unwrap_or(f64::NAN),
                max_stable_drift: drift,
                weyl_slope: stats::staircase_slope(levels)?,
                weyl_expected: stats::weyl_density(shape.area()),
                weyl_relative_error: weyl_error,
                warnings: spectrum.warnings.clone(),
                spacings: sample.len(),
            });
            Ok(sample)
        })?;

        let h_eps = self.timed("perturbation", |run| {
            let (summary, sample) = run.perturbation(&spectrum, 0..stable)?;
            run.entry.perturbation = Some(summary);
            Ok(sample)
        })?;
        Ok(ShapeSamples { h0, h_eps })
    }

    fn perturbation(&mut self, spectrum: &Spectrum, window: Range<usize>) -> Result<(PerturbationSummary, SpacingSample), RunError> {
        let cfg = &self.config.perturb;
        let levels = spectrum.stable_energies();
        let o = perturb::operator_matrix(spectrum, &self.record.name)?;
        let path = self.artifact("o_diagonal", "o_diagonal.csv");
        write_with(&path, |w| {
            writeln!(w, "index,energy,o_nn")?;
            for (k, e) in levels.iter().enumerate() {
                writeln!(w, "{k},{e},{}", o.diagonal[k])?;
            }
            Ok(())
        })?;

        let n = cfg.delta_o_window;
        let mut choice = perturb::choose_epsilon(levels, window.clone())?;
        if cfg.epsilon_rule == EpsilonRule::Explicit {
            choice.epsilon = cfg.epsilon;
        }
        let choice = choice.with_delta_o(perturb::centred_delta_o(&o.diagonal, window.clone(), n)?);
        let mid = window.start + window.len() / 2;
        let lower = perturb::windowed_delta_o(&o.diagonal, window.start..mid, n)?;
        let upper = perturb::windowed_delta_o(&o.diagonal, mid..window.end, n)?;

        let tau_check = self.tau_check(spectrum, &o, &choice, window.clone())?;

        let perturbed = perturb::build_h_eps(spectrum, &o, choice.epsilon)?;
        let record = perturbed.to_spectrum(spectrum);
        let meta = perturbed_meta(cfg.epsilon_rule, cfg.tau, &choice);
        let path = self.artifact("perturbed_spectrum", "perturbed_spectrum.txt");
        write_with(&path, |w| quantum::write_spectrum(w, &record, &meta))?;
        let sample = stats::unfold(&perturbed.energies, self.config.stats.unfold_window, &self.record.name)?;

        Ok((
            PerturbationSummary {
                epsilon_rule: cfg.epsilon_rule,
                tau: cfg.tau,
                choice,
                delta_o_lower: lower,
                delta_o_upper: upper,
                delta_o_half_ratio: lower.max(upper) / lower.min(upper),
                operator_asymmetry: o.max_asymmetry(),
                tau_check: Some(tau_check),
                perturbed_levels: perturbed.energies.len(),
                spacings: sample.len(),
            },
            sample,
        ))
    }

    /// Finite-tau oracle on a centred window: a configured finite tau is
    /// used as given, otherwise `check_tau_factor / Delta`.
    fn tau_check(
        &self,
        spectrum: &Spectrum,
        o: &OperatorMatrix,
        choice: &EpsilonChoice,
        window: Range<usize>,
    ) -> Result<TauConsistency, RunError> {
        let cfg = &self.config.perturb;
        let len = cfg.check_levels.min(window.len());
        let start = window.start + (window.len() - len) / 2;
        let tau = match cfg.tau {
            Tau::Finite(t) => t,
            Tau::Infinite => cfg.check_tau_factor / choice.mean_spacing,
        };
        Ok(perturb::tau_consistency(spectrum, o, choice.epsilon, tau, start..start + len, choice.mean_spacing)?)
    }
}

/// Header lines of a perturbed spectrum table.
pub fn perturbed_meta(rule: EpsilonRule, tau: Tau, choice: &EpsilonChoice) -> Vec<(String, String)> {
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
    vec![
        ("epsilon".into(), choice.epsilon.to_string()),
        ("tau".into(), tau.to_string()),
        ("epsilon_rule".into(), rule.to_string()),
        ("mean_energy".into(), choice.mean_energy.to_string()),
        ("mean_spacing".into(), choice.mean_spacing.to_string()),
        ("delta_o".into(), opt(choice.delta_o)),
        ("coupling_ratio".into(), opt(choice.coupling_ratio)),
        ("semiclassical_ratio".into(), opt(choice.semiclassical_ratio)),
    ]
}

pub(crate) fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

/// Writes `value` to a temporary sibling and renames it into place.
pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let tmp = path.with_extension("json.partial");
    write_json(&tmp, value)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_spacings_csv(path: &Path, sample: &SpacingSample) -> Result<(), RunError> {
    write_with(path, |w| {
        writeln!(w, "source,level,s")?;
        let mut offset = 0;
        for src in &sample.sources {
            for (k, s) in sample.spacings[offset..offset + src.count].iter().enumerate() {
                writeln!(w, "{},{},{s}", src.id, src.first_level + k)?;
            }
            offset += src.count;
        }
        Ok(())
    })
}

fn run_shape(config: &RunConfig, cache: &SpectrumCache, index: usize) -> (ShapeEntry, Option<ShapeSamples>) {
    let record = &config.shapes[index];
    let rel = PathBuf::from("shapes").join(&record.name);
    let dir = config.output_dir.join(&rel);
    let mut run = ShapeRun {
        config,
        record,
        index,
        dir: dir.clone(),
        rel,
        entry: ShapeEntry {
            name: record.name.clone(),
            shape: record.shape(),
            status: ShapeStatus::Completed,
            artifacts: BTreeMap::new(),
            classical: None,
            quantum: None,
            perturbation: None,
            execution: Execution::default(),
        },
    };
    let result = fs::create_dir_all(&dir)
        .map_err(|e| ("setup".to_string(), io_err(&dir)(e)))
        .and_then(|_| run.run(cache));
    match result {
        Ok(samples) => (run.entry, Some(samples)),
        Err((stage, error)) => {
            log::error!("[{}] {stage} failed: {error}", record.name);
            run.entry.status = ShapeStatus::Failed { stage, error: error.to_string() };
            (run.entry, None)
        }
    }
}

/// Runs every shape, pools the statistics, and writes the manifest last.
///
/// A failing shape is recorded in the manifest and the others continue; the
/// call errors only when no shape completes (the manifest is still written).
pub fn run_experiment(config: &RunConfig) -> Result<RunManifest, RunError> {
    let t0 = Instant::now();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cache = SpectrumCache::new(config.cache_dir())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let results: Vec<(ShapeEntry, Option<ShapeSamples>)> =
        pool.install(|| (0..config.shapes.len()).into_par_iter().map(|i| run_shape(config, &cache, i)).collect());

    let mut manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.clone(),
        shapes: Vec::new(),
        pooled: None,
        artifacts: BTreeMap::new(),
        execution: Execution::default(),
    };
    let mut h0 = Vec::new();
    let mut h_eps = Vec::new();
    let mut names = Vec::new();
    for (entry, samples) in results {
        if let Some(s) = samples {
            names.push(entry.name.clone());
            h0.push(s.h0);
            h_eps.push(s.h_eps);
        }
        manifest.shapes.push(entry);
    }

    if !names.is_empty() {
        let t = Instant::now();
        let bins = config.stats.histogram_bins;
        let pooled_h0 = stats::pool(&h0)?;
        let pooled_eps = stats::pool(&h_eps)?;
        let report = PooledReport {
            shapes: names,
            h0: FitReport::new(&pooled_h0, bins)?,
            h_eps: FitReport::new(&pooled_eps, bins)?,
        };
        for (key, file, value) in [("fit_h0", "fit_h0.json", &report.h0), ("fit_h_eps", "fit_h_eps.json", &report.h_eps)] {
            write_json(&out.join(file), value)?;
            manifest.artifacts.insert(key.into(), file.into());
        }
        for (key, file, sample) in [("spacings_h0", "spacings_h0.csv", &pooled_h0), ("spacings_h_eps", "spacings_h_eps.csv", &pooled_eps)] {
            write_spacings_csv(&out.join(file), sample)?;
            manifest.artifacts.insert(key.into(), file.into());
        }
        manifest.pooled = Some(report);
        manifest.execution.timings.insert("pooling".into(), t.elapsed().as_secs_f64());
    }
    manifest.execution.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    write_json_atomic(&out.join(MANIFEST_FILE), &manifest)?;
    if manifest.pooled.is_none() {
        return Err(RunError::AllShapesFailed(manifest.shapes.len()));
    }
    Ok(manifest)
}

/// Classical stage only, for every shape; writes `classical.json` files
/// and returns the summaries keyed by shape name.
pub fn run_classical(config: &RunConfig) -> Result<BTreeMap<String, ClassicalSummary>, RunError> {
    let mut out = BTreeMap::new();
    for (i, record) in config.shapes.iter().enumerate() {
        let dir = config.output_dir.join("shapes").join(&record.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut rng = shape_rng(config.seed, i);
        let dump = if config.dump_trajectories { config.classical.dump_collisions } else { 0 };
        let (summary, dumps) = classical_stage(&record.shape(), &config.classical, &mut rng, dump)?;
        write_json(&dir.join("classical.json"), &summary)?;
        for (k, states) in dumps.iter().enumerate() {
            write_with(&dir.join(format!("trajectory_{k}.txt")), |w| classical::write_trajectory_table(w, states))?;
        }
        out.insert(record.name.clone(), summary);
    }
    Ok(out)
}

/// Re-pools persisted spectrum tables: each file's certified levels are
/// unfolded with half-width `window` and the samples pooled.
pub fn pool_spectrum_files(paths: &[PathBuf], window: usize, bins: usize) -> Result<(SpacingSample, FitReport), RunError> {
    let mut samples = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(io_err(path))?;
        let table = quantum::read_spectrum(std::io::BufReader::new(file))?;
        let id = path.display().to_string();
        samples.push(stats::unfold(table.spectrum.stable_energies(), window, &id)?);
    }
    let pooled = stats::pool(&samples)?;
    let report = FitReport::new(&pooled, bins)?;
    Ok((pooled, report))
}
