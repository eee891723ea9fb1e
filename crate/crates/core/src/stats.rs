//! Nearest-neighbour spacing statistics: unfolding, reference laws, KS
//! distances, histograms, ensemble pooling, the 2x2 GOE sampler and the
//! Weyl staircase check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Allowed deviation of an unfolded sample mean from 1.
pub const MEAN_TOLERANCE: f64 = 0.02;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("energies are not strictly increasing at index {0}")]
    NonMonotone(usize),
    #[error("need at least {need} levels, got {got}")]
    TooFewLevels { need: usize, got: usize },
    #[error("spacing argument must be non-negative, got {0}")]
    NegativeArgument(f64),
    #[error("sample is empty")]
    EmptySample,
    #[error("sample `{source_id}` has mean spacing {mean}, outside 1 +/- {MEAN_TOLERANCE}")]
    InvariantViolation { source_id: String, mean: f64 },
}

/// Where a block of spacings came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub id: String,
    /// Level index range `[first, last)` of the spacings' lower levels.
    pub first_level: usize,
    pub last_level: usize,
    pub count: usize,
}

/// Unfolded spacings (mean close to 1) with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingSample {
    pub spacings: Vec<f64>,
    pub sources: Vec<SampleSource>,
}

impl SpacingSample {
    pub fn new(id: impl Into<String>, spacings: Vec<f64>) -> Self {
        let count = spacings.len();
        Self {
            spacings,
            sources: vec![SampleSource { id: id.into(), first_level: 0, last_level: count, count }],
        }
    }

    pub fn len(&self) -> usize {
        self.spacings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spacings.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.spacings.iter().sum::<f64>() / self.spacings.len() as f64
    }

    /// Fraction of spacings strictly below `s`.
    pub fn fraction_below(&self, s: f64) -> f64 {
        self.spacings.iter().filter(|&&x| x < s).count() as f64 / self.spacings.len() as f64
    }

    fn source_label(&self) -> String {
        self.sources.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// Local-window unfolding: `S_i = (E_{i+1} - E_i) / D_i`, where `D_i` is the
/// mean raw spacing over the `2w + 1` spacings centred on `i`. Spacings with
/// fewer than `w` neighbours on either side are dropped.
pub fn unfold(energies: &[f64], half_width: usize, source_id: &str) -> Result<SpacingSample, StatsError> {
    let need = 2 * half_width + 2;
    if energies.len() < need {
        return Err(StatsError::TooFewLevels { need, got: energies.len() });
    }
    if let Some(i) = energies.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(StatsError::NonMonotone(i + 1));
    }
    let raw: Vec<f64> = energies.windows(2).map(|w| w[1] - w[0]).collect();
    let window = 2 * half_width + 1;
    let first = half_width;
    let last = raw.len() - half_width;
    let mut running: f64 = raw[..window].iter().sum();
    let mut spacings = Vec::with_capacity(last - first);
    for i in first..last {
        if i > first {
            running += raw[i + half_width] - raw[i - half_width - 1];
        }
        let local = running / window as f64;
        spacings.push(raw[i] / local);
    }
    Ok(SpacingSample {
        sources: vec![SampleSource {
            id: source_id.to_string(),
            first_level: first,
            last_level: last,
            count: spacings.len(),
        }],
        spacings,
    })
}

pub fn poisson_pdf(s: f64) -> Result<f64, StatsError> {
    check_arg(s)?;
    Ok((-s).exp())
}

pub fn wigner_pdf(s: f64) -> Result<f64, StatsError> {
    check_arg(s)?;
    Ok(0.5 * PI * s * (-0.25 * PI * s * s).exp())
}

fn check_arg(s: f64) -> Result<(), StatsError> {
    if s < 0.0 || s.is_nan() {
        Err(StatsError::NegativeArgument(s))
    } else {
        Ok(())
    }
}

/// Reference spacing laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacingModel {
    Poisson,
    Wigner,
}

impl SpacingModel {
    pub fn pdf(self, s: f64) -> f64 {
        match self {
            SpacingModel::Poisson => (-s).exp(),
            SpacingModel::Wigner => 0.5 * PI * s * (-0.25 * PI * s * s).exp(),
        }
    }

    pub fn cdf(self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            SpacingModel::Poisson => -(-s).exp_m1(),
            SpacingModel::Wigner => -(-0.25 * PI * s * s).exp_m1(),
        }
    }

    /// Inverse CDF, `u` in `[0, 1)`.
    pub fn quantile(self, u: f64) -> f64 {
        match self {
            SpacingModel::Poisson => -(-u).ln_1p(),
            SpacingModel::Wigner => (-4.0 * (-u).ln_1p() / PI).sqrt(),
        }
    }
}

/// Sup-norm distance between the sample's empirical CDF and the model CDF.
pub fn ks_distance(sample: &SpacingSample, model: SpacingModel) -> Result<f64, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut xs = sample.spacings.clone();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = model.cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// Spacing of the 2x2 real symmetric matrix `[[a, b], [b, c]]`.
pub fn spacing_2x2(a: f64, b: f64, c: f64) -> f64 {
    ((a - c).powi(2) + 4.0 * b * b).sqrt()
}

/// Monte Carlo 2x2 GOE spacings: diagonal entries N(0, 1), off-diagonal
/// N(0, 1/2), normalised by the sample mean.
pub fn goe2x2_sample(seed: u64, count: usize) -> SpacingSample {
    assert!(count >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = Normal::new(0.0, 1.0).expect("valid normal");
    let off = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let mut spacings: Vec<f64> = (0..count)
        .map(|_| {
            let a = diag.sample(&mut rng);
            let c = diag.sample(&mut rng);
            let b = off.sample(&mut rng);
            spacing_2x2(a, b, c)
        })
        .collect();
    let mean = spacings.iter().sum::<f64>() / count as f64;
    spacings.iter_mut().for_each(|s| *s /= mean);
    SpacingSample::new(format!("goe2x2-seed{seed}"), spacings)
}

/// Concatenate already-unfolded samples. Inputs whose mean is not within
/// `MEAN_TOLERANCE` of 1 are rejected.
pub fn pool(samples: &[SpacingSample]) -> Result<SpacingSample, StatsError> {
    let mut out = SpacingSample { spacings: Vec::new(), sources: Vec::new() };
    for s in samples {
        if s.is_empty() {
            return Err(StatsError::EmptySample);
        }
        let mean = s.mean();
        if (mean - 1.0).abs() > MEAN_TOLERANCE {
            return Err(StatsError::InvariantViolation { source_id: s.source_label(), mean });
        }
        out.spacings.extend_from_slice(&s.spacings);
        out.sources.extend(s.sources.iter().cloned());
    }
    if out.is_empty() {
        return Err(StatsError::EmptySample);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Density per bin, normalised over the in-range spacings.
    pub densities: Vec<f64>,
    pub counts: Vec<usize>,
    /// Spacings at or beyond the last edge.
    pub overflow: usize,
}

impl Histogram {
    pub fn new(sample: &SpacingSample, bins: usize, upper: f64) -> Self {
        let width = upper / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|k| k as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        let mut overflow = 0;
        for &s in &sample.spacings {
            let k = (s / width).floor();
            if k >= 0.0 && (k as usize) < bins {
                counts[k as usize] += 1;
            } else {
                overflow += 1;
            }
        }
        let inside: usize = counts.iter().sum();
        let densities = counts
            .iter()
            .map(|&c| if inside > 0 { c as f64 / (inside as f64 * width) } else { 0.0 })
            .collect();
        Self { edges, densities, counts, overflow }
    }

    pub fn integral(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    /// Pearson chi-square of the binned counts against `model`, expected
    /// counts from exact CDF differences (bins with expectation < 5 merged
    /// into their right neighbour, overflow as the last cell).
    pub fn chi_square(&self, model: SpacingModel) -> f64 {
        let n = (self.counts.iter().sum::<usize>() + self.overflow) as f64;
        let mut cells: Vec<(f64, f64)> = Vec::new();
        let (mut obs, mut exp) = (0.0, 0.0);
        for (k, &c) in self.counts.iter().enumerate() {
            obs += c as f64;
            exp += n * (model.cdf(self.edges[k + 1]) - model.cdf(self.edges[k]));
            if exp >= 5.0 {
                cells.push((obs, exp));
                obs = 0.0;
                exp = 0.0;
            }
        }
        obs += self.overflow as f64;
        exp += n * (1.0 - model.cdf(*self.edges.last().unwrap_or(&0.0)));
        if exp > 0.0 {
            cells.push((obs, exp));
        }
        cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum()
    }
}

/// Summary of one (pooled) spacing sample against both reference laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub ks_poisson: f64,
    pub ks_wigner: f64,
    pub chi2_poisson: f64,
    pub chi2_wigner: f64,
    pub sample_size: usize,
    pub mean_spacing: f64,
    /// Fraction of spacings below 0.1 (level-repulsion marker).
    pub small_spacing_fraction: f64,
    pub histogram: Histogram,
}

/// Report histogram range: `[0, 4]`.
pub const HISTOGRAM_UPPER: f64 = 4.0;

impl FitReport {
    pub fn new(sample: &SpacingSample, bins: usize) -> Result<Self, StatsError> {
        let histogram = Histogram::new(sample, bins, HISTOGRAM_UPPER);
        Ok(Self {
            ks_poisson: ks_distance(sample, SpacingModel::Poisson)?,
            ks_wigner: ks_distance(sample, SpacingModel::Wigner)?,
            chi2_poisson: histogram.chi_square(SpacingModel::Poisson),
            chi2_wigner: histogram.chi_square(SpacingModel::Wigner),
            sample_size: sample.len(),
            mean_spacing: sample.mean(),
            small_spacing_fraction: sample.fraction_below(0.1),
            histogram,
        })
    }
}

/// Least-squares slope of the counting staircase `N(E_k) = k + 1/2` over
/// the upper half of `energies`.
pub fn staircase_slope(energies: &[f64]) -> Result<f64, StatsError> {
    if energies.len() < 4 {
        return Err(StatsError::TooFewLevels { need: 4, got: energies.len() });
    }
    let start = energies.len() / 2;
    let pts: Vec<(f64, f64)> = energies[start..]
        .iter()
        .enumerate()
        .map(|(k, &e)| (e, (start + k) as f64 + 0.5))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Leading Weyl density for `H = p^2` in two dimensions: `area / (4 pi)`.
pub fn weyl_density(area: f64) -> f64 {
    area / (4.0 * PI)
}

/// Relative error of the fitted staircase slope against `area / (4 pi)`.
/// Requires at least 200 levels.
pub fn weyl_relative_error(energies: &[f64], area: f64) -> Result<f64, StatsError> {
    if energies.len() < 200 {
        return Err(StatsError::TooFewLevels { need: 200, got: energies.len() });
    }
    let slope = staircase_slope(energies)?;
    let expected = weyl_density(area);
    Ok((slope - expected) / expected)
}
