//! The commuting perturbation: the bounded operator
//! `O = p_x^2 / (p_x^2 + p_y^2)` in the eigenbasis of `H0`, the finite-tau
//! Hamiltonian built from it, its infinite-tau limit, and the choice of the
//! coupling strength.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::quantum::{self, BasisSpec, QuantumError, Spectrum};
use crate::BilliardShape;

/// Window length used for the level-to-level fluctuation scale.
pub const DELTA_O_WINDOW: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("spectrum has no eigenvectors")]
    MissingEigenvectors,
    #[error("level {0} is degenerate with its neighbour; the infinite-tau limit needs a simple spectrum")]
    Degenerate(usize),
    #[error("window {start}..{end} exceeds the {available} available levels")]
    WindowOutOfRange { start: usize, end: usize, available: usize },
    #[error("need at least {need} levels, got {got}")]
    InsufficientLevels { need: usize, got: usize },
    #[error("invalid perturbation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonRule {
    Explicit,
    SqrtEbarDelta,
}

impl fmt::Display for EpsilonRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpsilonRule::Explicit => "explicit",
            EpsilonRule::SqrtEbarDelta => "sqrt-Ebar-Delta",
        })
    }
}

/// Averaging time of the perturbation; `Infinite` selects the commuting limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TauRepr", into = "TauRepr")]
pub enum Tau {
    Finite(f64),
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TauRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<TauRepr> for Tau {
    type Error = String;
    fn try_from(r: TauRepr) -> Result<Self, String> {
        match r {
            TauRepr::Number(t) => Ok(Tau::Finite(t)),
            TauRepr::Text(s) if s == "infinite" || s == "inf" => Ok(Tau::Infinite),
            TauRepr::Text(s) => Err(format!("tau must be a number or \"infinite\", got \"{s}\"")),
        }
    }
}

impl From<Tau> for TauRepr {
    fn from(t: Tau) -> Self {
        match t {
            Tau::Finite(v) => TauRepr::Number(v),
            Tau::Infinite => TauRepr::Text("infinite".into()),
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Finite(t) => write!(f, "{t}"),
            Tau::Infinite => f.write_str("infinite"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    /// Ignored when `epsilon_rule` is `sqrt-Ebar-Delta`.
    #[serde(default)]
    pub epsilon: f64,
    pub tau: Tau,
    pub epsilon_rule: EpsilonRule,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self { epsilon: 0.0, tau: Tau::Infinite, epsilon_rule: EpsilonRule::SqrtEbarDelta }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(PerturbError::InvalidParams(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if let Tau::Finite(t) = self.tau {
            if !(t > 0.0) {
                return Err(PerturbError::InvalidParams(format!("tau must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// `O` on the sine basis: `(n_x/W)^2 / ((n_x/W)^2 + (n_y/H)^2)` per state.
pub fn sine_basis_operator(shape: &BilliardShape, basis: &BasisSpec) -> Vec<f64> {
    (0..basis.dimension())
        .map(|i| {
            let (nx, ny) = basis.modes(i);
            let kx = nx as f64 / shape.width;
            let ky = ny as f64 / shape.height;
            kx * kx / (kx * kx + ky * ky)
        })
        .collect()
}

/// `<n|O|m>` over the kept levels of one spectrum.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub elements: Mat<f64>,
    pub diagonal: Vec<f64>,
    /// Label of the spectrum the elements belong to.
    pub spectrum_id: String,
}

impl OperatorMatrix {
    pub fn len(&self) -> usize {
        self.diagonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagonal.is_empty()
    }

    pub fn max_asymmetry(&self) -> f64 {
        quantum::asymmetry(self.elements.as_ref())
    }

    /// Smallest and largest eigenvalue of the truncated matrix.
    pub fn eigenvalue_range(&self) -> Result<(f64, f64), PerturbError> {
        if self.is_empty() {
            return Ok((0.0, 0.0));
        }
        let ev = self
            .elements
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| QuantumError::EigensolverFailure(format!("{e:?}")))?;
        Ok((ev[0], ev[ev.len() - 1]))
    }
}

/// Rotates the diagonal sine-basis `O` into the spectrum's eigenbasis:
/// `O_nm = sum_i D_i V_in V_im`.
pub fn operator_matrix(spectrum: &Spectrum, spectrum_id: impl Into<String>) -> Result<OperatorMatrix, PerturbError> {
    let v = spectrum.eigenvectors.as_ref().ok_or(PerturbError::MissingEigenvectors)?;
    let d = sine_basis_operator(&spectrum.shape, &spectrum.basis);
    let scaled = Mat::from_fn(v.nrows(), v.ncols(), |i, k| d[i] * v[(i, k)]);
    let mut elements = v.transpose() * &scaled;
    // Exact symmetry; the product is symmetric up to rounding.
    let n = elements.ncols();
    for j in 0..n {
        for i in j + 1..n {
            let m = 0.5 * (elements[(i, j)] + elements[(j, i)]);
            elements[(i, j)] = m;
            elements[(j, i)] = m;
        }
    }
    let diagonal = (0..n).map(|k| elements[(k, k)]).collect();
    Ok(OperatorMatrix { elements, diagonal, spectrum_id: spectrum_id.into() })
}

/// `sin(x) / x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn check_window(window: &Range<usize>, available: usize) -> Result<(), PerturbError> {
    if window.start >= window.end || window.end > available {
        return Err(PerturbError::WindowOutOfRange { start: window.start, end: window.end, available });
    }
    Ok(())
}

/// `H(eps, tau)_nm = E_n delta_nm + eps sinc((E_n - E_m) tau) O_nm` over
/// the levels in `window` (restricted to the certified prefix).
pub fn build_h_eps_tau(
    spectrum: &Spectrum,
    o: &OperatorMatrix,
    epsilon: f64,
    tau: f64,
    window: Range<usize>,
) -> Result<Mat<f64>, PerturbError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PerturbError::InvalidParams(format!("tau must be finite and > 0, got {tau}")));
    }
    let available = spectrum.stable_energies().len().min(o.len());
    check_window(&window, available)?;
    let e = &spectrum.energies;
    let start = window.start;
    let n = window.len();
    Ok(Mat::from_fn(n, n, |i, j| {
        let (a, b) = (start + i, start + j);
        let coupling = epsilon * o.elements[(a, b)];
        if a == b {
            e[a] + coupling
        } else {
            coupling * sinc((e[a] - e[b]) * tau)
        }
    }))
}

/// Spectrum of the infinite-tau Hamiltonian, which commutes with `H0`.
#[derive(Debug, Clone)]
pub struct PerturbedSpectrum {
    /// `E_n + eps <n|O|n>`, ascending, complete below `complete_below`.
    pub energies: Vec<f64>,
    /// H0 level index of each entry of `energies`.
    pub source_levels: Vec<usize>,
    /// The unperturbed eigenvectors (same allocation); column
    /// `source_levels[k]` is the eigenstate of `energies[k]`.
    pub eigenvectors: Option<Arc<Mat<f64>>>,
    pub epsilon: f64,
    pub complete_below: f64,
}

/// Shifts each certified level by `eps <n|O|n>` and re-sorts.
///
/// Shifts are non-negative, so levels from outside the certified window can
/// only land above its first excluded level; entries at or above that level
/// are dropped to keep the output complete.
pub fn build_h_eps(spectrum: &Spectrum, o: &OperatorMatrix, epsilon: f64) -> Result<PerturbedSpectrum, PerturbError> {
    if !(epsilon >= 0.0) {
        return Err(PerturbError::InvalidParams(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let k = spectrum.stable_energies().len().min(o.len());
    if let Some(&d) = spectrum.degeneracies.iter().find(|&&d| d + 1 < k) {
        return Err(PerturbError::Degenerate(d));
    }
    let e = &spectrum.energies;
    let complete_below = if k < e.len() {
        e[k]
    } else if epsilon == 0.0 {
        f64::INFINITY
    } else {
        e[k - 1]
    };
    let mut shifted: Vec<(f64, usize)> = (0..k)
        .map(|n| (e[n] + epsilon * o.diagonal[n], n))
        .filter(|&(v, _)| v < complete_below)
        .collect();
    shifted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(PerturbedSpectrum {
        energies: shifted.iter().map(|s| s.0).collect(),
        source_levels: shifted.iter().map(|s| s.1).collect(),
        eigenvectors: spectrum.eigenvectors.clone(),
        epsilon,
        complete_below,
    })
}

impl PerturbedSpectrum {
    /// A plain spectrum record for persistence (no eigenvectors).
    pub fn to_spectrum(&self, base: &Spectrum) -> Spectrum {
        Spectrum {
            energies: self.energies.clone(),
            eigenvectors: None,
            shape: base.shape,
            basis: base.basis,
            stable_count: Some(self.energies.len()),
            drift: None,
            degeneracies: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

/// RMS of the `n` successive differences of `diagonal` starting at `start`.
pub fn delta_o(diagonal: &[f64], start: usize, n: usize) -> Result<f64, PerturbError> {
    if n == 0 || start + n + 1 > diagonal.len() {
        return Err(PerturbError::WindowOutOfRange { start, end: start + n + 1, available: diagonal.len() });
    }
    let sum: f64 = (start..start + n).map(|k| (diagonal[k + 1] - diagonal[k]).powi(2)).sum();
    Ok((sum / n as f64).sqrt())
}

/// `delta_o` centred in `range`, with the window clipped to fit.
pub fn centred_delta_o(diagonal: &[f64], range: Range<usize>, n: usize) -> Result<f64, PerturbError> {
    let len = range.len();
    if len < n + 1 {
        return Err(PerturbError::InsufficientLevels { need: n + 1, got: len });
    }
    let start = range.start + (len - n - 1) / 2;
    delta_o(diagonal, start, n)
}

/// Mean of `delta_o` over consecutive non-overlapping windows of `n`
/// differences inside `range`.
pub fn windowed_delta_o(diagonal: &[f64], range: Range<usize>, n: usize) -> Result<f64, PerturbError> {
    let windows = range.len().saturating_sub(1) / n;
    if windows == 0 {
        return Err(PerturbError::InsufficientLevels { need: n + 1, got: range.len() });
    }
    let mut sum = 0.0;
    for w in 0..windows {
        sum += delta_o(diagonal, range.start + w * n, n)?;
    }
    Ok(sum / windows as f64)
}

/// Coupling strength and the semiclassical sandwich diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonChoice {
    pub epsilon: f64,
    pub mean_energy: f64,
    pub mean_spacing: f64,
    pub delta_o: Option<f64>,
    /// `eps delta_O / Delta`; should be large.
    pub coupling_ratio: Option<f64>,
    /// `Ebar / (eps delta_O)`; should be large.
    pub semiclassical_ratio: Option<f64>,
}

impl EpsilonChoice {
    pub fn with_delta_o(mut self, delta_o: f64) -> Self {
        let shift = self.epsilon * delta_o;
        self.delta_o = Some(delta_o);
        self.coupling_ratio = Some(shift / self.mean_spacing);
        self.semiclassical_ratio = Some(self.mean_energy / shift);
        self
    }
}

/// `eps = sqrt(Ebar Delta)` over the levels in `window` (at least 100).
pub fn choose_epsilon(energies: &[f64], window: Range<usize>) -> Result<EpsilonChoice, PerturbError> {
    check_window(&window, energies.len())?;
    if window.len() < 100 {
        return Err(PerturbError::InsufficientLevels { need: 100, got: window.len() });
    }
    let e = &energies[window];
    let mean_energy = e.iter().sum::<f64>() / e.len() as f64;
    let mean_spacing = (e[e.len() - 1] - e[0]) / (e.len() - 1) as f64;
    Ok(EpsilonChoice {
        epsilon: (mean_energy * mean_spacing).sqrt(),
        mean_energy,
        mean_spacing,
        delta_o: None,
        coupling_ratio: None,
        semiclassical_ratio: None,
    })
}

/// Result of comparing the finite-tau eigenvalues with the shifted levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauConsistency {
    pub window_start: usize,
    pub window_len: usize,
    pub tau: f64,
    /// Largest per-level deviation in units of the mean spacing.
    pub max_deviation: f64,
}

/// Eigensolves `H(eps, tau)` on `window` and compares its sorted levels with
/// the sorted `E_n + eps O_nn` of the same levels.
pub fn tau_consistency(
    spectrum: &Spectrum,
    o: &OperatorMatrix,
    epsilon: f64,
    tau: f64,
    window: Range<usize>,
    mean_spacing: f64,
) -> Result<TauConsistency, PerturbError> {
    let h = build_h_eps_tau(spectrum, o, epsilon, tau, window.clone())?;
    let finite = quantum::eigensolve(h.as_ref())?.values;
    let mut limit: Vec<f64> = window.clone().map(|n| spectrum.energies[n] + epsilon * o.diagonal[n]).collect();
    limit.sort_by(f64::total_cmp);
    let max_deviation = finite.iter().zip(&limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / mean_spacing;
    Ok(TauConsistency { window_start: window.start, window_len: window.len(), tau, max_deviation })
}

/// Frobenius-free helper for tests and diagnostics: largest `|A_ij - B_ij|`.
pub fn max_abs_difference(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{solve_spectrum, BasisSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    /// About 240 kept levels of the default shape, solved once.
    fn small_spectrum() -> Spectrum {
        static CELL: std::sync::OnceLock<Spectrum> = std::sync::OnceLock::new();
        CELL.get_or_init(|| {
            let basis = BasisSpec { n_max_x: 50, n_max_y: 56, step_height: 3e4, keep_fraction: 0.25 };
            solve_spectrum(&BilliardShape::default_chaotic(), &basis, true).unwrap()
        })
        .clone()
    }

    #[test]
    fn sine_basis_entries() {
        let square = BilliardShape::rectangle(1.0, 1.0);
        let basis = BasisSpec { n_max_x: 20, n_max_y: 20, step_height: 1.0, keep_fraction: 1.0 };
        let d = sine_basis_operator(&square, &basis);
        for n in 0..20 {
            assert_eq!(d[n * 20 + n], 0.5);
        }
        assert_relative_eq!(d[2 * 20 + 3], 0.36, epsilon = 1e-15);
    }

    /// The (3, 4) state is an eigenfunction of both `-d^2/dx^2` and
    /// `-d^2/dy^2`; the quotient of the two actions, measured with central
    /// differences, is the diagonal entry.
    #[test]
    fn sine_state_quotient_from_derivatives() {
        let phi = |x: f64, y: f64| 2.0 * (3.0 * PI * x).sin() * (4.0 * PI * y).sin();
        let h = 1e-4;
        for &(x, y) in &[(0.13, 0.21), (0.4, 0.77), (0.61, 0.05)] {
            let f = phi(x, y);
            let pxx = -(phi(x + h, y) - 2.0 * f + phi(x - h, y)) / (h * h);
            let pyy = -(phi(x, y + h) - 2.0 * f + phi(x, y - h)) / (h * h);
            assert!((pxx / (pxx + pyy) - 0.36).abs() < 1e-6);
        }
    }

    #[test]
    fn operator_is_bounded_symmetric_and_trace_preserving() {
        let shape = BilliardShape::default_chaotic();
        let basis = BasisSpec { n_max_x: 22, n_max_y: 25, step_height: 4e3, keep_fraction: 0.5 };
        let s = solve_spectrum(&shape, &basis, true).unwrap();
        let o = operator_matrix(&s, "test").unwrap();
        assert!(o.max_asymmetry() < 1e-10);
        assert!(o.diagonal.iter().all(|&d| (-1e-12..=1.0 + 1e-12).contains(&d)));
        let (lo, hi) = o.eigenvalue_range().unwrap();
        assert!(lo > -1e-8 && hi < 1.0 + 1e-8);

        // Full rotation preserves the trace of the sine-basis diagonal.
        // The kept-window caps would truncate, so assemble the record by hand.
        let e = quantum::eigensolve(quantum::build_hamiltonian(&shape, &basis).unwrap().as_ref()).unwrap();
        let full = Spectrum {
            energies: e.values,
            eigenvectors: Some(Arc::new(e.vectors)),
            shape,
            basis,
            stable_count: None,
            drift: None,
            degeneracies: Vec::new(),
            warnings: Vec::new(),
        };
        let of = operator_matrix(&full, "full").unwrap();
        let trace: f64 = of.diagonal.iter().sum();
        let sine: f64 = sine_basis_operator(&s.shape, &s.basis).iter().sum();
        assert_relative_eq!(trace, sine, epsilon = 1e-8);
    }

    #[test]
    fn missing_vectors_rejected() {
        let mut s = small_spectrum();
        s.eigenvectors = None;
        assert!(matches!(operator_matrix(&s, "x"), Err(PerturbError::MissingEigenvectors)));
    }

    #[test]
    fn sinc_limits() {
        assert_eq!(sinc(0.0), 1.0);
        assert_relative_eq!(sinc(1e-9), 1.0, epsilon = 1e-16);
        assert_relative_eq!(sinc(PI), 0.0, epsilon = 1e-15);
        assert_relative_eq!(sinc(2.0), 2f64.sin() / 2.0, epsilon = 1e-16);
    }

    #[test]
    fn finite_tau_limits() {
        let s = small_spectrum();
        let o = operator_matrix(&s, "t").unwrap();
        let eps = 30.0;
        let n = 120;
        let ebar = s.energies[..n].iter().sum::<f64>() / n as f64;
        let delta = (s.energies[n - 1] - s.energies[0]) / (n - 1) as f64;

        let h = build_h_eps_tau(&s, &o, eps, 1e-12 / ebar, 0..n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let plain = if i == j { s.energies[i] } else { 0.0 } + eps * o.elements[(i, j)];
                assert!((h[(i, j)] - plain).abs() <= 1e-8 * eps);
            }
        }

        let tau = 1e3 / delta;
        let h = build_h_eps_tau(&s, &o, eps, tau, 0..n).unwrap();
        assert!(quantum::asymmetry(h.as_ref()) == 0.0);
        for i in 0..n {
            assert_eq!(h[(i, i)], s.energies[i] + eps * o.diagonal[i]);
            for j in 0..n {
                if i != j {
                    let gap = (s.energies[i] - s.energies[j]).abs();
                    assert!(h[(i, j)].abs() <= eps / (gap * tau) * (1.0 + 1e-12));
                    assert!(h[(i, j)].abs() <= eps * 1e-3 * delta / gap * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn infinite_tau_spectrum() {
        let s = small_spectrum();
        let o = operator_matrix(&s, "t").unwrap();
        let same = build_h_eps(&s, &o, 0.0).unwrap();
        assert_eq!(same.energies, s.energies);

        let eps = 25.0;
        let p = build_h_eps(&s, &o, eps).unwrap();
        assert!(Arc::ptr_eq(p.eigenvectors.as_ref().unwrap(), s.eigenvectors.as_ref().unwrap()));
        assert!(p.energies.windows(2).all(|w| w[1] >= w[0]));
        for (e, &n) in p.energies.iter().zip(&p.source_levels) {
            let shift = e - s.energies[n];
            assert!((0.0..=eps).contains(&shift));
            assert!(*e < p.complete_below);
        }
        // Mean spacing over the window is preserved to within 2%.
        let n = p.energies.len();
        assert!(n >= 200);
        let d0 = (s.energies[n - 1] - s.energies[0]) / (n - 1) as f64;
        let d1 = (p.energies[n - 1] - p.energies[0]) / (n - 1) as f64;
        assert!((d1 / d0 - 1.0).abs() < 0.02, "{d0} {d1}");
    }

    #[test]
    fn large_tau_reproduces_shifted_levels() {
        let s = small_spectrum();
        let o = operator_matrix(&s, "t").unwrap();
        let choice = choose_epsilon(&s.energies, 0..200).unwrap();
        let tau = 1e4 / choice.mean_spacing;
        let r = tau_consistency(&s, &o, choice.epsilon, tau, 20..220, choice.mean_spacing).unwrap();
        assert!(r.max_deviation < 0.02, "{r:?}");
    }

    #[test]
    fn degenerate_levels_rejected() {
        let mut s = small_spectrum();
        let o = operator_matrix(&s, "t").unwrap();
        s.degeneracies = vec![3];
        assert!(matches!(build_h_eps(&s, &o, 1.0), Err(PerturbError::Degenerate(3))));
    }

    #[test]
    fn delta_o_examples() {
        assert_eq!(delta_o(&[0.3; 10], 2, 5).unwrap(), 0.0);
        let alt: Vec<f64> = (0..60).map(|k| (k % 2) as f64).collect();
        for n in [1, 7, 50] {
            assert_eq!(delta_o(&alt, 3, n).unwrap(), 1.0);
        }
        assert_relative_eq!(delta_o(&[0.0, 0.5, 1.0], 0, 2).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(delta_o(&[0.0, 0.5, 1.0], 1, 2), Err(PerturbError::WindowOutOfRange { .. })));
        assert_eq!(windowed_delta_o(&alt, 0..60, 50).unwrap(), 1.0);
        assert_eq!(centred_delta_o(&alt, 0..60, 50).unwrap(), 1.0);
    }

    #[test]
    fn epsilon_for_a_ladder() {
        let d = 0.7;
        let e: Vec<f64> = (0..400).map(|n| n as f64 * d).collect();
        let c = choose_epsilon(&e, 100..201).unwrap();
        assert_relative_eq!(c.mean_energy, 150.0 * d, epsilon = 1e-12);
        assert_relative_eq!(c.mean_spacing, d, epsilon = 1e-12);
        assert_relative_eq!(c.epsilon, 150f64.sqrt() * d, epsilon = 1e-12);
        assert!(c.epsilon > c.mean_spacing);
        let c = c.with_delta_o(0.2);
        assert_relative_eq!(c.coupling_ratio.unwrap(), 150f64.sqrt() * 0.2, epsilon = 1e-12);
        assert!(matches!(choose_epsilon(&e, 0..99), Err(PerturbError::InsufficientLevels { .. })));
    }

    #[test]
    fn tau_round_trips_through_toml() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W {
            p: PerturbParams,
        }
        for tau in [Tau::Infinite, Tau::Finite(2.5)] {
            let w = W { p: PerturbParams { epsilon: 1.0, tau, epsilon_rule: EpsilonRule::Explicit } };
            let text = toml::to_string(&w).unwrap();
            assert_eq!(toml::from_str::<W>(&text).unwrap(), w);
        }
        assert!(toml::from_str::<W>("[p]\ntau = \"soon\"\nepsilon_rule = \"explicit\"").is_err());
        assert!(PerturbParams { epsilon: -1.0, ..Default::default() }.validate().is_err());
        assert!(PerturbParams { tau: Tau::Finite(0.0), ..Default::default() }.validate().is_err());
    }
}
