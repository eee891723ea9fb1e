//! Hamiltonian of the step-potential billiard in the Dirichlet sine basis of
//! the enclosing rectangle, its diagonalisation, and truncation-stability
//! certification.
//!
//! Units: `m = 1/2`, `hbar = 1`, so the kinetic energy of basis state
//! `(n_x, n_y)` is `pi^2 (n_x^2 / W^2 + n_y^2 / H^2)`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::matmul::matmul;
use faer::{Accum, Col, Mat, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::geometry::BilliardShape;
use crate::quadrature::GaussLegendre;

pub const MIN_DIMENSION: usize = 400;
/// Levels are kept only below this fraction of the step height.
pub const KEPT_ENERGY_FRACTION: f64 = 0.1;
/// A kept window whose top exceeds `step_height / 50` is flagged.
pub const STEP_RATIO_FLOOR: f64 = 50.0;
/// Maximum element change allowed when the panel count is doubled, in units of V0.
pub const QUADRATURE_TOLERANCE: f64 = 1e-8;
/// Stability threshold in units of the local mean spacing.
pub const STABILITY_THRESHOLD: f64 = 0.1;
/// Half-width (in spacings) of the local mean used to normalise drift.
pub const DRIFT_WINDOW: usize = 25;
pub const DEFAULT_INFLATION: f64 = 1.25;

const GL_ORDER: usize = 16;
const START_PANELS_PER_UNIT: usize = 8;
const MAX_DOUBLINGS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum QuantumError {
    #[error("basis dimension {0} is below the minimum of {MIN_DIMENSION}")]
    BasisTooSmall(usize),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("quadrature did not converge: max element change {change:e} (in units of V0) at {panels} panels per unit length")]
    QuadratureNonConvergence { panels: usize, change: f64 },
    #[error("matrix is not symmetric: max |H - H^T| = {0:e}")]
    NonSymmetric(f64),
    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),
    #[error("spectrum has no eigenvectors")]
    MissingEigenvectors,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n_max_x: usize,
    pub n_max_y: usize,
    /// Height V0 of the step potential over the excluded region.
    pub step_height: f64,
    pub keep_fraction: f64,
}

impl BasisSpec {
    pub fn new(n_max_x: usize, n_max_y: usize, step_height: f64, keep_fraction: f64) -> Result<Self, QuantumError> {
        let b = Self { n_max_x, n_max_y, step_height, keep_fraction };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), QuantumError> {
        if self.dimension() < MIN_DIMENSION {
            return Err(QuantumError::BasisTooSmall(self.dimension()));
        }
        if !(self.step_height.is_finite() && self.step_height > 0.0) {
            return Err(QuantumError::InvalidBasis(format!(
                "step_height must be positive, got {}",
                self.step_height
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(QuantumError::InvalidBasis(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.n_max_x * self.n_max_y
    }

    /// Same step height and keep fraction, mode cut-offs scaled up by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self {
            n_max_x: (self.n_max_x as f64 * factor).ceil() as usize,
            n_max_y: (self.n_max_y as f64 * factor).ceil() as usize,
            ..*self
        }
    }

    pub fn max_kept(&self) -> usize {
        (self.keep_fraction * self.dimension() as f64).floor() as usize
    }

    /// Mode numbers `(n_x, n_y)` of basis index `i`.
    pub fn modes(&self, i: usize) -> (usize, usize) {
        (i / self.n_max_y + 1, i % self.n_max_y + 1)
    }

    pub fn kinetic(&self, shape: &BilliardShape, i: usize) -> f64 {
        let (nx, ny) = self.modes(i);
        let kx = nx as f64 / shape.width;
        let ky = ny as f64 / shape.height;
        PI * PI * (kx * kx + ky * ky)
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n_max_x={} n_max_y={} step_height={} keep_fraction={}",
            self.n_max_x, self.n_max_y, self.step_height, self.keep_fraction
        )
    }
}

/// Energy below which a domain of the given area has about `levels`
/// Dirichlet states (leading Weyl term).
pub fn weyl_energy(levels: usize, area: f64) -> f64 {
    4.0 * PI * levels as f64 / area
}

/// One node of an outer quadrature: outer coordinate, signed weight, and the
/// lower end of the inner interval `[lower, L]` that is excluded.
#[derive(Debug, Clone, Copy)]
struct Node {
    t: f64,
    w: f64,
    lower: f64,
}

/// Outer-integration nodes for the two families of strips.
///
/// `y_nodes` integrate over y with the x-interval `[lower, W]` done in closed
/// form (right strip minus the shared corner); `x_nodes` integrate over x with
/// the y-interval `[lower, H]` in closed form (top strip).
struct Rule {
    y_nodes: Vec<Node>,
    x_nodes: Vec<Node>,
}

impl Rule {
    fn new(shape: &BilliardShape, panels_per_unit: usize, gl: &GaussLegendre) -> Self {
        let panels = |len: f64| ((panels_per_unit as f64 * len).ceil() as usize).max(1);
        let mut y_nodes = Vec::new();
        let mut x_nodes = Vec::new();
        if shape.curvature1 > 0.0 {
            y_nodes.extend(
                gl.points(0.0, shape.height, panels(shape.height))
                    .map(|(y, w)| Node { t: y, w, lower: shape.right_wall_x(y) }),
            );
        }
        for (lo, hi) in shape.corner_pieces() {
            y_nodes.extend(
                gl.points(lo, hi, panels(hi - lo))
                    .map(|(y, w)| Node { t: y, w: -w, lower: shape.corner_left(y) }),
            );
        }
        if shape.curvature2 > 0.0 {
            x_nodes.extend(
                gl.points(0.0, shape.width, panels(shape.width))
                    .map(|(x, w)| Node { t: x, w, lower: shape.top_wall_y(x) }),
            );
        }
        Self { y_nodes, x_nodes }
    }
}

/// `(2/L) * int_a^L sin(k_n u) sin(k_m u) du` for all `n, m <= count`, with
/// `k_n = n pi / L`, written column-major into `out[m * count + n]`.
fn tail_overlaps(count: usize, len: f64, a: f64, out: &mut [f64]) {
    let k: Vec<f64> = (1..=count).map(|n| n as f64 * PI / len).collect();
    let s: Vec<f64> = k.iter().map(|k| (k * a).sin()).collect();
    let c: Vec<f64> = k.iter().map(|k| (k * a).cos()).collect();
    for m in 0..count {
        for n in 0..count {
            out[m * count + n] = if n == m {
                ((len - a) + s[n] * c[n] / k[n]) / len
            } else {
                let sum = (s[n] * c[m] + c[n] * s[m]) / (k[n] + k[m]);
                let diff = (s[n] * c[m] - c[n] * s[m]) / (k[n] - k[m]);
                (sum - diff) / len
            };
        }
    }
}

/// `(2/L) sin(k_n t) sin(k_m t)` for all pairs, column-major.
fn point_products(count: usize, len: f64, t: f64, out: &mut [f64]) {
    let s: Vec<f64> = (1..=count).map(|n| (n as f64 * PI * t / len).sin()).collect();
    for m in 0..count {
        for n in 0..count {
            out[m * count + n] = 2.0 / len * s[n] * s[m];
        }
    }
}

/// Excluded-region overlap of basis states `(ix, iy)` and `(jx, jy)` (zero
/// based), evaluated element by element. Used to pick the panel density.
fn overlap_element(shape: &BilliardShape, rule: &Rule, ix: usize, iy: usize, jx: usize, jy: usize) -> f64 {
    let (w, h) = (shape.width, shape.height);
    let tail = |n: usize, m: usize, len: f64, a: f64| {
        let kn = (n + 1) as f64 * PI / len;
        let km = (m + 1) as f64 * PI / len;
        if n == m {
            ((len - a) + (2.0 * kn * a).sin() / (2.0 * kn)) / len
        } else {
            (((kn + km) * a).sin() / (kn + km) - ((kn - km) * a).sin() / (kn - km)) / len
        }
    };
    let point = |n: usize, m: usize, len: f64, t: f64| {
        2.0 / len * ((n + 1) as f64 * PI * t / len).sin() * ((m + 1) as f64 * PI * t / len).sin()
    };
    let ys: f64 = rule.y_nodes.iter().map(|q| q.w * tail(ix, jx, w, q.lower) * point(iy, jy, h, q.t)).sum();
    let xs: f64 = rule.x_nodes.iter().map(|q| q.w * point(ix, jx, w, q.t) * tail(iy, jy, h, q.lower)).sum();
    ys + xs
}

/// Smallest panel density at which a handful of the most oscillatory
/// elements change by less than a tenth of the tolerance under doubling.
fn pilot_density(shape: &BilliardShape, basis: &BasisSpec, gl: &GaussLegendre) -> usize {
    let (nx, ny) = (basis.n_max_x, basis.n_max_y);
    let probes = [
        (nx - 1, ny - 1, nx - 1, ny - 1),
        (nx - 1, ny - 1, nx - 2, ny - 2),
        (0, 0, nx - 1, ny - 1),
        (nx - 1, 0, nx - 1, ny - 1),
        (0, ny - 1, nx - 1, ny - 1),
        (nx / 2, ny / 3, nx - 1, ny / 2),
    ];
    let mut density = START_PANELS_PER_UNIT;
    for _ in 0..MAX_DOUBLINGS {
        let coarse = Rule::new(shape, density, gl);
        let fine = Rule::new(shape, 2 * density, gl);
        let change = probes
            .iter()
            .map(|&(a, b, c, d)| {
                (overlap_element(shape, &coarse, a, b, c, d) - overlap_element(shape, &fine, a, b, c, d)).abs()
            })
            .fold(0.0, f64::max);
        if change < 0.1 * QUADRATURE_TOLERANCE {
            break;
        }
        density *= 2;
    }
    density
}

/// Number of x-mode rows assembled per GEMM block.
const ROW_BLOCK: usize = 4;
/// Quadrature nodes per GEMM panel.
const NODE_CHUNK: usize = 256;

/// Accumulates `sum_q A_q[ix, jx] B_q[iy, jy]` for `ix` in `rows`, all
/// `jx >= rows.start`, into `acc` (`ny^2` by `rows.len() * (nx - rows.start)`).
fn accumulate_block(
    shape: &BilliardShape,
    basis: &BasisSpec,
    rule: &Rule,
    rows: std::ops::Range<usize>,
    acc: &mut Mat<f64>,
    par: Par,
) {
    let (nx, ny) = (basis.n_max_x, basis.n_max_y);
    let (w, h) = (shape.width, shape.height);
    let i0 = rows.start;
    let cols = nx - i0;
    acc.fill(0.0);
    let mut a_buf = vec![0.0; nx * nx];
    for (family, nodes) in [(0, &rule.y_nodes), (1, &rule.x_nodes)] {
        for chunk in nodes.chunks(NODE_CHUNK) {
            let mut bt = Mat::<f64>::zeros(ny * ny, chunk.len());
            let mut lt = Mat::<f64>::zeros(chunk.len(), rows.len() * cols);
            for (q, node) in chunk.iter().enumerate() {
                let col = bt.col_mut(q).try_as_col_major_mut().unwrap().as_slice_mut();
                if family == 0 {
                    point_products(ny, h, node.t, col);
                    tail_overlaps(nx, w, node.lower, &mut a_buf);
                } else {
                    tail_overlaps(ny, h, node.lower, col);
                    point_products(nx, w, node.t, &mut a_buf);
                }
                for (r, ix) in rows.clone().enumerate() {
                    for jx in i0..nx {
                        lt[(q, r * cols + (jx - i0))] = node.w * a_buf[jx * nx + ix];
                    }
                }
            }
            matmul(acc.as_mut(), Accum::Add, bt.as_ref(), lt.as_ref(), 1.0, par);
        }
    }
}

fn parallelism() -> Par {
    faer::get_global_parallelism()
}

/// Assembles `H = T + V0 * I_exc` for the shape in the given basis.
///
/// Every element is computed with two composite rules (`P` and `2P` panels);
/// if any element differs by more than `1e-8 V0` the density is doubled and
/// the assembly repeated. The finer result is returned.
pub fn build_hamiltonian(shape: &BilliardShape, basis: &BasisSpec) -> Result<Mat<f64>, QuantumError> {
    basis.validate()?;
    let n = basis.dimension();
    let mut h = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = basis.kinetic(shape, i);
    }
    if shape.curvature1 <= 0.0 && shape.curvature2 <= 0.0 {
        return Ok(h);
    }
    let gl = GaussLegendre::new(GL_ORDER);
    let mut density = pilot_density(shape, basis, &gl);
    let mut change = f64::NAN;
    for _ in 0..MAX_DOUBLINGS {
        change = assemble_potential(shape, basis, &gl, density, &mut h);
        log::debug!("assembly at {density} panels/unit: max change {change:e}");
        if change <= QUADRATURE_TOLERANCE {
            return Ok(h);
        }
        density *= 2;
    }
    Err(QuantumError::QuadratureNonConvergence { panels: density / 2, change })
}

/// Writes `diag(T) + V0 * I_exc` (fine rule) into `h` and returns the largest
/// coarse/fine element difference in units of V0.
fn assemble_potential(shape: &BilliardShape, basis: &BasisSpec, gl: &GaussLegendre, density: usize, h: &mut Mat<f64>) -> f64 {
    let (nx, ny) = (basis.n_max_x, basis.n_max_y);
    let v0 = basis.step_height;
    let coarse = Rule::new(shape, density, gl);
    let fine = Rule::new(shape, 2 * density, gl);
    let par = parallelism();
    let mut change: f64 = 0.0;
    let mut start = 0;
    while start < nx {
        let rows = start..(start + ROW_BLOCK).min(nx);
        let cols = nx - start;
        let mut acc_c = Mat::<f64>::zeros(ny * ny, rows.len() * cols);
        let mut acc_f = Mat::<f64>::zeros(ny * ny, rows.len() * cols);
        accumulate_block(shape, basis, &coarse, rows.clone(), &mut acc_c, par);
        accumulate_block(shape, basis, &fine, rows.clone(), &mut acc_f, par);
        for (r, ix) in rows.clone().enumerate() {
            for jx in ix..nx {
                let col = r * cols + (jx - start);
                let c = acc_c.col(col);
                let f = acc_f.col(col);
                for jy in 0..ny {
                    for iy in 0..ny {
                        let k = jy * ny + iy;
                        change = change.max((c[k] - f[k]).abs());
                        let (p, q) = (ix * ny + iy, jx * ny + jy);
                        let v = v0 * f[k] + if p == q { basis.kinetic(shape, p) } else { 0.0 };
                        h[(p, q)] = v;
                        h[(q, p)] = v;
                    }
                }
            }
        }
        start = rows.end;
    }
    change
}

/// Largest `|H - H^T|`.
pub fn asymmetry(h: MatRef<'_, f64>) -> f64 {
    let n = h.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in j + 1..n {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

/// Full eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal columns, one per eigenvalue.
    pub vectors: Mat<f64>,
}

fn is_diagonal(h: MatRef<'_, f64>) -> bool {
    (0..h.ncols()).all(|j| (0..h.nrows()).all(|i| i == j || h[(i, j)] == 0.0))
}

/// Sorted diagonal with the unit vectors of the lowest `keep` entries.
fn diagonal_solution(h: MatRef<'_, f64>, keep: usize) -> (Vec<f64>, Mat<f64>) {
    let n = h.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[(a, a)].total_cmp(&h[(b, b)]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| h[(i, i)]).collect();
    let keep = keep.min(n);
    let mut vectors = Mat::zeros(n, keep);
    for (col, &i) in order.iter().take(keep).enumerate() {
        vectors[(i, col)] = 1.0;
    }
    (values, vectors)
}

/// Eigenvalues ascending with orthonormal eigenvectors. Exactly diagonal
/// input is sorted directly, giving permuted unit vectors.
pub fn eigensolve(h: MatRef<'_, f64>) -> Result<Eigen, QuantumError> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(QuantumError::NonSymmetric(f64::INFINITY));
    }
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let asym = asymmetry(h);
    if asym > 1e-10 * scale {
        return Err(QuantumError::NonSymmetric(asym));
    }
    if is_diagonal(h) {
        let (values, vectors) = diagonal_solution(h, n);
        return Ok(Eigen { values, vectors });
    }
    let (values, vectors) = solve_in_place(h.to_owned(), Some(n))?;
    Ok(Eigen { values, vectors: vectors.unwrap() })
}

/// Diagonalises `h` in place (its storage is reused for the tridiagonal
/// reduction). Returns all eigenvalues and, if `vectors` is `Some(m)`, the
/// eigenvectors of the lowest `m` of them.
pub fn solve_in_place(mut h: Mat<f64>, vectors: Option<usize>) -> Result<(Vec<f64>, Option<Mat<f64>>), QuantumError> {
    use faer::linalg::evd::{self, tridiag, ComputeEigenvectors};
    use faer::linalg::householder;

    let n = h.nrows();
    if n == 0 {
        return Ok((Vec::new(), vectors.map(|_| Mat::zeros(0, 0))));
    }
    let par = parallelism();
    let bs = faer::linalg::qr::no_pivoting::factor::recommended_block_size::<f64>(n, n);
    let mut hh = Mat::<f64>::zeros(bs, n - 1);
    {
        let req = tridiag::tridiag_in_place_scratch::<f64>(n, par, Default::default());
        let mut mem = MemBuffer::new(req);
        tridiag::tridiag_in_place(h.as_mut(), hh.as_mut(), par, MemStack::new(&mut mem), Default::default());
    }
    let diag = Col::<f64>::from_fn(n, |i| h[(i, i)]);
    let sub = Col::<f64>::from_fn(n, |i| if i + 1 < n { h[(i + 1, i)] } else { 0.0 });
    let mut s = Col::<f64>::zeros(n);
    let want = vectors.map(|m| m.min(n));
    let mut u = want.map(|_| Mat::<f64>::zeros(n, n));
    {
        let compute = if u.is_some() { ComputeEigenvectors::Yes } else { ComputeEigenvectors::No };
        let req = evd::self_adjoint_evd_scratch::<f64>(n, compute, par, Default::default());
        let mut mem = MemBuffer::new(req);
        evd::tridiagonal_self_adjoint_evd(
            diag.as_diagonal(),
            sub.as_diagonal(),
            s.as_diagonal_mut(),
            u.as_mut().map(|u| u.as_mut()),
            par,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| QuantumError::EigensolverFailure(format!("{e:?}")))?;
    }
    let values: Vec<f64> = (0..n).map(|i| s[i]).collect();
    let Some(m) = want else {
        return Ok((values, None));
    };
    let u = u.unwrap();
    let mut v = Mat::<f64>::zeros(n, m);
    v.copy_from(u.as_ref().subcols(0, m));
    drop(u);
    if n > 1 {
        let req = householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(n - 1, bs, m);
        let mut mem = MemBuffer::new(req);
        householder::apply_block_householder_sequence_on_the_left_in_place_with_conj(
            h.as_ref().submatrix(1, 0, n - 1, n - 1),
            hh.as_ref(),
            faer::Conj::No,
            v.as_mut().subrows_mut(1, n - 1),
            par,
            MemStack::new(&mut mem),
        );
    }
    Ok((values, Some(v)))
}

/// Ordered levels of one billiard with eigenvectors in the sine basis.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Kept levels, ascending; all lie below `step_height / 10`.
    pub energies: Vec<f64>,
    /// `dimension x energies.len()`, shared so that derived spectra can
    /// reuse it without copying.
    pub eigenvectors: Option<Arc<Mat<f64>>>,
    pub shape: BilliardShape,
    pub basis: BasisSpec,
    /// Length of the certified prefix of `energies`, once checked.
    pub stable_count: Option<usize>,
    /// Per-level drift under basis inflation, in units of the local mean spacing.
    pub drift: Option<Vec<f64>>,
    /// Indices `k` with `E_{k+1} - E_k < 1e-12 * mean(E)`.
    pub degeneracies: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Spectrum {
    /// Truncates a full solve to the kept window: at most
    /// `keep_fraction * dimension` levels, all below `step_height / 10`.
    pub fn from_solution(
        shape: BilliardShape,
        basis: BasisSpec,
        mut energies: Vec<f64>,
        vectors: Option<Mat<f64>>,
    ) -> Self {
        let cap = KEPT_ENERGY_FRACTION * basis.step_height;
        let keep = energies.iter().take_while(|&&e| e < cap).count().min(basis.max_kept());
        energies.truncate(keep);
        let eigenvectors = vectors.map(|v| {
            if v.ncols() == keep {
                Arc::new(v)
            } else {
                Arc::new(v.as_ref().subcols(0, keep.min(v.ncols())).to_owned())
            }
        });
        let degeneracies = find_degeneracies(&energies);
        let mut warnings = Vec::new();
        if !degeneracies.is_empty() {
            warnings.push(format!("{} exact degeneracies in the kept window", degeneracies.len()));
        }
        if let Some(&top) = energies.last() {
            if basis.step_height < STEP_RATIO_FLOOR * top {
                warnings.push(format!(
                    "step height {} is {:.1} times the highest kept level, below the floor of {STEP_RATIO_FLOOR}",
                    basis.step_height,
                    basis.step_height / top
                ));
            }
        }
        Self { energies, eigenvectors, shape, basis, stable_count: None, drift: None, degeneracies, warnings }
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// The certified levels (all kept levels if stability was never checked).
    pub fn stable_energies(&self) -> &[f64] {
        &self.energies[..self.stable_count.unwrap_or(self.energies.len())]
    }

    pub fn vectors(&self) -> Result<&Arc<Mat<f64>>, QuantumError> {
        self.eigenvectors.as_ref().ok_or(QuantumError::MissingEigenvectors)
    }

    /// Largest `|V^T V - I|` over the stored eigenvectors.
    pub fn orthonormality_error(&self) -> Result<f64, QuantumError> {
        let v = self.vectors()?;
        let g = v.transpose() * v.as_ref();
        let mut worst: f64 = 0.0;
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        Ok(worst)
    }

    /// Relative Weyl slope error over the certified levels.
    pub fn weyl_error(&self) -> Result<f64, crate::stats::StatsError> {
        crate::stats::weyl_relative_error(self.stable_energies(), self.shape.area())
    }
}

fn find_degeneracies(energies: &[f64]) -> Vec<usize> {
    if energies.is_empty() {
        return Vec::new();
    }
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    energies
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] < 1e-12 * mean.abs())
        .map(|(i, _)| i)
        .collect()
}

/// Kept-window spectrum of the shape, with eigenvectors if requested.
pub fn solve_spectrum(shape: &BilliardShape, basis: &BasisSpec, with_vectors: bool) -> Result<Spectrum, QuantumError> {
    let h = build_hamiltonian(shape, basis)?;
    let (values, vectors) = if is_diagonal(h.as_ref()) {
        let (values, vectors) = diagonal_solution(h.as_ref(), if with_vectors { basis.max_kept() } else { 0 });
        (values, with_vectors.then_some(vectors))
    } else {
        solve_in_place(h, with_vectors.then(|| basis.max_kept()))?
    };
    Ok(Spectrum::from_solution(*shape, *basis, values, vectors))
}

/// Per-level drift between a base and an inflated solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub stable_count: usize,
    /// `|E_k - E'_k|` over the local mean spacing.
    pub drift: Vec<f64>,
    /// Whether 50-level window averages of the drift never decrease.
    pub drift_monotone: bool,
    /// Largest `E'_k - E_k` (positive means the larger basis raised a level).
    pub max_rise: f64,
}

/// Compares levels `0..limit` of `base` against `inflated`.
pub fn compare_levels(base: &[f64], inflated: &[f64], limit: usize) -> StabilityReport {
    let limit = limit.min(base.len()).min(inflated.len());
    let raw: Vec<f64> = base.windows(2).map(|w| w[1] - w[0]).collect();
    let local = |k: usize| {
        if raw.is_empty() {
            return f64::INFINITY;
        }
        let lo = k.saturating_sub(DRIFT_WINDOW);
        let hi = (k + DRIFT_WINDOW + 1).min(raw.len());
        let lo = lo.min(hi - 1);
        raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    };
    let drift: Vec<f64> = (0..limit).map(|k| (base[k] - inflated[k]).abs() / local(k)).collect();
    let stable_count = drift.iter().position(|&d| !(d < STABILITY_THRESHOLD)).unwrap_or(limit);
    let window_means: Vec<f64> = drift.chunks_exact(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    let drift_monotone = window_means.windows(2).all(|w| w[1] >= w[0]);
    let max_rise = (0..limit).map(|k| inflated[k] - base[k]).fold(f64::NEG_INFINITY, f64::max);
    StabilityReport { stable_count, drift, drift_monotone, max_rise }
}

/// Solves the shape in `basis` (with eigenvectors) and in the basis inflated
/// by `inflation` (eigenvalues only), and certifies the stable prefix.
///
/// The inflated solve runs first so that only one large matrix is alive at a
/// time.
pub fn stability_check(shape: &BilliardShape, basis: &BasisSpec, inflation: f64) -> Result<Spectrum, QuantumError> {
    if !(inflation > 1.0) {
        return Err(QuantumError::InvalidBasis(format!("inflation must exceed 1, got {inflation}")));
    }
    let big = basis.inflated(inflation);
    let inflated = {
        let h = build_hamiltonian(shape, &big)?;
        if is_diagonal(h.as_ref()) {
            diagonal_solution(h.as_ref(), 0).0
        } else {
            solve_in_place(h, None)?.0
        }
    };
    let mut spectrum = solve_spectrum(shape, basis, true)?;
    certify(&mut spectrum, &inflated);
    Ok(spectrum)
}

/// Attaches drift and stable count from inflated-basis levels.
pub fn certify(spectrum: &mut Spectrum, inflated: &[f64]) -> StabilityReport {
    let report = compare_levels(&spectrum.energies, inflated, spectrum.energies.len());
    if !report.drift_monotone {
        spectrum.warnings.push("windowed drift is not non-decreasing in level index".into());
    }
    if report.max_rise > 1e-10 * spectrum.basis.step_height {
        spectrum.warnings.push(format!("inflated basis raised a level by {:e}", report.max_rise));
    }
    spectrum.stable_count = Some(report.stable_count);
    spectrum.drift = Some(report.drift.clone());
    report
}

const SPECTRUM_MAGIC: &str = "# qbilliard spectrum v1";
const VECTORS_MAGIC: &str = "# qbilliard eigenvectors v1";

/// Writes the plain-text level table. `extra` lines go into the header as
/// `meta key value`.
pub fn write_spectrum<W: Write>(out: &mut W, spectrum: &Spectrum, extra: &[(String, String)]) -> std::io::Result<()> {
    let s = &spectrum.shape;
    let b = &spectrum.basis;
    writeln!(out, "{SPECTRUM_MAGIC}")?;
    writeln!(
        out,
        "shape {} {} {} {} {} {}",
        s.width, s.height, s.curvature1, s.offset1, s.curvature2, s.offset2
    )?;
    writeln!(out, "basis {} {} {} {}", b.n_max_x, b.n_max_y, b.step_height, b.keep_fraction)?;
    match spectrum.stable_count {
        Some(k) => writeln!(out, "stable_count {k}")?,
        None => writeln!(out, "stable_count none")?,
    }
    for (k, v) in extra {
        writeln!(out, "meta {k} {v}")?;
    }
    writeln!(out, "# index energy stable drift")?;
    let stable = spectrum.stable_count.unwrap_or(0);
    for (i, e) in spectrum.energies.iter().enumerate() {
        let drift = spectrum.drift.as_ref().map_or(f64::NAN, |d| d[i]);
        writeln!(out, "{i} {e} {} {drift}", u8::from(i < stable))?;
    }
    Ok(())
}

/// Parsed spectrum table.
#[derive(Debug, Clone)]
pub struct SpectrumTable {
    pub spectrum: Spectrum,
    pub meta: Vec<(String, String)>,
}

fn parse_err(line: usize, reason: impl Into<String>) -> QuantumError {
    QuantumError::Parse { line, reason: reason.into() }
}

fn parse_floats(line: usize, fields: &[&str]) -> Result<Vec<f64>, QuantumError> {
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("`{f}`: {e}"))))
        .collect()
}

pub fn read_spectrum<R: BufRead>(input: R) -> Result<SpectrumTable, QuantumError> {
    let mut shape = None;
    let mut basis = None;
    let mut stable_count = None;
    let mut meta = Vec::new();
    let mut energies = Vec::new();
    let mut drift = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if n == 0 {
            if line.trim() != SPECTRUM_MAGIC {
                return Err(parse_err(lineno, "missing spectrum header"));
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "shape" => {
                let v = parse_floats(lineno, &fields[1..])?;
                if v.len() != 6 {
                    return Err(parse_err(lineno, "shape needs 6 values"));
                }
                shape = Some(BilliardShape {
                    width: v[0],
                    height: v[1],
                    curvature1: v[2],
                    offset1: v[3],
                    curvature2: v[4],
                    offset2: v[5],
                });
            }
            "basis" => {
                if fields.len() != 5 {
                    return Err(parse_err(lineno, "basis needs 4 values"));
                }
                let nx = fields[1].parse().map_err(|_| parse_err(lineno, "bad n_max_x"))?;
                let ny = fields[2].parse().map_err(|_| parse_err(lineno, "bad n_max_y"))?;
                let v = parse_floats(lineno, &fields[3..])?;
                basis = Some(BasisSpec { n_max_x: nx, n_max_y: ny, step_height: v[0], keep_fraction: v[1] });
            }
            "stable_count" => {
                stable_count = match fields.get(1) {
                    Some(&"none") => None,
                    Some(v) => Some(v.parse().map_err(|_| parse_err(lineno, "bad stable_count"))?),
                    None => return Err(parse_err(lineno, "stable_count needs a value")),
                };
            }
            "meta" => {
                if fields.len() < 3 {
                    return Err(parse_err(lineno, "meta needs a key and a value"));
                }
                meta.push((fields[1].to_string(), fields[2..].join(" ")));
            }
            _ => {
                if fields.len() != 4 {
                    return Err(parse_err(lineno, "level rows need 4 columns"));
                }
                let idx: usize = fields[0].parse().map_err(|_| parse_err(lineno, "bad index"))?;
                if idx != energies.len() {
                    return Err(parse_err(lineno, format!("expected index {}, got {idx}", energies.len())));
                }
                let v = parse_floats(lineno, &[fields[1], fields[3]])?;
                energies.push(v[0]);
                drift.push(v[1]);
            }
        }
    }
    let shape = shape.ok_or_else(|| parse_err(0, "no shape record"))?;
    let basis = basis.ok_or_else(|| parse_err(0, "no basis record"))?;
    let has_drift = drift.iter().all(|d| !d.is_nan()) && !drift.is_empty();
    let degeneracies = find_degeneracies(&energies);
    Ok(SpectrumTable {
        spectrum: Spectrum {
            energies,
            eigenvectors: None,
            shape,
            basis,
            stable_count,
            drift: has_drift.then_some(drift),
            degeneracies,
            warnings: Vec::new(),
        },
        meta,
    })
}

/// Row-major dump with a `rows cols` header.
pub fn write_eigenvectors<W: Write>(out: &mut W, v: MatRef<'_, f64>) -> std::io::Result<()> {
    writeln!(out, "{VECTORS_MAGIC}")?;
    writeln!(out, "{} {}", v.nrows(), v.ncols())?;
    let mut line = String::new();
    for i in 0..v.nrows() {
        line.clear();
        for j in 0..v.ncols() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&v[(i, j)].to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_eigenvectors<R: BufRead>(input: R) -> Result<Mat<f64>, QuantumError> {
    let mut lines = input.lines();
    let mut next = |n: usize| -> Result<String, QuantumError> {
        lines.next().ok_or_else(|| parse_err(n, "unexpected end of file"))?.map_err(Into::into)
    };
    if next(1)?.trim() != VECTORS_MAGIC {
        return Err(parse_err(1, "missing eigenvector header"));
    }
    let dims = next(2)?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| parse_err(2, "bad dimension")))
        .collect::<Result<_, _>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(2, "expected `rows cols`"));
    };
    let mut v = Mat::<f64>::zeros(rows, cols);
    for i in 0..rows {
        let line = next(i + 3)?;
        let mut count = 0;
        for (j, f) in line.split_whitespace().enumerate() {
            if j >= cols {
                return Err(parse_err(i + 3, "too many columns"));
            }
            v[(i, j)] = f.parse().map_err(|_| parse_err(i + 3, format!("bad value `{f}`")))?;
            count += 1;
        }
        if count != cols {
            return Err(parse_err(i + 3, format!("expected {cols} values, got {count}")));
        }
    }
    Ok(v)
}
