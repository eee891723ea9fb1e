//! Event-driven hard-wall billiard dynamics.
//!
//! Units follow `H = p^2` (mass 1/2), so a particle with momentum `p` moves
//! with velocity `2p`. Flight times below are measured in those units.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

use crate::geometry::{BilliardShape, GeometryError, Vec2, Wall};

/// Initial separation of the shadow trajectory in the Lyapunov estimate.
pub const SHADOW_OFFSET: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum ClassicalError {
    #[error("collision detection failed: {0}")]
    Collision(#[from] GeometryError),
    #[error("invalid start state: {0}")]
    InvalidStart(String),
    #[error("need at least {min} collisions, got {got}")]
    TooFewCollisions { min: u64, got: u64 },
}

/// Phase-space point plus collision bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub position: Vec2,
    pub momentum: Vec2,
    pub elapsed: f64,
    pub collisions: u64,
    /// Wall the particle currently sits on (just after a reflection).
    pub on_wall: Option<Wall>,
}

impl TrajectoryState {
    pub fn new(position: Vec2, momentum: Vec2) -> Self {
        Self { position, momentum, elapsed: 0.0, collisions: 0, on_wall: None }
    }

    pub fn speed(&self) -> f64 {
        self.momentum.norm()
    }

    /// `p_x^2 / (p_x^2 + p_y^2)`, the classical counterpart of the perturbing
    /// operator.
    pub fn o_class(&self) -> f64 {
        let px2 = self.momentum.x * self.momentum.x;
        px2 / (px2 + self.momentum.y * self.momentum.y)
    }

    /// Uniform interior point and uniform direction with the given speed.
    pub fn random<R: Rng + ?Sized>(shape: &BilliardShape, speed: f64, rng: &mut R) -> Self {
        let position = loop {
            let p = Vec2::new(rng.random::<f64>() * shape.width, rng.random::<f64>() * shape.height);
            if shape.contains(p) {
                break p;
            }
        };
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        Self::new(position, Vec2::new(angle.cos(), angle.sin()) * speed)
    }
}

/// One straight segment that ended on a wall.
#[derive(Debug, Clone, Copy)]
pub struct Flight {
    pub duration: f64,
    /// Momentum during the flight (before the reflection).
    pub momentum: Vec2,
    pub wall: Wall,
}

fn validate_start(shape: &BilliardShape, start: &TrajectoryState) -> Result<(), ClassicalError> {
    if start.on_wall.is_none() && !shape.contains(start.position) {
        return Err(ClassicalError::InvalidStart(format!(
            "position ({}, {}) is not inside the billiard",
            start.position.x, start.position.y
        )));
    }
    if !(start.speed() > 0.0) || !start.speed().is_finite() {
        return Err(ClassicalError::InvalidStart("momentum must be nonzero".into()));
    }
    Ok(())
}

/// Time until the next wall hit and which wall.
pub fn next_hit(shape: &BilliardShape, state: &TrajectoryState) -> Result<(f64, Wall), ClassicalError> {
    let speed = state.speed();
    let dir = state.momentum / speed;
    let (dist, wall) = shape.exit(state.position, dir, state.on_wall)?;
    Ok((dist / (2.0 * speed), wall))
}

/// Specular reflection `p' = p - 2 (p . n) n`.
pub fn reflect(momentum: Vec2, normal: Vec2) -> Vec2 {
    momentum - normal * (2.0 * momentum.dot(&normal))
}

/// Fly to the next wall and reflect.
pub fn step(shape: &BilliardShape, state: &mut TrajectoryState) -> Result<Flight, ClassicalError> {
    let (dt, wall) = next_hit(shape, state)?;
    let momentum = state.momentum;
    state.position += momentum * (2.0 * dt);
    let normal = shape.normal_unchecked(wall, state.position);
    state.momentum = reflect(momentum, normal);
    state.elapsed += dt;
    state.collisions += 1;
    state.on_wall = Some(wall);
    Ok(Flight { duration: dt, momentum, wall })
}

/// Advance by a fixed amount of time, reflecting at every wall met on the way.
pub fn advance_by(
    shape: &BilliardShape,
    state: &mut TrajectoryState,
    mut dt: f64,
) -> Result<(), ClassicalError> {
    while dt > 0.0 {
        let (hit, _) = next_hit(shape, state)?;
        if hit > dt {
            state.position += state.momentum * (2.0 * dt);
            state.elapsed += dt;
            state.on_wall = None;
            return Ok(());
        }
        step(shape, state)?;
        dt -= hit;
    }
    Ok(())
}

/// States right after each of the next `n_collisions` reflections.
pub fn evolve(
    shape: &BilliardShape,
    start: &TrajectoryState,
    n_collisions: u64,
) -> Result<Vec<TrajectoryState>, ClassicalError> {
    validate_start(shape, start)?;
    let mut state = *start;
    let mut out = Vec::with_capacity(n_collisions as usize);
    for _ in 0..n_collisions {
        step(shape, &mut state)?;
        out.push(state);
    }
    Ok(out)
}

/// Per-collision dump: `collision elapsed x y px py wall`.
pub fn write_trajectory_table<W: Write>(out: &mut W, states: &[TrajectoryState]) -> io::Result<()> {
    writeln!(out, "# collision elapsed x y px py wall")?;
    for s in states {
        let wall = s.on_wall.map_or_else(|| "-".to_string(), |w| w.to_string());
        writeln!(
            out,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {}",
            s.collisions, s.elapsed, s.position.x, s.position.y, s.momentum.x, s.momentum.y, wall
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    /// Largest exponent per unit time.
    pub exponent: f64,
    /// Exponent times the mean free time, i.e. mean log-stretch per collision.
    pub per_collision_exponent: f64,
    pub horizon: u64,
    /// Running per-collision exponent at horizons 64, 128, 256, ... and at
    /// the final horizon.
    pub convergence_trace: Vec<f64>,
}

impl LyapunovEstimate {
    /// The last two trace entries agree within 10% (or both are below 1e-3
    /// in magnitude, the integrable case).
    pub fn is_converged(&self) -> bool {
        match self.convergence_trace.as_slice() {
            [.., a, b] => {
                if a.abs() < 1e-3 && b.abs() < 1e-3 {
                    true
                } else {
                    (a - b).abs() < 0.1 * a.abs().max(b.abs())
                }
            }
            _ => false,
        }
    }
}

/// Two-trajectory estimate of the largest Lyapunov exponent.
///
/// A shadow starts `SHADOW_OFFSET` away in position. Separations are measured
/// half-way through each free flight (both particles away from walls), using
/// the phase-space norm `sqrt(|dq|^2 + (L |dp| / |p|)^2)` with `L` the
/// geometric mean of the rectangle sides, and the shadow is pulled back to
/// the initial offset after every collision.
pub fn lyapunov(
    shape: &BilliardShape,
    start: &TrajectoryState,
    n_collisions: u64,
) -> Result<LyapunovEstimate, ClassicalError> {
    if n_collisions < 1000 {
        return Err(ClassicalError::TooFewCollisions { min: 1000, got: n_collisions });
    }
    validate_start(shape, start)?;
    let scale = (shape.width * shape.height).sqrt();
    let speed = start.speed();
    let mut reference = *start;
    let perp = Vec2::new(-start.momentum.y, start.momentum.x) / speed;
    let mut shadow = reference;
    shadow.position += perp * SHADOW_OFFSET;
    if !shape.contains(shadow.position) {
        shadow.position -= perp * (2.0 * SHADOW_OFFSET);
    }

    let separation = |a: &TrajectoryState, b: &TrajectoryState| {
        let dq = b.position - a.position;
        let dp = (b.momentum - a.momentum) * (scale / a.speed());
        (dq.norm_squared() + dp.norm_squared()).sqrt()
    };

    let mut log_sum = 0.0;
    let mut trace = Vec::new();
    let mut next_checkpoint = 64u64;
    for k in 1..=n_collisions {
        step(shape, &mut reference)?;
        let (t_next, _) = next_hit(shape, &reference)?;
        let t_mid = reference.elapsed + 0.5 * t_next;
        let (dt_ref, dt_shadow) = (t_mid - reference.elapsed, t_mid - shadow.elapsed);
        advance_by(shape, &mut reference, dt_ref)?;
        advance_by(shape, &mut shadow, dt_shadow)?;

        let d = separation(&reference, &shadow);
        if d > 0.0 {
            log_sum += (d / SHADOW_OFFSET).ln();
            let f = SHADOW_OFFSET / d;
            let pos = reference.position + (shadow.position - reference.position) * f;
            let mom = reference.momentum + (shadow.momentum - reference.momentum) * f;
            shadow.position = pos;
            shadow.momentum = mom * (reference.speed() / mom.norm());
            shadow.elapsed = reference.elapsed;
            shadow.on_wall = None;
        }
        if k == next_checkpoint {
            trace.push(log_sum / k as f64);
            next_checkpoint *= 2;
        }
    }
    let per_collision = log_sum / n_collisions as f64;
    if trace.last() != Some(&per_collision) {
        trace.push(per_collision);
    }
    Ok(LyapunovEstimate {
        exponent: log_sum / reference.elapsed,
        per_collision_exponent: per_collision,
        horizon: n_collisions,
        convergence_trace: trace,
    })
}

/// Time average of `p_x^2 / p^2` over the first `n_collisions` flights. The
/// integrand is constant on each straight segment, so the average is an exact
/// flight-time weighted mean.
pub fn time_average_o(
    shape: &BilliardShape,
    start: &TrajectoryState,
    n_collisions: u64,
) -> Result<f64, ClassicalError> {
    if n_collisions < 1000 {
        return Err(ClassicalError::TooFewCollisions { min: 1000, got: n_collisions });
    }
    validate_start(shape, start)?;
    let mut state = *start;
    let mut weighted = 0.0;
    let mut total = 0.0;
    for _ in 0..n_collisions {
        let flight = step(shape, &mut state)?;
        let px2 = flight.momentum.x * flight.momentum.x;
        weighted += flight.duration * px2 / flight.momentum.norm_squared();
        total += flight.duration;
    }
    Ok(weighted / total)
}

/// Same average over a fixed time horizon instead of a collision count
/// (finite-time smoothing of the classical perturbation).
pub fn time_average_o_for(
    shape: &BilliardShape,
    start: &TrajectoryState,
    horizon: f64,
) -> Result<f64, ClassicalError> {
    validate_start(shape, start)?;
    if !(horizon > 0.0) {
        return Err(ClassicalError::InvalidStart("time horizon must be positive".into()));
    }
    let mut state = *start;
    let mut weighted = 0.0;
    let mut remaining = horizon;
    while remaining > 0.0 {
        let (hit, _) = next_hit(shape, &state)?;
        let dt = hit.min(remaining);
        weighted += dt * state.o_class();
        if hit > remaining {
            break;
        }
        step(shape, &mut state)?;
        remaining -= hit;
    }
    Ok(weighted / horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect() -> BilliardShape {
        BilliardShape::rectangle(1.0, 1.13)
    }

    #[test]
    fn axis_aligned_orbit_keeps_height() {
        let start = TrajectoryState::new(Vec2::new(0.3, 0.7), Vec2::new(1.0, 0.0));
        let states = evolve(&rect(), &start, 100).unwrap();
        for s in &states {
            assert_eq!(s.position.y, 0.7);
            assert_eq!(s.momentum.y, 0.0);
        }
        assert_eq!(states[0].on_wall, Some(Wall::ParabolaRight));
        assert_eq!(states[1].on_wall, Some(Wall::Left));
    }

    #[test]
    fn normal_incidence_reverses_momentum() {
        let shape = BilliardShape::default_chaotic();
        let start = TrajectoryState::new(Vec2::new(0.2, shape.offset1), Vec2::new(1.5, 0.0));
        let s = evolve(&shape, &start, 1).unwrap()[0];
        assert_eq!(s.on_wall, Some(Wall::ParabolaRight));
        assert_eq!(s.momentum, Vec2::new(-1.5, 0.0));
        let start = TrajectoryState::new(Vec2::new(0.2, 0.3), Vec2::new(0.0, -2.0));
        let s = evolve(&shape, &start, 1).unwrap()[0];
        assert_eq!(s.momentum, Vec2::new(0.0, 2.0));
    }

    #[test]
    fn speed_is_conserved_over_long_runs() {
        let shape = BilliardShape::default_chaotic();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let start = TrajectoryState::random(&shape, 1.0, &mut rng);
        let mut state = start;
        for _ in 0..100_000 {
            step(&shape, &mut state).unwrap();
            assert!(shape.contains(state.position) || state.on_wall.is_some());
        }
        assert!((state.speed() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn collision_points_lie_on_the_named_wall() {
        let shape = BilliardShape::default_chaotic();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let start = TrajectoryState::random(&shape, 1.0, &mut rng);
        for s in evolve(&shape, &start, 2000).unwrap() {
            let f = shape.wall_function(s.on_wall.unwrap(), s.position);
            assert!(f.abs() < 1e-10 * shape.width, "{f}");
        }
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let shape = BilliardShape::default_chaotic();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1u64, 10, 30, 50] {
            let start = TrajectoryState::random(&shape, 1.0, &mut rng);
            let states = evolve(&shape, &start, k).unwrap();
            let end = states[states.len() - 1];
            // Reverse the incoming momentum at the last wall.
            let incoming = if k == 1 { start.momentum } else { states[states.len() - 2].momentum };
            let mut back = end;
            back.momentum = -incoming;
            back.elapsed = 0.0;
            advance_by(&shape, &mut back, end.elapsed).unwrap();
            let err = (back.position - start.position).norm();
            assert!(err < 1e-6 * shape.width, "k = {k}: {err}");
        }
    }

    #[test]
    fn o_average_on_rectangle_orbits() {
        let start = TrajectoryState::new(Vec2::new(0.3, 0.7), Vec2::new(1.0, 0.0));
        assert_eq!(time_average_o(&rect(), &start, 1000).unwrap(), 1.0);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let start = TrajectoryState::new(Vec2::new(0.3, 0.7), Vec2::new(d, d));
        assert_eq!(time_average_o(&rect(), &start, 1000).unwrap(), 0.5);
    }

    #[test]
    fn o_average_for_time_horizon_matches_collision_version_on_rectangle() {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let start = TrajectoryState::new(Vec2::new(0.3, 0.7), Vec2::new(d, d));
        assert_relative_eq!(time_average_o_for(&rect(), &start, 37.5).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_vanishes_on_rectangle() {
        let start = TrajectoryState::new(Vec2::new(0.31, 0.47), Vec2::new(0.6, 0.8));
        let est = lyapunov(&rect(), &start, 4000).unwrap();
        assert!(est.per_collision_exponent.abs() < 1e-3, "{est:?}");
        assert!(est.is_converged());
    }

    #[test]
    fn lyapunov_positive_on_default_shape() {
        let shape = BilliardShape::default_chaotic();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = TrajectoryState::random(&shape, 1.0, &mut rng);
        let est = lyapunov(&shape, &start, 20_000).unwrap();
        assert!(est.per_collision_exponent > 0.05, "{est:?}");
    }

    #[test]
    fn per_collision_exponent_is_speed_independent() {
        let shape = BilliardShape::default_chaotic();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start = TrajectoryState::random(&shape, 1.0, &mut rng);
        let mut fast = start;
        fast.momentum *= 2.0;
        let a = lyapunov(&shape, &start, 5000).unwrap();
        let b = lyapunov(&shape, &fast, 5000).unwrap();
        assert_relative_eq!(a.per_collision_exponent, b.per_collision_exponent, max_relative = 0.01);
        assert_relative_eq!(b.exponent, 2.0 * a.exponent, max_relative = 0.01);
    }

    #[test]
    fn rejects_bad_starts() {
        let shape = BilliardShape::default_chaotic();
        let outside = TrajectoryState::new(Vec2::new(2.0, 0.5), Vec2::new(1.0, 0.0));
        assert!(matches!(evolve(&shape, &outside, 3), Err(ClassicalError::InvalidStart(_))));
        let still = TrajectoryState::new(Vec2::new(0.5, 0.5), Vec2::zeros());
        assert!(matches!(evolve(&shape, &still, 3), Err(ClassicalError::InvalidStart(_))));
        let ok = TrajectoryState::new(Vec2::new(0.5, 0.5), Vec2::new(1.0, 0.0));
        assert!(matches!(lyapunov(&shape, &ok, 10), Err(ClassicalError::TooFewCollisions { .. })));
    }
}
