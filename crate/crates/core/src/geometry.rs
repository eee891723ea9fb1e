//! Billiard domain: the rectangle `[0, W] x [0, H]` whose right and top walls
//! are replaced by parabolas bulging into the interior.
//!
//! ```text
//!   right wall:  x = W - c1 (y - a1)^2
//!   top wall:    y = H - c2 (x - a2)^2
//! ```
//!
//! The left and bottom walls stay flat. The region excluded from the
//! rectangle is the union of the two parabolic strips; the two strips share a
//! small corner piece near `(W, H)`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::quadrature::GaussLegendre;

pub type Vec2 = Vector2<f64>;

/// Relative tolerance (in units of the larger rectangle side) used to decide
/// whether a point lies on a wall.
pub const WALL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wall {
    Left,
    Bottom,
    ParabolaRight,
    ParabolaTop,
}

impl Wall {
    pub const ALL: [Wall; 4] = [
        Wall::Left,
        Wall::Bottom,
        Wall::ParabolaRight,
        Wall::ParabolaTop,
    ];
}

impl fmt::Display for Wall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Wall::Left => "left",
            Wall::Bottom => "bottom",
            Wall::ParabolaRight => "parabola-right",
            Wall::ParabolaTop => "parabola-top",
        };
        f.write_str(s)
    }
}

/// One violated shape rule. `field` names the offending record key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeViolation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for ShapeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid billiard shape: {}", join_violations(.0))]
    InvalidShape(Vec<ShapeViolation>),
    #[error("ray from ({x}, {y}) found no wall intersection")]
    NoIntersection { x: f64, y: f64 },
    #[error("point ({x}, {y}) is {distance:e} away from the {wall} wall")]
    PointOffWall { wall: Wall, x: f64, y: f64, distance: f64 },
}

fn join_violations(v: &[ShapeViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Enclosing rectangle plus two inward parabolic walls.
///
/// Construct with [`BilliardShape::new`], which enforces the asymmetry rules,
/// or [`BilliardShape::new_test_mode`], which additionally admits zero
/// curvatures (integrable rectangle references).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilliardShape {
    pub width: f64,
    pub height: f64,
    pub curvature1: f64,
    pub offset1: f64,
    pub curvature2: f64,
    pub offset2: f64,
}

impl BilliardShape {
    pub fn new(
        width: f64,
        height: f64,
        curvature1: f64,
        offset1: f64,
        curvature2: f64,
        offset2: f64,
    ) -> Result<Self, GeometryError> {
        let shape = Self { width, height, curvature1, offset1, curvature2, offset2 };
        let violations = shape.violations(false);
        if violations.is_empty() {
            Ok(shape)
        } else {
            Err(GeometryError::InvalidShape(violations))
        }
    }

    /// Like [`BilliardShape::new`] but zero curvatures and symmetric offsets
    /// are allowed.
    pub fn new_test_mode(
        width: f64,
        height: f64,
        curvature1: f64,
        offset1: f64,
        curvature2: f64,
        offset2: f64,
    ) -> Result<Self, GeometryError> {
        let shape = Self { width, height, curvature1, offset1, curvature2, offset2 };
        let violations = shape.violations(true);
        if violations.is_empty() {
            Ok(shape)
        } else {
            Err(GeometryError::InvalidShape(violations))
        }
    }

    /// The plain `width x height` rectangle (test mode only).
    pub fn rectangle(width: f64, height: f64) -> Self {
        Self::new_test_mode(width, height, 0.0, height / 2.0, 0.0, width / 2.0)
            .expect("rectangle with positive sides")
    }

    /// First of the three default ensemble members.
    pub fn default_chaotic() -> Self {
        Self::new(1.0, 1.13, 0.2, 0.4, 0.3, 0.6).expect("default shape is valid")
    }

    pub fn is_rectangle(&self) -> bool {
        self.curvature1 == 0.0 && self.curvature2 == 0.0
    }

    /// Every rule the shape breaks. `test_mode` relaxes the curvature and
    /// asymmetry rules but keeps the ones needed for a well-posed domain.
    pub fn violations(&self, test_mode: bool) -> Vec<ShapeViolation> {
        let mut out = Vec::new();
        macro_rules! push {
            ($field:expr, $rule:expr $(,)?) => {
                out.push(ShapeViolation { field: $field, rule: $rule.to_string() })
            };
        }
        let all = [
            self.width,
            self.height,
            self.curvature1,
            self.offset1,
            self.curvature2,
            self.offset2,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            push!("shape", "all fields must be finite");
            return out;
        }
        if self.width <= 0.0 {
            push!("width", "must be positive");
        }
        if self.height <= 0.0 {
            push!("height", "must be positive");
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return out;
        }
        if test_mode {
            if self.curvature1 < 0.0 {
                push!("curvature1", "must be non-negative (parabola bulges inward)");
            }
            if self.curvature2 < 0.0 {
                push!("curvature2", "must be non-negative (parabola bulges inward)");
            }
        } else {
            if self.curvature1 <= 0.0 {
                push!("curvature1", "must be positive (parabola bulges inward)");
            }
            if self.curvature2 <= 0.0 {
                push!("curvature2", "must be positive (parabola bulges inward)");
            }
            if self.curvature1 == self.curvature2 {
                push!(
                    "curvature2",
                    "symmetry rule: curvature1 and curvature2 must differ",
                );
            }
            if self.offset1 == self.height / 2.0 {
                push!("offset1", "symmetry rule: must differ from height/2");
            }
            if self.offset2 == self.width / 2.0 {
                push!("offset2", "symmetry rule: must differ from width/2");
            }
        }
        if !(0.0..=self.height).contains(&self.offset1) {
            push!("offset1", "vertex must lie within [0, height]");
        }
        if !(0.0..=self.width).contains(&self.offset2) {
            push!("offset2", "vertex must lie within [0, width]");
        }
        if !out.is_empty() {
            return out;
        }
        let depth1 = self.max_depth_right();
        let depth2 = self.max_depth_top();
        if self.curvature1 > 0.0 && self.offset2 >= self.width - depth1 {
            push!(
                "curvature1",
                "cuts overlap: the top vertex must lie left of the right parabolic strip",
            );
        }
        if self.curvature2 > 0.0 && self.offset1 >= self.height - depth2 {
            push!(
                "curvature2",
                "cuts overlap: the right vertex must lie below the top parabolic strip",
            );
        }
        if out.is_empty() && self.area() < 0.5 * self.width * self.height {
            push!("shape", "parabolic cuts remove more than half of the rectangle");
        }
        out
    }

    /// Largest horizontal depth of the right parabolic strip.
    pub fn max_depth_right(&self) -> f64 {
        let d = self.offset1.max(self.height - self.offset1);
        self.curvature1 * d * d
    }

    /// Largest vertical depth of the top parabolic strip.
    pub fn max_depth_top(&self) -> f64 {
        let d = self.offset2.max(self.width - self.offset2);
        self.curvature2 * d * d
    }

    /// x-coordinate of the right wall at height `y`.
    #[inline]
    pub fn right_wall_x(&self, y: f64) -> f64 {
        let d = y - self.offset1;
        self.width - self.curvature1 * d * d
    }

    /// y-coordinate of the top wall at abscissa `x`.
    #[inline]
    pub fn top_wall_y(&self, x: f64) -> f64 {
        let d = x - self.offset2;
        self.height - self.curvature2 * d * d
    }

    /// Strict interior test; boundary points are outside.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x > 0.0 && p.y > 0.0 && p.x < self.right_wall_x(p.y) && p.y < self.top_wall_y(p.x)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Signed constraint values along a ray `p + t d`, written as quadratics
    /// `a t^2 + b t + c` that are positive inside the domain.
    fn constraint(&self, wall: Wall, p: Vec2, d: Vec2) -> (f64, f64, f64) {
        match wall {
            Wall::Left => (0.0, d.x, p.x),
            Wall::Bottom => (0.0, d.y, p.y),
            Wall::ParabolaRight => {
                let c1 = self.curvature1;
                let u = p.y - self.offset1;
                (-c1 * d.y * d.y, -(2.0 * c1 * d.y * u + d.x), self.width - c1 * u * u - p.x)
            }
            Wall::ParabolaTop => {
                let c2 = self.curvature2;
                let u = p.x - self.offset2;
                (-c2 * d.x * d.x, -(2.0 * c2 * d.x * u + d.y), self.height - c2 * u * u - p.y)
            }
        }
    }

    /// Time of flight along unit direction `dir` until the ray leaves the
    /// domain, and the wall it hits.
    pub fn boundary_distance(&self, point: Vec2, dir: Vec2) -> Result<(f64, Wall), GeometryError> {
        self.exit(point, dir, None)
    }

    /// Exit time for a ray that may start on `on_wall`; the trivial root at
    /// `t = 0` of that wall's constraint is removed analytically.
    pub(crate) fn exit(
        &self,
        point: Vec2,
        dir: Vec2,
        on_wall: Option<Wall>,
    ) -> Result<(f64, Wall), GeometryError> {
        let mut best: Option<(f64, Wall)> = None;
        for wall in Wall::ALL {
            let (a, b, c) = self.constraint(wall, point, dir);
            let t = if on_wall == Some(wall) {
                // c == 0 on the wall: remaining root of a t + b.
                (a != 0.0 && -b / a > 0.0).then(|| -b / a)
            } else {
                first_positive_root(a, b, c)
            };
            if let Some(t) = t {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, wall));
                }
            }
        }
        best.ok_or(GeometryError::NoIntersection { x: point.x, y: point.y })
    }

    /// Signed implicit function of a wall; zero on the wall, negative inside.
    pub fn wall_function(&self, wall: Wall, p: Vec2) -> f64 {
        match wall {
            Wall::Left => -p.x,
            Wall::Bottom => -p.y,
            Wall::ParabolaRight => {
                let u = p.y - self.offset1;
                p.x - self.width + self.curvature1 * u * u
            }
            Wall::ParabolaTop => {
                let u = p.x - self.offset2;
                p.y - self.height + self.curvature2 * u * u
            }
        }
    }

    /// Inward unit normal of `wall` at `point`.
    pub fn boundary_normal(&self, wall: Wall, point: Vec2) -> Result<Vec2, GeometryError> {
        let f = self.wall_function(wall, point);
        let tol = WALL_TOLERANCE * self.width.max(self.height);
        if f.abs() > tol {
            return Err(GeometryError::PointOffWall {
                wall,
                x: point.x,
                y: point.y,
                distance: f.abs(),
            });
        }
        Ok(self.normal_unchecked(wall, point))
    }

    pub(crate) fn normal_unchecked(&self, wall: Wall, p: Vec2) -> Vec2 {
        match wall {
            Wall::Left => Vec2::new(1.0, 0.0),
            Wall::Bottom => Vec2::new(0.0, 1.0),
            Wall::ParabolaRight => {
                let g = Vec2::new(1.0, 2.0 * self.curvature1 * (p.y - self.offset1));
                -g / g.norm()
            }
            Wall::ParabolaTop => {
                let g = Vec2::new(2.0 * self.curvature2 * (p.x - self.offset2), 1.0);
                -g / g.norm()
            }
        }
    }

    /// Lower end of the corner piece excluded by both strips, i.e. the
    /// height where the top wall meets `x = W`.
    pub fn corner_start(&self) -> f64 {
        self.top_wall_y(self.width)
    }

    /// Left end of the doubly-excluded corner interval at height `y`, for
    /// `y` in `[corner_start, H]`.
    pub fn corner_left(&self, y: f64) -> f64 {
        let r = ((self.height - y).max(0.0) / self.curvature2).sqrt();
        self.right_wall_x(y).max(self.offset2 + r)
    }

    /// Sub-intervals of `[corner_start, H]` on which `corner_left` is smooth.
    /// Empty when the corner piece has zero area.
    pub fn corner_pieces(&self) -> Vec<(f64, f64)> {
        if self.curvature1 <= 0.0 || self.curvature2 <= 0.0 {
            return Vec::new();
        }
        let lo = self.corner_start();
        let hi = self.height;
        if hi <= lo {
            return Vec::new();
        }
        // Breakpoints where the right wall crosses the top wall's right branch.
        let g = |y: f64| {
            let r = ((self.height - y).max(0.0) / self.curvature2).sqrt();
            self.right_wall_x(y) - self.offset2 - r
        };
        let samples = 512;
        let mut cuts = vec![lo];
        let mut prev_y = lo;
        let mut prev_g = g(lo);
        for k in 1..=samples {
            let y = lo + (hi - lo) * k as f64 / samples as f64;
            let gy = g(y);
            if prev_g.signum() != gy.signum() && prev_g != 0.0 {
                cuts.push(bisect(&g, prev_y, y));
            }
            prev_y = y;
            prev_g = gy;
        }
        cuts.push(hi);
        cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect()
    }

    /// Area of the domain: rectangle minus both strips plus the shared corner.
    pub fn area(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let (a1, a2) = (self.offset1, self.offset2);
        let strip1 = self.curvature1 * ((h - a1).powi(3) + a1.powi(3)) / 3.0;
        let strip2 = self.curvature2 * ((w - a2).powi(3) + a2.powi(3)) / 3.0;
        let rule = GaussLegendre::new(20);
        let corner: f64 = self
            .corner_pieces()
            .into_iter()
            .map(|(lo, hi)| rule.integrate_panels(lo, hi, 8, |y| w - self.corner_left(y)))
            .sum();
        w * h - strip1 - strip2 + corner
    }
}

impl fmt::Display for BilliardShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "width={} height={} curvature1={} offset1={} curvature2={} offset2={}",
            self.width, self.height, self.curvature1, self.offset1, self.curvature2, self.offset2
        )
    }
}

fn bisect<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Smallest `t > 0` with `a t^2 + b t + c = 0`, given `c > 0` (start inside).
fn first_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a == 0.0 {
        return if b < 0.0 { Some(-c / b) } else { None };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { f64::NAN };
    [r1, r2]
        .into_iter()
        .filter(|t| t.is_finite() && *t > 0.0)
        .min_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example_shape() -> BilliardShape {
        BilliardShape::new(1.0, 1.13, 0.2, 0.4, 0.3, 0.6).unwrap()
    }

    #[test]
    fn contains_examples() {
        let s = example_shape();
        assert!(s.contains(Vec2::new(0.01, 0.01)));
        // The right wall at y = 0.4 is its vertex, x = 1 exactly: (0.999, 0.4)
        // is still inside, the vertex itself is not.
        assert_eq!(s.right_wall_x(0.4), 1.0);
        assert!(s.contains(Vec2::new(0.999, 0.4)));
        assert!(!s.contains(Vec2::new(1.0, 0.4)));
        assert!(!s.contains(Vec2::new(0.5, 1.2)));
        assert!(!s.contains(Vec2::new(0.0, 0.5)));
        assert!(!s.contains(Vec2::new(0.5, 0.0)));
    }

    #[test]
    fn boundary_distance_examples() {
        let s = example_shape();
        let (t, w) = s.boundary_distance(Vec2::new(0.5, 0.5), Vec2::new(-1.0, 0.0)).unwrap();
        assert_relative_eq!(t, 0.5, epsilon = 1e-15);
        assert_eq!(w, Wall::Left);

        let (t, w) = s.boundary_distance(Vec2::new(0.1, 0.4), Vec2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(t, 0.9, epsilon = 1e-15);
        assert_eq!(w, Wall::ParabolaRight);
    }

    #[test]
    fn normal_examples() {
        let s = example_shape();
        let n = s.boundary_normal(Wall::Left, Vec2::new(0.0, 0.3)).unwrap();
        assert_eq!(n, Vec2::new(1.0, 0.0));
        let n = s.boundary_normal(Wall::ParabolaRight, Vec2::new(1.0, 0.4)).unwrap();
        assert_relative_eq!(n.x, -1.0);
        assert_relative_eq!(n.y, 0.0);
        let y = 0.9;
        let n = s
            .boundary_normal(Wall::ParabolaRight, Vec2::new(s.right_wall_x(y), y))
            .unwrap();
        assert_relative_eq!(n.x, -0.980_580_675_690_920_2, epsilon = 1e-12);
        assert_relative_eq!(n.y, -0.196_116_135_138_184_05, epsilon = 1e-12);
    }

    #[test]
    fn normal_rejects_points_off_the_wall() {
        let s = example_shape();
        let err = s.boundary_normal(Wall::ParabolaTop, Vec2::new(0.5, 0.5)).unwrap_err();
        assert!(matches!(err, GeometryError::PointOffWall { wall: Wall::ParabolaTop, .. }));
    }

    #[test]
    fn area_examples() {
        let r = BilliardShape::rectangle(1.0, 1.13);
        assert_eq!(r.area(), 1.13);
        let s = BilliardShape::new_test_mode(1.0, 1.0, 0.3, 0.5, 0.0, 0.5).unwrap();
        assert_relative_eq!(s.area(), 0.975, epsilon = 1e-14);
    }

    #[test]
    fn area_decreases_with_curvature() {
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let s = BilliardShape::new(1.0, 1.13, 0.02 * k as f64, 0.4, 0.3, 0.6).unwrap();
            assert!(s.area() < prev);
            prev = s.area();
        }
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let s = BilliardShape::new(1.0, 1.13, 0.25, 0.4, 0.03 * k as f64, 0.6).unwrap();
            assert!(s.area() < prev);
            prev = s.area();
        }
    }

    #[test]
    fn symmetry_rules_are_reported_together() {
        let err = BilliardShape::new(1.0, 1.0, 0.2, 0.5, 0.2, 0.5).unwrap_err();
        let GeometryError::InvalidShape(v) = err else { panic!() };
        let fields: Vec<_> = v.iter().map(|v| v.field).collect();
        assert!(fields.contains(&"curvature2"));
        assert!(fields.contains(&"offset1"));
        assert!(fields.contains(&"offset2"));
        assert!(v.iter().any(|v| v.rule.contains("symmetry rule")));
    }

    #[test]
    fn zero_curvature_needs_test_mode() {
        assert!(BilliardShape::new(1.0, 1.0, 0.0, 0.3, 0.2, 0.4).is_err());
        assert!(BilliardShape::new_test_mode(1.0, 1.0, 0.0, 0.3, 0.2, 0.4).is_ok());
    }

    #[test]
    fn overlapping_cuts_are_rejected() {
        // Deep right strip reaching past the top vertex.
        assert!(BilliardShape::new(1.0, 1.0, 2.5, 0.5, 0.1, 0.6).is_err());
    }

    #[test]
    fn first_positive_root_cases() {
        assert_eq!(first_positive_root(0.0, -2.0, 1.0), Some(0.5));
        assert_eq!(first_positive_root(0.0, 2.0, 1.0), None);
        // (t - 1)(t - 3) = t^2 - 4t + 3
        assert_relative_eq!(first_positive_root(1.0, -4.0, 3.0).unwrap(), 1.0);
        // -(t - 2)(t + 1) = -t^2 + t + 2
        assert_relative_eq!(first_positive_root(-1.0, 1.0, 2.0).unwrap(), 2.0);
        assert_eq!(first_positive_root(1.0, 0.0, 1.0), None);
    }
}
