//! Quantum and classical billiards with two parabolic walls, plus the
//! level-statistics toolkit used to compare their spectra with Poisson and
//! GOE predictions.

pub mod classical;
pub mod geometry;
pub mod perturb;
pub mod quantum;
pub mod quadrature;
pub mod stats;

pub use geometry::{BilliardShape, Vec2, Wall};
