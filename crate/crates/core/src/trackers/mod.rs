//! Hidden-state reconstruction from observations.
//!
//! * [`example2d`]: closed-form inverse of `(h, q)` for `h = e^{x₁} − e^{x₂}`.
//! * [`piecewise`]: forward tracker for scalar piecewise-monotone maps that
//!   resolves the alias ambiguity at critical points from covariation rates.
//! * [`expsum`]: recovery of the state from the power observables of an
//!   exponential-sum map.

pub mod example2d;
pub mod expsum;
pub mod piecewise;

pub use example2d::{invert_2d_example, invert_2d_estimated};
pub use expsum::{beta_inverse, peel_levels, peel_levels_log, reconstruct_expsum, reconstruct_expsum_log, BetaTable, PeelResult};
pub use piecewise::{track_piecewise, BranchRecord, Decision, TrackResult, TrackerParams};
