//! Simulation and reconstruction of diffusions observed through non-injective
//! measurement maps.
//!
//! The crate simulates hidden diffusion paths ([`sdesim`]), pushes them through
//! observation maps ([`obsmaps`]), estimates quadratic-covariation rates of the
//! observations ([`qvest`]), and reconstructs the hidden state from the
//! observations alone ([`trackers`]). The [`symmetry`] module searches for the
//! rigid-motion symmetries that make reconstruction impossible, and
//! [`harness`] runs reproducible Monte Carlo experiments over all of it.

pub mod error;
pub mod harness;
pub mod numeric;
pub mod obsmaps;
pub mod qvest;
pub mod rng;
pub mod sdesim;
pub mod symmetry;
pub mod trackers;

pub use error::{Error, Result};
