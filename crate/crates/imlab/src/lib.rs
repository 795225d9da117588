//! Spectral laboratory for inertial manifolds of parabolic equations on the
//! periodic box `(-π,π)³`.
//!
//! The crate is layered bottom-up:
//! [`lattice`] (exact integer lattice arithmetic) →
//! [`field`] (Fourier fields and operators) →
//! [`nonlinearity`] (model nonlinearities and their truncation) →
//! [`evolution`] (exponential integrator and monitors) →
//! [`cone`] (quadratic-form cone checks and averaging deviation) →
//! [`manifold`] (graph construction, tracking, reduced dynamics) →
//! [`app`] (configuration, presets, persistence, CLI).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod app;
pub mod cone;
pub mod error;
pub mod evolution;
mod fft;
pub mod field;
pub mod fit;
pub mod lattice;
pub mod manifold;
pub mod nonlinearity;
pub mod random;

pub use error::{ImError, Result};
