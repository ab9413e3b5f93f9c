//! Bicausal couplings and bicausal Monge transports between laws of SDEs
//! on path space.
//!
//! The crate simulates discretized path laws ([`sde`]), builds couplings
//! between them ([`coupling`]), scores couplings against separable and
//! `L^p` path costs together with explicit optimal values ([`cost`]), and
//! certifies the structural properties of the resulting ensembles
//! statistically ([`verify`]).

pub mod cost;
pub mod coupling;
pub mod error;
pub mod expr;
pub mod io;
pub mod linalg;
pub mod presets;
pub mod rng;
pub mod sde;
pub mod verify;

pub use coupling::CoupledEnsemble;
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use sde::{PathEnsemble, PathView, SamplePath, SdeModel, TimeGrid};
