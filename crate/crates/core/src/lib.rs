//! Monotonic linear interpolation diagnostics for small fully-connected networks.

pub mod data;
pub mod error;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod landscape;
pub mod linear2;
pub mod nn;
pub mod nqm;
pub mod optim;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};
