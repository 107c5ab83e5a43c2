//! Numerical machinery for hyperbolic skew products over expanding
//! interval maps: the invariant measure obtained from monotone sandwich
//! limits, its disintegration along stable fibers via transfer-operator
//! iteration, and quantitative verification of the Hölder and smooth
//! regularity of the disintegrated observables, on a catalog of exactly
//! analyzable systems.
//!
//! Everything is deterministic: reductions are compensated and taken in a
//! fixed order, Monte-Carlo streams are counter-based per sample, and
//! reports serialize byte-identically for identical inputs regardless of
//! the worker-thread count.

pub mod base;
pub mod catalog;
pub mod config;
pub mod disint;
pub mod error;
pub mod eta;
pub mod expr;
pub mod numeric;
pub mod observable;
pub mod regularity;
pub mod report;
pub mod skew;
pub mod suspension;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
