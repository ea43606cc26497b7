//! Delay-dependent input-to-state stability tooling for generalized Persidskii
//! systems.
//!
//! The crate is `no_std` (with `alloc`). It covers affine LMI feasibility
//! ([`lmi`]), the delayed sector-bounded system class and its simulation
//! ([`model`]), Lyapunov-Krasovskii certification and delay-margin search
//! ([`certify`]), structured H-infinity observers with an EKF baseline
//! ([`observer`]), stability-constrained Koopman identification ([`koopman`]),
//! the MPPI controller ([`mppi`]) and a simulated PMSM testbench ([`pmsm`]).
//! File formats, configuration and the command line live in the companion
//! `persidskii-cli` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod certify;
pub mod error;
pub mod koopman;
pub mod lmi;
pub mod model;
pub mod mppi;
pub mod observer;
pub mod pmsm;
pub mod stats;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
