//! Cooperative cloud/edge learning for fog radio access networks.
//!
//! Edge nodes (ENs) encode their local channel observations into short uplink
//! messages, a cloud network turns the combined fronthaul signal into downlink
//! messages, and each EN decides its transmit power from its own observation
//! plus what it received. All networks are trained jointly, end to end and
//! without labels, by ascending a network utility through the fronthaul
//! channel, including noisy and finite-capacity links.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation, MLPs, Adam.
//! - [`env`]: channel sampling and the sum-rate / energy-efficiency utilities.
//! - [`fronthaul`]: resource plans, channel transfer functions, OMA/NOMA
//!   combining and the stochastic quantizer.
//! - [`model`]: the three-stage cooperative model, training and evaluation.
//! - [`baselines`]: ideal/no cooperation networks, projected gradient ascent,
//!   max and random power.
//! - [`harness`]: experiment configs, sweeps, CSV results and timing.
//! - [`diagnostics`]: quantizer and gradient self-checks.

pub mod autodiff;
pub mod baselines;
pub mod diagnostics;
pub mod env;
mod error;
pub mod fronthaul;
pub mod harness;
pub mod model;
pub mod rng;

pub use error::{Error, Result};

/// The guide's chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/environment.md")]
    struct Environment;
    #[doc = include_str!("../../../book/src/fronthaul.md")]
    struct Fronthaul;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/baselines.md")]
    struct Baselines;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
