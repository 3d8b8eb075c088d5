//! Numerical core for direct density ratio preference optimization over
//! finite prompt/response worlds.
//!
//! The crate is organized around a small pipeline:
//!
//! - [`world`]: ground-truth generative models (preferred/unpreferred
//!   response distributions, the reference mixture) and seeded samplers for
//!   unpaired and paired feedback data, including the cyclic preference
//!   world that Bradley-Terry rewards cannot represent.
//! - [`policy`]: tabular softmax policies with exact probabilities and
//!   analytic log-probability gradients.
//! - [`ratio`]: density-ratio fields: the true ratio `g* = p⁻/p⁺`, the
//!   reference ratio `r* = p_ref/p⁺`, the model ratio `g_θ`, and the implied
//!   unpreferred-distribution estimator `p̃_θ`.
//! - [`losses`]: convex generators, Bregman divergences, and the density
//!   ratio loss family (population, empirical, KL-regularized, and the
//!   smoothed practical variant) with analytic gradients.
//! - [`baselines`]: per-pair preference losses (DPO, IPO, SPPO, KTO, BCO)
//!   in the unified log-ratio framework, plus Bradley-Terry reward fitting.
//! - [`optimizer`]: deterministic first-order training loops with
//!   gradient-norm telemetry and a finite-difference gradient auditor.
//! - [`metrics`]: the L²(p⁺) estimation error, the ratio-to-distribution
//!   error bound check, and log-log scaling fits.
//!
//! Everything here is `no_std + alloc`; IO, file formats, and the CLI live
//! in the companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod ratio;
pub mod rng;
pub mod world;

pub use mat::Mat;
pub use policy::TabularPolicy;
pub use world::{FiniteWorld, PairedDataset, PairwiseWorld, UnpairedDataset};
