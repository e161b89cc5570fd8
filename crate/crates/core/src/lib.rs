//! Spatio-temporal modelling of areal count data.
//!
//! This crate bundles the numerical machinery for a small-area risk analysis
//! pipeline over lattice (polygon) data observed across years:
//!
//! * [`lattice`] — regions, contiguity rules and symmetric binary adjacency
//!   graphs built from shared polygon vertices.
//! * [`autocorr`] — global and local Moran's I with analytic (randomisation)
//!   and permutation inference.
//! * [`glm`] — negative binomial regression for panel counts, an L1
//!   (LASSO) path solver and cross-validated penalty selection.
//! * [`carmodel`] — Bayesian spatio-temporal conditional autoregressive
//!   models fitted by Metropolis-within-Gibbs MCMC, with DIC, a bridge
//!   estimate of the marginal likelihood and relative-risk surfaces.
//! * [`fusion`] — point-in-polygon aggregation, income estimates from
//!   bracketed tables, count imputation and panel assembly.
//! * [`synth`] — seeded synthetic scenarios (Voronoi lattices, spatial and
//!   temporal random effects, negative binomial counts) for end-to-end
//!   validation.
//!
//! The crate is `no_std`-compatible (it only needs `alloc`); all file and
//! terminal IO lives in the companion CLI crate. Everything is deterministic
//! given explicit seeds: samplers take a seed and derive independent
//! sub-streams, so results do not depend on thread counts or iteration
//! order.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autocorr;
pub mod carmodel;
mod error;
pub mod fusion;
pub mod glm;
pub mod lattice;
pub mod linalg;
pub mod rngutil;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
