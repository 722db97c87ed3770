//! Causally-consistent generative models trained under differential privacy,
//! together with the harnesses used to measure what they leak and what they
//! are still good for.
//!
//! The crate is organised bottom-up:
//!
//! * [`scg`] structural causal graphs and ground-truth sampling,
//! * [`dataset`] the tabular container with observation masks plus CSV I/O,
//! * [`ndcore`] small dense networks with explicit backward passes,
//! * [`genmodel`] VAE / causal VAE factorizations, ELBO and training,
//! * [`dptrain`] per-example clipping, Gaussian noise and the RDP accountant,
//! * [`clf`] the classifier zoo shared by the attack and utility harnesses,
//! * [`attack`] the shadow-model membership inference attack,
//! * [`utility`] downstream-utility comparisons, sweeps and pairplots,
//! * [`theorylab`] convex ERM experiments on causal vs associational sensitivity,
//! * [`pipeline`] manifests, run directories and report rendering.

pub mod attack;
pub mod clf;
pub mod dataset;
pub mod dptrain;
pub mod genmodel;
pub mod ndcore;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scg;
pub mod svg;
pub mod theorylab;
pub mod utility;

pub use dataset::Dataset;
pub use scg::{CausalGraph, Mechanism, Noise, VarKind, Variable};
