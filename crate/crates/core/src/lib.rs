//! Recovering the distribution of random parameters in a differential
//! equation from the distribution of its measurements.
//!
//! The forward model `y = G(u)` pushes a parameter law `ρ_u` to a data law
//! `ρ_y`. Given samples (or a density) of the observed data law, the crate
//! evolves an ensemble of parameter particles along the Wasserstein gradient
//! flow of a misfit `D(G#ρ_u, ρ_y*)`, using kernel density estimates for the
//! scores and adjoint solves for `∇G^T ξ`.
//!
//! Module map:
//! - [`ensemble`]: particle ensembles, samplers, Gaussian KDE and CSV I/O.
//! - [`forward`]: forward maps and their adjoint-gradient actions.
//! - [`divergence`]: reference densities and per-particle drivers.
//! - [`flow`]: time integrators (KL/W2 transport, χ² weight flow, Langevin, GD).
//! - [`theory`]: 1-D distances and the linear well-posedness checks.
//! - [`experiment`]: config files, presets and the batch commands.
//!
//! ```
//! use pushflow::divergence::ReferenceDensity;
//! use pushflow::ensemble::{sample_gaussian, sample_uniform};
//! use pushflow::flow::{run_flow, FlowConfig};
//! use pushflow::forward::{push_forward, LinearMap};
//!
//! # fn main() -> pushflow::Result<()> {
//! let map = LinearMap::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.75]])?;
//! let truth = sample_gaussian(&[0.0, 0.0], &nalgebra::DMatrix::identity(2, 2), 300, 1)?;
//! let reference = ReferenceDensity::from_samples(push_forward(&map, &truth)?);
//! let init = sample_uniform(&[-3.0, -3.0], &[3.0, 3.0], 300, 2)?;
//! let traj = run_flow(&init, &map, &reference, &FlowConfig::kl(0.05, 30))?;
//! let e = traj.energy_values();
//! assert!(e.last().unwrap() < &e[0]);
//! # Ok(())
//! # }
//! ```

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergence;
pub mod ensemble;
mod error;
pub mod exec;
pub mod experiment;
pub mod flow;
pub mod forward;
pub mod theory;

pub use error::{Error, Result};
