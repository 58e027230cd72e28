//! Dynamic PET toolkit: 2D parallel-beam projector, two-tissue FDG kinetics,
//! voxel-wise Levenberg-Marquardt fitting, MLEM / MAP-OSL / PGM-PET / ICM-EM
//! reconstruction, phantom simulation and bias/noise metrics.

pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod fitting;
pub mod io;
pub mod kinetics;
pub mod metrics;
pub mod projector;
pub mod recon;
pub mod simulate;
