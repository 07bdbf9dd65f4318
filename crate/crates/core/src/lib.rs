//! Port-Hamiltonian constrained social navigation.
//!
//! The crate contains a crowd simulator with ORCA and social-force
//! pedestrians, a port-Hamiltonian policy core, a spatial-temporal
//! attention encoder that produces learned Hamiltonian terms, a leapfrog
//! diffusion action head, and a PPO training and evaluation harness.

pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod env;
pub mod eval;
pub mod ph;
pub mod policy;
pub mod tensor;
pub mod train;
