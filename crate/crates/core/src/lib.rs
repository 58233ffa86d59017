//! Ordered absorbing discrete diffusion.
//!
//! A masked (absorbing-state) diffusion model over categorical sequences in
//! which token categories are destroyed, and therefore generated, in a
//! configurable order. The per-category mask schedule removes an equal
//! share of marginal mutual information per step while destroying one
//! category group at a time.

pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod ordering;
pub mod schedule;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
