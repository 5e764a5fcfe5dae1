//! Toy-scale diffusion transformer with in-context conditioning.
//!
//! The model concatenates noisy latent tokens with reference-context tokens
//! into one sequence and denoises with joint attention. Three efficiency
//! mechanisms are implemented on top of that baseline and can be toggled
//! independently:
//!
//! * **dynamic token selection** — a learned scorer keeps only the most
//!   informative context tokens inside each block,
//! * **decoupled attention** — context tokens attend only to themselves,
//!   noisy tokens attend to everything, which makes the context pathway
//!   independent of the denoising trajectory,
//! * **selective context caching** — context key/value tensors are computed
//!   once (first sampling step, important layers only) and reused.
//!
//! [`cost`] provides the closed-form interaction counts for all nine
//! mechanism combinations plus a measured counter that must agree exactly,
//! and [`analysis`] holds the redundancy diagnostics that motivate the
//! design. Everything is deterministic: same config + seed, same bits.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod caching;
pub mod checkpoint;
pub mod config;
pub mod cost;
mod error;
pub mod kernels;
pub(crate) mod mat;
pub mod model;
pub mod selection;
pub mod task;
pub mod tensor;

pub use error::CoreError;
pub type Result<T> = std::result::Result<T, CoreError>;
