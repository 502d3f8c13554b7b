//! A desk-scale laboratory for order-expressive masked diffusion language
//! models: forward/reverse kernels over an absorbing mask state, free-form
//! per-position noise schedulers, the velocity-decomposed evidence bound,
//! learnable-order scheduler heads trained jointly with a tiny denoiser, and
//! brute-force oracles that verify the provable reductions (autoregressive,
//! block-autoregressive, vocabulary-wise) on enumerable instances.

pub mod core;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod objective;
pub mod corpus;
pub mod oracles;
pub mod trainer;
pub mod scheduler;

pub use error::{Error, Result};
