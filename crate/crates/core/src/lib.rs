//! Producibility-aware topology optimization for laser powder bed fusion.
//!
//! The crate covers the whole loop: voxel finite elements, an inherent-strain
//! build simulator, crack indices, design filters, MMA-based topology
//! optimization, training-set generation and selection, a volumetric U-Net
//! surrogate with reverse-mode gradients, and the combined optimization that
//! trades performance against the surrogate's maximum crack index.

pub mod buildsim;
pub mod coupon;
pub mod crack;
pub mod dataset;
pub mod error;
pub mod fea;
pub mod filters;
pub mod fieldio;
pub mod grid;
pub mod mma;
pub mod optimizer;
pub mod pato;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
