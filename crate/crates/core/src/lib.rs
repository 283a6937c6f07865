#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Synthetic implied-volatility surfaces, a feature-controllable VAE over
//! them, static-arbitrage diagnostics and latent-space repair.

pub mod arbitrage;
pub mod cvae;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
mod linalg;
pub mod nn;
pub mod pricing;
pub mod repair;
pub mod surfaces;

pub use error::{Error, Result};
pub use features::{extract_features, Feature, FeatureVector};
pub use surfaces::{GridSpec, IVSurface, TotalVarianceSurface};
