//! Imputation of missing frames in intermittent heatmap sequences.
//!
//! A continuous-latent encoder–decoder (convolutional GRU consolidation with
//! ODE-evolved latents, flow/mask/residual frame composition) alongside
//! classical imputers, metrics, a synthetic multi-domain generator and the
//! experiment protocols that compare them.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod metrics;
pub mod model;
pub mod odesolve;
pub mod synthdata;

pub use error::{Error, Result};
