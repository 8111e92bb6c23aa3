//! Bayesian functional PCA with multilevel partition priors.
//!
//! Curves recorded on many channels of many subjects are smoothed and reduced to
//! functional principal component scores; a Gibbs sampler then clusters the
//! scores at a common, group-specific and subject-specific level, and the label
//! draws are summarized into partition estimates with credible balls.

pub mod bspline;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod fpca;
pub mod hyperparams;
pub mod io;
pub mod model;
pub mod partitions;
pub mod pipeline;
pub mod sampler;
pub mod simgen;

pub use data::{FunctionalDataset, Group};
pub use error::{Error, Result};
pub use fpca::EigenBasis;
