//! Analytic oracles and evaluation metrics.

mod classifier;
mod diagnostics;
mod gaussian;
mod mmd;
mod oracles;

pub use classifier::{
    conditional_coherence, cross_modal_coherence, fid_raw, fid_surrogate, latent_probe_accuracy, probe_accuracy,
    unconditional_coherence, ClassifierConfig, SoftmaxClassifier, ToyClassifier,
};
pub use diagnostics::{chain_diagnostics, latent_interpolation, ChainReport};
pub use gaussian::{
    analytic_gaussian_posterior, frechet_distance_gaussians, grid_moments_2d, posterior_precision,
    GaussianMoments,
};
pub use mmd::{median_bandwidth, mmd_rbf, mmd_rbf_biased};
pub use oracles::{oracle_suite, OracleCheck};
