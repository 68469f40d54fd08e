//! Quantitative operando microscopy toolkit.
//!
//! The crate covers the full workflow used to extract material models from
//! noisy microscopy image stacks:
//!
//! - [`fieldstore`]: canonical image-stack containers with NPY + sidecar and
//!   CSV interchange, plus provenance-carrying analysis reports.
//! - [`chsim`]: pseudo-spectral Cahn-Hilliard simulation of phase separation
//!   with composition-dependent mobility.
//! - [`noisegen`]: seeded Gaussian / Poisson / impulse / composite corruption.
//! - [`imetrics`]: MSE, PSNR, SSIM, and 2-D autocorrelation.
//! - [`denoise`]: classical filters and a linear blind-spot denoiser.
//! - [`legendre`]: shifted orthonormal Legendre material-model parameterization.
//! - [`recover`]: PDE-constrained recovery of the material model by multiple
//!   shooting and Levenberg-Marquardt, with bootstrap uncertainty bands.
//! - [`stxm`]: spectro-microscopy composition maps (registration, optical
//!   density, two-energy and NNLS unmixing, bootstrap uncertainty).
//! - [`neutron`]: radiography transmission normalization, attenuation change,
//!   active-fraction and depth-profile analysis.
//! - [`optical`]: color-video phase classification, particle segmentation,
//!   state-of-charge and population statistics.

pub mod chsim;
pub mod denoise;
mod error;
pub mod fft;
pub mod fieldstore;
pub mod imetrics;
pub mod legendre;
pub mod neutron;
pub mod noisegen;
pub mod optical;
mod otsu;
pub mod recover;
pub mod stxm;

pub use error::{Error, Result};
pub use otsu::otsu_threshold;
