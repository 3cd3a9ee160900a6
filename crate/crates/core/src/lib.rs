//! Kernels of wide deep equilibrium models (DEQs) on Gaussian-mixture data.
//!
//! The crate computes the conjugate kernel (CK) and neural tangent kernel (NTK) of an
//! implicit network `z = φ(σ_a A z + σ_b B x) / √m`, both exactly (bivariate Gaussian
//! quadrature on the layer recursion) and by Monte Carlo on a wide random network. It
//! assembles the closed-form high-dimensional equivalents of these kernels from a handful
//! of scalar coefficients, and solves for shallow explicit networks whose CK equivalent
//! coincides with that of a given DEQ.
//!
//! Modules, bottom-up:
//! - [`activations`]: activation registry and centering.
//! - [`gauss_quad`]: Gaussian expectations, Hermite moments, bivariate quadrature.
//! - [`gmm`]: mixture model, sampler, second-order statistics, CSV ingestion.
//! - [`scalar_system`]: τ*, CK/NTK coefficient systems, explicit-layer recursion.
//! - [`kernels`]: exact and Monte-Carlo kernel matrices.
//! - [`rmt_equiv`]: high-dimensional equivalents Ḡ, K̄, Σ̄.
//! - [`matching`]: explicit-network synthesis by nonlinear least squares.
//! - [`spectra`]: spectral norms, eigenvalues, histograms.
//! - [`experiment`]: configuration-driven runs behind the `deqlab` binary.

pub mod activations;
pub mod error;
pub mod experiment;
pub mod gauss_quad;
pub mod gmm;
pub mod kernels;
pub mod matching;
pub mod par;
pub mod rng;
pub mod rmt_equiv;
pub mod scalar_system;
pub mod spectra;

pub use activations::{Activation, ActivationSpec, Family};
pub use error::{DeqError, Result};
pub use gmm::{GmmModel, GmmStats, Sample};
pub use kernels::{KernelKind, KernelMatrix, KernelMeta, Method};
pub use scalar_system::{CkCoefficients, DeqConfig, ExplicitCoefficients, NtkCoefficients};
