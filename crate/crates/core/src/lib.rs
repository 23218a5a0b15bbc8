//! Operator learning with kernel-coupled attention.
//!
//! The model maps an input function `u`, sampled at fixed sensors, to an
//! output function evaluated at arbitrary query locations `y`:
//!
//! ```text
//! F(u)(y) = sum_i softmax( ∫ κ(y, y') g(y') dy' )_i ⊙ v_i(u)
//! ```
//!
//! where `g` scores the `n` latent features at each query, `κ` is a
//! normalized RBF kernel on learned lifts of the queries, and
//! `v = f ∘ D` encodes the input function through a fixed transform `D`
//! (wavelet scattering or a Fourier projection) followed by an MLP.
//!
//! Module map:
//! - [`numerics`]: tape-based reverse-mode AD, MLPs, Adam, array container
//! - [`encoding`]: positional encoding of queries, Fourier projection
//! - [`scattering`]: Morlet filterbanks and the scattering transform
//! - [`kca`]: quadrature rules, coupling kernel, attention weights
//! - [`model`]: parameter container and the full forward pass
//! - [`datagen`]: Gaussian-process inputs, antiderivative and Darcy data
//! - [`trainer`]: loss, training loop, error metrics
//! - [`experiment`]: configuration files and end-to-end pipelines

pub mod datagen;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod kca;
pub mod model;
pub mod numerics;
pub mod scattering;
pub mod trainer;

pub use error::{LocaError, Result};
