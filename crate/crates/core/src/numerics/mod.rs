//! Dense float64 tensors with reverse-mode differentiation, MLP building
//! blocks, the optimizer and the on-disk array container.

pub mod activation;
pub mod adam;
pub mod container;
pub mod nn;
pub mod tape;

pub use activation::{gelu, softmax_columns};
pub use adam::{AdamConfig, AdamState};
pub use container::{sha256_hex, Container, NamedArray};
pub use nn::{glorot_normal_init, mlp_forward, MlpParams, MlpShape, MlpVars};
pub use tape::{Gradients, Matrix, RowBlock, Tape, Var};

/// The seeded generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;
