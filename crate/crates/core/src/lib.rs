//! Sequence autoencoder laboratory: adversarial and denoising adversarial
//! autoencoders over token sequences, latent-geometry metrics, and a numerical
//! lab for optimal Lipschitz decoders over fixed latent points.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod objectives;
pub mod seqmodel;
pub mod tensor;
pub mod theorem;

pub use error::{Error, Result};

/// Deterministic RNG used throughout.
pub type SeededRng = rand_chacha::ChaCha8Rng;
