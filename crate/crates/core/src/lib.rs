//! Desk-scale laboratory for 1D image tokenizers with diffusion decoders:
//! training losses, latent-space diagnostics, a masked token generator and
//! oracle checks, all on a small synthetic blob world.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{finite_difference_check, finite_difference_check_at, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
