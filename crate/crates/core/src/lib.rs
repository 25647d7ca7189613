//! Federated learning simulator steered by diffusion representations.
//!
//! Clients train a small encoder/classifier on non-IID shards. A frozen,
//! server-pretrained tiny conditional denoiser supplies two kinds of
//! targets for each sample: conditional representations under matched and
//! unmatched class prompts (contrastive term) and denoising
//! representations of a noised copy (consistency term).

pub mod analysis;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod fed;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod representation;
pub mod rng;

pub use error::{Error, Result};
