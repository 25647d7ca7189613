//! Diffusion representations: prompt table, per-layer PCA, fusion of
//! decoder taps, and the conditional / denoising extractors.

mod dump;
mod extract;
mod pca;
mod prompt;

pub use dump::RepresentationDump;
pub use extract::{
    conditional_taps, default_step, denoising_taps, extract_conditional, extract_denoising,
    FusedRepresentation, RepresentationKind,
};
pub use pca::{layer_tokens, target_dims, LayerPca, PcaBasis, FUSED_LAYERS};
pub use prompt::{PromptEmbedding, PromptId};
