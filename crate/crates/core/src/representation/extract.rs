use rand::Rng;

use super::pca::PcaBasis;
use super::prompt::{PromptEmbedding, PromptId};
use crate::diffusion::{
    forward_noise, Activation, DenoiserNet, ImageTensor, NoiseSchedule, Taps,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepresentationKind {
    Conditional,
    Denoising,
}

impl RepresentationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RepresentationKind::Conditional => "conditional",
            RepresentationKind::Denoising => "denoising",
        }
    }
}

/// A fused diffusion representation. Downstream losses treat it as a
/// constant target.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub vector: Vec<f64>,
    pub kind: RepresentationKind,
    pub source: PromptId,
    pub t_used: usize,
}

/// Taps for clean images at `t = 0` under per-sample conditions and prompts.
/// `conds` is `n x cond_width`.
pub fn conditional_taps(
    net: &DenoiserNet,
    images: &[&ImageTensor],
    conds: &[f64],
    prompts: &[PromptId],
    table: &PromptEmbedding,
) -> Result<Taps> {
    if images.len() != prompts.len() {
        return Err(Error::Shape("one prompt per image required".into()));
    }
    let x = Activation::from_images(images)?;
    let p = table.gather(prompts)?;
    let t = vec![0; images.len()];
    Ok(net.forward_batch(&x, &t, Some(conds), &p, false)?.taps)
}

/// Forward-noises every image to step `t` and returns the taps under the
/// given prompts (no condition vector).
pub fn denoising_taps<R: Rng + ?Sized>(
    net: &DenoiserNet,
    images: &[&ImageTensor],
    prompts: &[PromptId],
    t: usize,
    schedule: &NoiseSchedule,
    table: &PromptEmbedding,
    rng: &mut R,
) -> Result<Taps> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            min: 1,
            max: schedule.steps(),
        });
    }
    if images.len() != prompts.len() {
        return Err(Error::Shape("one prompt per image required".into()));
    }
    let noised = images
        .iter()
        .map(|img| forward_noise(img, t, schedule, rng).map(|(xt, _)| xt))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = noised.iter().collect();
    let x = Activation::from_images(&refs)?;
    let p = table.gather(prompts)?;
    let steps = vec![t; images.len()];
    Ok(net.forward_batch(&x, &steps, None, &p, false)?.taps)
}

/// Conditional representation: clean image at `t = 0`, condition `cond`,
/// prompt `prompt`, fused through `basis`.
pub fn extract_conditional(
    net: &DenoiserNet,
    x: &ImageTensor,
    cond: &[f64],
    prompt: PromptId,
    table: &PromptEmbedding,
    basis: &PcaBasis,
) -> Result<FusedRepresentation> {
    if cond.len() != net.cond_width() {
        return Err(Error::Shape(format!(
            "condition has {} entries, denoiser expects {}",
            cond.len(),
            net.cond_width()
        )));
    }
    let taps = conditional_taps(net, &[x], cond, &[prompt], table)?;
    Ok(FusedRepresentation {
        vector: basis.fuse(&taps, &net.tap_shapes())?,
        kind: RepresentationKind::Conditional,
        source: prompt,
        t_used: 0,
    })
}

/// Denoising representation: `x` noised to step `t`, denoised under
/// `prompt`, fused through `basis`.
#[allow(clippy::too_many_arguments)]
pub fn extract_denoising<R: Rng + ?Sized>(
    net: &DenoiserNet,
    x: &ImageTensor,
    prompt: PromptId,
    t: usize,
    schedule: &NoiseSchedule,
    table: &PromptEmbedding,
    basis: &PcaBasis,
    rng: &mut R,
) -> Result<FusedRepresentation> {
    let taps = denoising_taps(net, &[x], &[prompt], t, schedule, table, rng)?;
    Ok(FusedRepresentation {
        vector: basis.fuse(&taps, &net.tap_shapes())?,
        kind: RepresentationKind::Denoising,
        source: prompt,
        t_used: t,
    })
}

/// Default extraction step for a schedule: `round(frac * T)`, at least 1.
pub fn default_step(t_frac: f64, steps: usize) -> usize {
    ((t_frac * steps as f64).round() as usize).clamp(1, steps)
}
