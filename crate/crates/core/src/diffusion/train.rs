//! Denoiser pre-training on labeled images with class prompts.

use rand::Rng;

use super::schedule::{standard_normal, NoiseSchedule};
use super::unet::{Activation, DenoiserNet};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::optim::{clip_norm, Sgd};
use crate::representation::{PromptEmbedding, PromptId};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Probability of replacing the class prompt with a reserved generic
    /// prompt, so the reserved rows are trained too.
    pub reserved_prob: f64,
    pub clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 0.02,
            momentum: 0.9,
            reserved_prob: 0.2,
            clip: Some(1.0),
        }
    }
}

/// One sampled training batch: noised images, steps, prompts and the noise.
pub struct NoisedBatch {
    pub x_t: Activation,
    pub t: Vec<usize>,
    pub prompt_rows: Vec<usize>,
    pub eps: Vec<f64>,
}

pub fn sample_batch<R: Rng + ?Sized>(
    data: &LabeledImages,
    table: &PromptEmbedding,
    schedule: &NoiseSchedule,
    batch: usize,
    reserved_prob: f64,
    rng: &mut R,
) -> Result<NoisedBatch> {
    let first = &data.images[0];
    let (c, h, w) = first.shape();
    let hw = h * w;
    let mut x_t = Activation::zeros(c, batch, h, w);
    let mut eps_out = vec![0.0; c * batch * hw];
    let mut t = Vec::with_capacity(batch);
    let mut prompt_rows = Vec::with_capacity(batch);
    for i in 0..batch {
        let k = rng.random_range(0..data.len());
        let step = rng.random_range(1..=schedule.steps());
        let id = if rng.random::<f64>() < reserved_prob {
            PromptId::RESERVED[rng.random_range(0..PromptId::RESERVED.len())]
        } else {
            PromptId::Class(data.labels[k])
        };
        prompt_rows.push(table.index(id)?);
        t.push(step);
        let eps = standard_normal(rng, c * hw);
        let ab = schedule.alpha_bar(step);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let img = &data.images[k];
        for ch in 0..c {
            for p in 0..hw {
                let e = eps[ch * hw + p];
                x_t.data[ch * batch * hw + i * hw + p] = sa * img.data[ch * hw + p] + sn * e;
                eps_out[ch * batch * hw + i * hw + p] = e;
            }
        }
    }
    Ok(NoisedBatch {
        x_t,
        t,
        prompt_rows,
        eps: eps_out,
    })
}

/// Minimizes `E |eps_theta(x_t, t, prompt) - eps|^2` with `t` uniform in
/// `[1, T]`. Updates the net and the prompt table in place and returns one
/// loss value per step.
pub fn train_denoiser<R: Rng + ?Sized>(
    net: &mut DenoiserNet,
    table: &mut PromptEmbedding,
    data: &LabeledImages,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("denoiser training set is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("pre-training needs steps >= 1 and batch >= 1".into()));
    }
    if table.width() != net.cond_width() {
        return Err(Error::Shape("prompt table width differs from denoiser cond width".into()));
    }
    let width = table.width();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, 0.0, net.num_params());
    let mut table_opt = Sgd::new(cfg.lr, cfg.momentum, 0.0, table.table.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let b = sample_batch(data, table, schedule, cfg.batch, cfg.reserved_prob, rng)?;
        let mut prompts = Vec::with_capacity(cfg.batch * width);
        for &r in &b.prompt_rows {
            prompts.extend_from_slice(table.embed_row(r)?);
        }
        let (loss, mut g) = net.loss_and_grad(&b.x_t, &b.t, None, &prompts, &b.eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss {loss}")));
        }
        trace.push(loss);
        let mut tg = vec![0.0; table.table.len()];
        for (i, &r) in b.prompt_rows.iter().enumerate() {
            for j in 0..width {
                tg[r * width + j] += g.prompts[i * width + j];
            }
        }
        if let Some(c) = cfg.clip {
            clip_norm(&mut g.params, c);
            clip_norm(&mut tg, c);
        }
        opt.step(&mut net.params, &g.params);
        table_opt.step(&mut table.table, &tg);
    }
    Ok(trace)
}

/// Mean noise-prediction loss on `batches` fresh batches drawn from `data`.
pub fn evaluate_denoiser<R: Rng + ?Sized>(
    net: &DenoiserNet,
    table: &PromptEmbedding,
    data: &LabeledImages,
    schedule: &NoiseSchedule,
    batch: usize,
    batches: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..batches {
        let b = sample_batch(data, table, schedule, batch, 0.0, rng)?;
        let mut prompts = Vec::new();
        for &r in &b.prompt_rows {
            prompts.extend_from_slice(table.embed_row(r)?);
        }
        total += net.loss(&b.x_t, &b.t, None, &prompts, &b.eps)?;
    }
    Ok(total / batches as f64)
}
