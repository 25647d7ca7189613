//! Local training objective: normalized similarity, the text-driven
//! contrastive term, the noise-driven consistency term, cross-entropy, and
//! prompt selection for the supervised and self-supervised schemes.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm};
use crate::representation::PromptId;

/// Floor applied to the normalization factor and to vector norms.
pub const EPS_CLAMP: f64 = 1e-8;

/// Which of the two diffusion-guided terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    TdclOnly,
    NdcrOnly,
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::TdclOnly,
        Ablation::NdcrOnly,
        Ablation::Full,
    ];

    pub fn tdcl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::TdclOnly)
    }

    pub fn ndcr(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NdcrOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::TdclOnly => "tdcl_only",
            Ablation::NdcrOnly => "ndcr_only",
            Ablation::Baseline => "baseline",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "tdcl_only" | "tdcl" => Ok(Ablation::TdclOnly),
            "ndcr_only" | "ndcr" => Ok(Ablation::NdcrOnly),
            "baseline" | "none" => Ok(Ablation::Baseline),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Supervised,
    SelfSupervised,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::SelfSupervised => "selfsup",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" | "sup" => Ok(Mode::Supervised),
            "selfsup" | "self_supervised" | "ssl" => Ok(Mode::SelfSupervised),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-batch values of the three loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub tdcl: f64,
    pub ndcr: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean of a non-empty slice.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.tdcl += b.tdcl;
            out.ndcr += b.ndcr;
            out.ce += b.ce;
            out.total += b.total;
        }
        out.tdcl /= n;
        out.ndcr /= n;
        out.ce /= n;
        out.total /= n;
        out
    }
}

/// Optional term weights. The method itself uses the plain sum, so every
/// weight defaults to 1; other values are for sensitivity studies only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tdcl: f64,
    pub ndcr: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tdcl: 1.0,
            ndcr: 1.0,
            ce: 1.0,
        }
    }
}

/// Mean distance from the batch embeddings to `f`, floored at 1e-8.
pub fn norm_factor(batch: &[&[f64]], f: &[f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("normalization factor needs a non-empty batch".into()));
    }
    let u = batch.iter().map(|z| dist(z, f)).sum::<f64>() / batch.len() as f64;
    Ok(u.max(EPS_CLAMP))
}

/// `s = z.f / (U |z| |f|)`. Zero norms are clamped to 1e-8 with a warning.
pub fn similarity(z: &[f64], f: &[f64], u: f64) -> Result<f64> {
    if z.len() != f.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", z.len(), f.len())));
    }
    if !(u > 0.0) {
        return Err(Error::InvalidInput(format!("normalization factor must be positive, got {u}")));
    }
    let (nz, nf) = (norm(z), norm(f));
    if nz < EPS_CLAMP || nf < EPS_CLAMP {
        log::warn!("degenerate embedding in similarity (norms {nz:e}, {nf:e}); clamping");
    }
    Ok(dot(z, f) / (u * nz.max(EPS_CLAMP) * nf.max(EPS_CLAMP)))
}

/// Similarity and its gradient with respect to `z` (U and `f` held fixed).
fn similarity_grad(z: &[f64], f: &[f64], u: f64) -> (f64, Vec<f64>) {
    let nz = norm(z).max(EPS_CLAMP);
    let nf = norm(f).max(EPS_CLAMP);
    let zf = dot(z, f);
    let s = zf / (u * nz * nf);
    let k = 1.0 / (u * nf);
    let g = z
        .iter()
        .zip(f)
        .map(|(zi, fi)| k * (fi / nz - zf * zi / (nz * nz * nz)))
        .collect();
    (s, g)
}

/// A contrast target: representation plus its normalization factor.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub f: &'a [f64],
    pub u: f64,
}

/// `log(1 + sum_j exp(s_j / tau) / exp(s_pos / tau))` with the gradient
/// with respect to `z`, evaluated as a log-sum-exp.
pub fn tdcl_with_grad(z: &[f64], pos: Target<'_>, negs: &[Target<'_>], tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if negs.is_empty() {
        return Ok((0.0, vec![0.0; z.len()]));
    }
    for t in std::iter::once(&pos).chain(negs) {
        if t.f.len() != z.len() {
            return Err(Error::Shape(format!("target dim {} vs embedding {}", t.f.len(), z.len())));
        }
    }
    let (sp, gp) = similarity_grad(z, pos.f, pos.u);
    let parts: Vec<(f64, Vec<f64>)> = negs.iter().map(|t| similarity_grad(z, t.f, t.u)).collect();
    let logits: Vec<f64> = parts.iter().map(|(s, _)| (s - sp) / tau).collect();
    let m = logits.iter().cloned().fold(0.0f64, f64::max);
    let denom = (-m).exp() + logits.iter().map(|a| (a - m).exp()).sum::<f64>();
    let loss = m + denom.ln();
    let mut grad = vec![0.0; z.len()];
    let mut wsum = 0.0;
    for ((_, g), a) in parts.iter().zip(&logits) {
        let w = (a - m).exp() / denom;
        wsum += w;
        for (o, gi) in grad.iter_mut().zip(g) {
            *o += w * gi / tau;
        }
    }
    for (o, gi) in grad.iter_mut().zip(&gp) {
        *o -= wsum * gi / tau;
    }
    Ok((loss.max(0.0), grad))
}

/// Contrastive loss with U computed from `batch` for every target.
pub fn tdcl_loss(z: &[f64], f_pos: &[f64], f_negs: &[&[f64]], tau: f64, batch: &[&[f64]]) -> Result<f64> {
    let pos = Target {
        f: f_pos,
        u: norm_factor(batch, f_pos)?,
    };
    let negs = f_negs
        .iter()
        .map(|f| Ok(Target { f, u: norm_factor(batch, f)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(tdcl_with_grad(z, pos, &negs, tau)?.0)
}

/// `sum_q (z_q - h_q)^2`.
pub fn ndcr_loss(z: &[f64], h: &[f64]) -> Result<f64> {
    Ok(ndcr_with_grad(z, h)?.0)
}

/// Consistency loss and its gradient `2 (z - h)`.
pub fn ndcr_with_grad(z: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != h.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", z.len(), h.len())));
    }
    let g: Vec<f64> = z.iter().zip(h).map(|(a, b)| 2.0 * (a - b)).collect();
    let l = z.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((l, g))
}

/// `-log softmax(logits)[label]` with max-shift.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    Ok(ce_with_grad(logits, label)?.0)
}

/// Cross-entropy and its gradient `softmax - onehot`.
pub fn ce_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let loss = s.ln() - (logits[label] - m);
    let mut g: Vec<f64> = exps.iter().map(|e| e / s).collect();
    g[label] -= 1.0;
    Ok((loss, g))
}

/// Combines the terms per the ablation, zeroing disabled ones.
pub fn total_loss(tdcl: f64, ndcr: f64, ce: f64, ablation: Ablation, weights: &LossWeights) -> Result<LossBreakdown> {
    let tdcl = if ablation.tdcl() { tdcl } else { 0.0 };
    let ndcr = if ablation.ndcr() { ndcr } else { 0.0 };
    for (name, v) in [("tdcl", tdcl), ("ndcr", ndcr), ("ce", ce)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        tdcl,
        ndcr,
        ce,
        total: weights.tdcl * tdcl + weights.ndcr * ndcr + weights.ce * ce,
    })
}

/// Prompts used for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSelection {
    pub positive: PromptId,
    pub negatives: Vec<PromptId>,
    pub consistency: PromptId,
    pub mode: Mode,
}

/// Supervised: own class positive, every other class negative. Self-supervised:
/// generic positive, `neg_pool_size` negatives drawn without replacement from
/// `neg_pool`, generic object prompt for consistency.
pub fn select_prompts<R: Rng + ?Sized>(
    mode: Mode,
    label: Option<usize>,
    num_classes: usize,
    neg_pool: &[PromptId],
    neg_pool_size: usize,
    rng: &mut R,
) -> Result<PromptSelection> {
    match mode {
        Mode::Supervised => {
            let y = label.ok_or_else(|| {
                Error::InvalidInput("supervised prompt selection needs a label".into())
            })?;
            if y >= num_classes {
                return Err(Error::InvalidInput(format!("label {y} outside {num_classes} classes")));
            }
            Ok(PromptSelection {
                positive: PromptId::Class(y),
                negatives: (0..num_classes).filter(|&j| j != y).map(PromptId::Class).collect(),
                consistency: PromptId::Class(y),
                mode,
            })
        }
        Mode::SelfSupervised => {
            if neg_pool_size > neg_pool.len() {
                return Err(Error::Config(format!(
                    "negative pool has {} prompts, {} requested",
                    neg_pool.len(),
                    neg_pool_size
                )));
            }
            if neg_pool.contains(&PromptId::GenericPositive) {
                return Err(Error::Config("negative pool must not contain the positive prompt".into()));
            }
            let negatives = sample(rng, neg_pool.len(), neg_pool_size)
                .into_iter()
                .map(|i| neg_pool[i])
                .collect();
            Ok(PromptSelection {
                positive: PromptId::GenericPositive,
                negatives,
                consistency: PromptId::GenericObject,
                mode,
            })
        }
    }
}
