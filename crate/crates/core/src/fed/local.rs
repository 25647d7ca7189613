use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::model::ModelParams;
use super::partition::ClientDataset;
use crate::data::LabeledImages;
use crate::diffusion::{DenoiserNet, ImageTensor, NoiseSchedule, Taps};
use crate::error::{Error, Result};
use crate::objective::{
    ce_with_grad, ndcr_with_grad, norm_factor, select_prompts, tdcl_with_grad, total_loss,
    Ablation, LossBreakdown, LossWeights, Mode, PromptSelection, Target,
};
use crate::optim::{clip_norm, Sgd};
use crate::representation::{conditional_taps, denoising_taps, PcaBasis, PromptEmbedding, PromptId};
use crate::rng::Rng;

/// Where the PCA basis that maps denoiser taps to `d`-dim targets comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcaScope {
    /// Fitted by each client at the start of every round on the taps of its
    /// first mini-batch.
    #[default]
    ClientRound,
    /// One basis fitted by the server before training and shared by all
    /// clients.
    Server,
}

impl PcaScope {
    pub fn as_str(self) -> &'static str {
        match self {
            PcaScope::ClientRound => "client_round",
            PcaScope::Server => "server",
        }
    }
}

impl fmt::Display for PcaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PcaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client_round" => Ok(PcaScope::ClientRound),
            "server" => Ok(PcaScope::Server),
            other => Err(Error::Config(format!(
                "unknown pca scope `{other}` (expected client_round or server)"
            ))),
        }
    }
}

/// The server-pretrained pieces every client reads but never modifies.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub net: DenoiserNet,
    pub table: PromptEmbedding,
    pub schedule: NoiseSchedule,
    /// Required when the PCA scope is [`PcaScope::Server`].
    pub shared_basis: Option<PcaBasis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Noising step for the denoising representation.
    pub t_step: usize,
    pub mode: Mode,
    pub ablation: Ablation,
    pub weights: LossWeights,
    /// Self-supervised negatives are drawn from this pool.
    pub neg_pool: Vec<PromptId>,
    pub neg_pool_size: usize,
    /// Proximal coefficient; `None` disables the proximal term.
    pub prox_mu: Option<f64>,
    /// Decay of the per-prompt running normalization factor.
    pub u_decay: f64,
    pub grad_clip: Option<f64>,
    pub pca_scope: PcaScope,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("learning rate and temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.u_decay) {
            return Err(Error::Config("normalization decay must be in [0, 1)".into()));
        }
        if self.mode == Mode::SelfSupervised && self.ablation == Ablation::Baseline {
            return Err(Error::Config(
                "self-supervised mode with the baseline ablation has no objective".into(),
            ));
        }
        Ok(())
    }

    fn needs_tdcl(&self) -> bool {
        self.ablation.tdcl()
    }

    fn needs_ndcr(&self) -> bool {
        self.ablation.ndcr()
    }

    fn uses_labels(&self) -> bool {
        self.mode == Mode::Supervised
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean loss of every mini-batch, in order.
    pub trace: Vec<LossBreakdown>,
}

/// Per-prompt running estimate of the normalization factor.
#[derive(Debug, Default)]
struct RunningNorm {
    decay: f64,
    values: HashMap<PromptId, f64>,
}

impl RunningNorm {
    fn blend(&self, p: PromptId, batch_u: f64) -> f64 {
        match self.values.get(&p) {
            Some(&r) => self.decay * r + (1.0 - self.decay) * batch_u,
            None => batch_u,
        }
    }

    fn update(&mut self, p: PromptId, batch_mean: f64) {
        let v = self.blend(p, batch_mean);
        self.values.insert(p, v);
    }
}

/// Flattened pixels of `indices` (`n x input_dim`).
pub fn gather_pixels(data: &LabeledImages, indices: &[usize]) -> Vec<f64> {
    let mut x = Vec::with_capacity(indices.len() * data.images.first().map_or(0, ImageTensor::len));
    for &i in indices {
        x.extend_from_slice(&data.images[i].data);
    }
    x
}

struct BatchTargets {
    /// Per sample: (prompt, fused vector) for the positive then negatives.
    contrast: Vec<Vec<(PromptId, Vec<f64>)>>,
    /// Per sample denoising representation.
    consistency: Vec<Vec<f64>>,
}

fn batch_targets(
    frozen: &FrozenBackbone,
    cfg: &LocalConfig,
    data: &LabeledImages,
    idx: &[usize],
    z: &[f64],
    basis: &mut Option<PcaBasis>,
    rng: &mut Rng,
) -> Result<BatchTargets> {
    let b = idx.len();
    let d = z.len() / b;
    let images: Vec<&ImageTensor> = idx.iter().map(|&i| &data.images[i]).collect();
    let num_classes = data.num_classes;
    let selections: Vec<PromptSelection> = idx
        .iter()
        .map(|&i| {
            let label = cfg.uses_labels().then_some(data.labels[i]);
            select_prompts(cfg.mode, label, num_classes, &cfg.neg_pool, cfg.neg_pool_size, rng)
        })
        .collect::<Result<_>>()?;

    let mut cond_taps: Option<(Taps, Vec<(usize, PromptId)>)> = None;
    if cfg.needs_tdcl() {
        let mut pair_images = Vec::new();
        let mut conds = Vec::new();
        let mut prompts = Vec::new();
        let mut owner = Vec::new();
        for (s, sel) in selections.iter().enumerate() {
            for &p in std::iter::once(&sel.positive).chain(&sel.negatives) {
                pair_images.push(images[s]);
                // the encoder output conditions the backbone as a constant
                conds.extend_from_slice(&z[s * d..(s + 1) * d]);
                prompts.push(p);
                owner.push((s, p));
            }
        }
        let taps = conditional_taps(&frozen.net, &pair_images, &conds, &prompts, &frozen.table)?;
        cond_taps = Some((taps, owner));
    }
    let den_taps = if cfg.needs_ndcr() {
        let prompts: Vec<PromptId> = selections.iter().map(|s| s.consistency).collect();
        Some(denoising_taps(
            &frozen.net,
            &images,
            &prompts,
            cfg.t_step,
            &frozen.schedule,
            &frozen.table,
            rng,
        )?)
    } else {
        None
    };

    if basis.is_none() {
        let mut all: Vec<&Taps> = Vec::new();
        if let Some((t, _)) = &cond_taps {
            all.push(t);
        }
        if let Some(t) = &den_taps {
            all.push(t);
        }
        *basis = Some(PcaBasis::fit_taps(&all, d)?);
    }
    let basis = basis.as_ref().expect("basis fitted above");
    if basis.dim() != d {
        return Err(Error::Shape(format!(
            "PCA basis produces {} dims, encoder produces {d}",
            basis.dim()
        )));
    }

    let mut contrast = vec![Vec::new(); b];
    if let Some((taps, owner)) = &cond_taps {
        for (f, &(s, p)) in basis.fuse_batch(taps)?.into_iter().zip(owner) {
            contrast[s].push((p, f));
        }
    }
    let consistency = match &den_taps {
        Some(t) => basis.fuse_batch(t)?,
        None => Vec::new(),
    };
    Ok(BatchTargets { contrast, consistency })
}

/// Runs `cfg.epochs` epochs of mini-batch SGD on the client's shard starting
/// from `global`. The backbone is only read.
pub fn local_update(
    client: &ClientDataset,
    global: &ModelParams,
    frozen: &FrozenBackbone,
    cfg: &LocalConfig,
    rng: &mut Rng,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let data = &client.data;
    if data.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has no data", client.id)));
    }
    let uses_reps = cfg.needs_tdcl() || cfg.needs_ndcr();
    let mut basis = match (uses_reps, cfg.pca_scope) {
        (true, PcaScope::Server) => Some(frozen.shared_basis.clone().ok_or_else(|| {
            Error::Config("server PCA scope needs a shared basis".into())
        })?),
        _ => None,
    };
    let mut params = global.clone();
    let arch = params.arch;
    let (d, classes) = (arch.d, arch.classes);
    let mut opt_u = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, params.u.len());
    let mut opt_v = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, params.v.len());
    let mut norms = RunningNorm {
        decay: cfg.u_decay,
        values: HashMap::new(),
    };
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch) {
            let b = idx.len();
            let x = gather_pixels(data, idx);
            let fwd = params.forward(&x, b)?;
            let targets = if uses_reps {
                Some(batch_targets(frozen, cfg, data, idx, &fwd.z, &mut basis, rng)?)
            } else {
                None
            };

            let zs: Vec<&[f64]> = (0..b).map(|i| fwd.z_row(i)).collect();
            // normalization factors for every (sample, prompt) target
            let mut batch_u: HashMap<PromptId, (f64, usize)> = HashMap::new();
            let mut dz = vec![0.0; b * d];
            let mut dlogits = vec![0.0; b * classes];
            let mut losses = Vec::with_capacity(b);
            for i in 0..b {
                let z = zs[i];
                let mut tdcl = 0.0;
                let mut ndcr = 0.0;
                let mut ce = 0.0;
                let g = &mut dz[i * d..(i + 1) * d];
                if let Some(t) = &targets {
                    if cfg.needs_tdcl() {
                        let pairs = &t.contrast[i];
                        let mut us = Vec::with_capacity(pairs.len());
                        for (p, f) in pairs {
                            let u = norm_factor(&zs, f)?;
                            let e = batch_u.entry(*p).or_insert((0.0, 0));
                            e.0 += u;
                            e.1 += 1;
                            us.push(norms.blend(*p, u));
                        }
                        let pos = Target {
                            f: &pairs[0].1,
                            u: us[0],
                        };
                        let negs: Vec<Target<'_>> = pairs[1..]
                            .iter()
                            .zip(&us[1..])
                            .map(|((_, f), &u)| Target { f, u })
                            .collect();
                        let (l, gz) = tdcl_with_grad(z, pos, &negs, cfg.tau)?;
                        tdcl = l;
                        for (a, v) in g.iter_mut().zip(gz) {
                            *a += cfg.weights.tdcl * v;
                        }
                    }
                    if cfg.needs_ndcr() {
                        let (l, gz) = ndcr_with_grad(z, &t.consistency[i])?;
                        ndcr = l;
                        for (a, v) in g.iter_mut().zip(gz) {
                            *a += cfg.weights.ndcr * v;
                        }
                    }
                }
                if cfg.uses_labels() {
                    let (l, gl) = ce_with_grad(fwd.logits_row(i), data.labels[idx[i]])?;
                    ce = l;
                    for (a, v) in dlogits[i * classes..(i + 1) * classes].iter_mut().zip(gl) {
                        *a += cfg.weights.ce * v;
                    }
                }
                let parts = total_loss(tdcl, ndcr, ce, cfg.ablation, &cfg.weights).map_err(|e| {
                    Error::NonFinite(format!("client {}: {e}", client.id))
                })?;
                losses.push(parts);
            }
            let mut keys: Vec<_> = batch_u.into_iter().collect();
            keys.sort_by_key(|(p, _)| *p);
            for (p, (sum, count)) in keys {
                norms.update(p, sum / count as f64);
            }

            let inv = 1.0 / b as f64;
            dz.iter_mut().chain(dlogits.iter_mut()).for_each(|g| *g *= inv);
            let (mut du, mut dv) = params.backward(&fwd, &dz, &dlogits);
            if let Some(mu) = cfg.prox_mu {
                for (g, (w, w0)) in du.iter_mut().zip(params.u.iter().zip(&global.u)) {
                    *g += mu * (w - w0);
                }
                for (g, (w, w0)) in dv.iter_mut().zip(params.v.iter().zip(&global.v)) {
                    *g += mu * (w - w0);
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip_norm(&mut du, c);
                clip_norm(&mut dv, c);
            }
            opt_u.step(&mut params.u, &du);
            if cfg.uses_labels() {
                opt_v.step(&mut params.v, &dv);
            }
            if !params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {}: parameters diverged",
                    client.id
                )));
            }
            trace.push(LossBreakdown::mean(&losses));
        }
    }
    Ok(LocalOutcome { params, trace })
}

/// Plain mini-batch SGD on cross-entropy over the whole dataset, without any
/// federated machinery. Used as a reference for the single-client protocol.
pub fn train_centralized(
    data: &LabeledImages,
    init: &ModelParams,
    epochs: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    rng: &mut Rng,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut params = init.clone();
    let classes = params.arch.classes;
    let mut opt_u = Sgd::new(lr, momentum, weight_decay, params.u.len());
    let mut opt_v = Sgd::new(lr, momentum, weight_decay, params.v.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..epochs {
        order.shuffle(rng);
        for idx in order.chunks(batch) {
            let b = idx.len();
            let fwd = params.forward(&gather_pixels(data, idx), b)?;
            let mut dlogits = vec![0.0; b * classes];
            let mut loss = 0.0;
            for (i, &k) in idx.iter().enumerate() {
                let (l, g) = ce_with_grad(fwd.logits_row(i), data.labels[k])?;
                loss += l;
                dlogits[i * classes..(i + 1) * classes].copy_from_slice(&g);
            }
            let inv = 1.0 / b as f64;
            dlogits.iter_mut().for_each(|g| *g *= inv);
            let dz = vec![0.0; b * params.arch.d];
            let (du, dv) = params.backward(&fwd, &dz, &dlogits);
            opt_u.step(&mut params.u, &du);
            opt_v.step(&mut params.v, &dv);
            trace.push(loss / b as f64);
        }
    }
    Ok((params, trace))
}
