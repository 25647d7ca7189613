//! Independent oracles and the property suites shared by the integration
//! tests and the acceptance report.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use difrc::analysis::{convergence_bound, BoundInputs};
use difrc::data::LabeledImages;
use difrc::diffusion::{
    forward_noise, noise_step, reverse_step, reverse_step_with_eps, ImageTensor, NoisePredictor, NoiseSchedule,
    ScheduleKind,
};
use difrc::fed::{
    aggregate, make_long_tail, weighted_mean, ModelArch, ModelParams, PartitionSpec, Scheme, EXTREME_CLIENTS,
};
use difrc::objective::{
    ce_loss, ce_with_grad, ndcr_loss, ndcr_with_grad, norm_factor, similarity, tdcl_loss, tdcl_with_grad, Target,
};
use difrc::Result;

/// Outcome of one property suite: pass/fail plus a one-line detail.
#[derive(Debug, Clone)]
pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self {
            ok: true,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self {
            ok: false,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// ---------------------------------------------------------------------------
// Scalar oracles. Written loop-by-loop without sharing code with the crate.

pub fn oracle_norm_factor(batch: &[Vec<f64>], f: &[f64]) -> f64 {
    let mut total = 0.0;
    for z in batch {
        let mut sq = 0.0;
        for q in 0..f.len() {
            sq += (z[q] - f[q]) * (z[q] - f[q]);
        }
        total += sq.sqrt();
    }
    (total / batch.len() as f64).max(1e-8)
}

pub fn oracle_similarity(z: &[f64], f: &[f64], u: f64) -> f64 {
    let mut zf = 0.0;
    let mut zz = 0.0;
    let mut ff = 0.0;
    for q in 0..z.len() {
        zf += z[q] * f[q];
        zz += z[q] * z[q];
        ff += f[q] * f[q];
    }
    zf / (u * zz.sqrt() * ff.sqrt())
}

/// `log(1 + sum_j exp(s_j/tau) / exp(s_pos/tau))`, evaluated literally.
pub fn oracle_tdcl(z: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64, batch: &[Vec<f64>]) -> f64 {
    let s_pos = oracle_similarity(z, pos, oracle_norm_factor(batch, pos));
    let mut ratio = 0.0;
    for f in negs {
        let s = oracle_similarity(z, f, oracle_norm_factor(batch, f));
        ratio += (s / tau).exp() / (s_pos / tau).exp();
    }
    (1.0 + ratio).ln()
}

pub fn oracle_ndcr(z: &[f64], h: &[f64]) -> f64 {
    let mut s = 0.0;
    for q in 0..z.len() {
        s += (z[q] - h[q]).powi(2);
    }
    s
}

pub fn oracle_ce(logits: &[f64], label: usize) -> f64 {
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[label].exp() / denom).ln()
}

/// `prod_{i<=t} (1 - gamma_i)` for the linear schedule, gammas recomputed
/// from the endpoints.
pub fn oracle_alpha_bar(steps: usize, g_min: f64, g_max: f64, t: usize) -> f64 {
    let mut p = 1.0;
    for i in 1..=t {
        let g = if steps == 1 {
            g_min
        } else {
            g_min + (g_max - g_min) * ((i - 1) as f64) / ((steps - 1) as f64)
        };
        p *= 1.0 - g;
    }
    p
}

/// Exact weighted mean of dyadic rationals `num_i / 2^shift` with integer
/// weights, returned as a reduced fraction and then rounded once.
pub fn oracle_weighted_mean(values: &[i64], shift: u32, sizes: &[u64]) -> f64 {
    let num: i128 = values.iter().zip(sizes).map(|(&v, &n)| v as i128 * n as i128).sum();
    let den: i128 = sizes.iter().map(|&n| n as i128).sum::<i128>() << shift;
    let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i128;
    let (num, den) = (num / g.max(1), den / g.max(1));
    num as f64 / den as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

// ---------------------------------------------------------------------------
// Suites

fn random_case(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let d = r.random_range(2..12);
    let z = uniform_vec(r, d, -2.0, 2.0);
    let pos = uniform_vec(r, d, -2.0, 2.0);
    let negs: Vec<Vec<f64>> = (0..r.random_range(1..10)).map(|_| uniform_vec(r, d, -2.0, 2.0)).collect();
    let mut batch: Vec<Vec<f64>> = (0..r.random_range(1..8)).map(|_| uniform_vec(r, d, -2.0, 2.0)).collect();
    batch.push(z.clone());
    let tau = r.random_range(0.05..1.0);
    (z, pos, negs, batch, tau)
}

/// Loss functions against the scalar oracles on 100 random inputs.
pub fn loss_oracle_suite(seed: u64, cases: usize) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (z, pos, negs, batch, tau) = random_case(&mut r);
        let b: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let n: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let u = norm_factor(&b, &pos)?;
        worst = worst.max(rel_err(u, oracle_norm_factor(&batch, &pos)));
        worst = worst.max(rel_err(similarity(&z, &pos, u)?, oracle_similarity(&z, &pos, u)));
        worst = worst.max(rel_err(
            tdcl_loss(&z, &pos, &n, tau, &b)?,
            oracle_tdcl(&z, &pos, &negs, tau, &batch),
        ));
        worst = worst.max(rel_err(ndcr_loss(&z, &pos)?, oracle_ndcr(&z, &pos)));
        let logits = uniform_vec(&mut r, z.len(), -5.0, 5.0);
        let label = r.random_range(0..logits.len());
        worst = worst.max(rel_err(ce_loss(&logits, label)?, oracle_ce(&logits, label)));
    }
    Ok(worst)
}

/// NDCR gradient along random directions against central differences.
pub fn ndcr_fd_suite(seed: u64, directions: usize) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let d = r.random_range(2..16);
        let z = uniform_vec(&mut r, d, -2.0, 2.0);
        let h = uniform_vec(&mut r, d, -2.0, 2.0);
        let dir = uniform_vec(&mut r, d, -1.0, 1.0);
        let (_, g) = ndcr_with_grad(&z, &h)?;
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let eps = 1e-5;
        let at = |s: f64| -> Result<f64> {
            let zs: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            ndcr_loss(&zs, &h)
        };
        let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, fd));
    }
    Ok(worst)
}

/// Summed per-sample objective of a tiny model with fixed targets, and its
/// analytic gradient with respect to the encoder parameters.
struct EncoderProblem {
    params: ModelParams,
    x: Vec<f64>,
    n: usize,
    labels: Vec<usize>,
    pos: Vec<Vec<f64>>,
    negs: Vec<Vec<Vec<f64>>>,
    us: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    tau: f64,
}

impl EncoderProblem {
    fn new(r: &mut ChaCha8Rng) -> Self {
        let arch = ModelArch {
            input_dim: 6,
            hidden: 5,
            d: 4,
            classes: 3,
        };
        let params = ModelParams::init(arch, r);
        let n = 4;
        let x = uniform_vec(r, n * arch.input_dim, -1.0, 1.0);
        let labels = (0..n).map(|_| r.random_range(0..arch.classes)).collect();
        let pos = (0..n).map(|_| uniform_vec(r, arch.d, -1.0, 1.0)).collect();
        let negs = (0..n)
            .map(|_| (0..2).map(|_| uniform_vec(r, arch.d, -1.0, 1.0)).collect())
            .collect();
        let us = (0..n).map(|_| uniform_vec(r, 3, 0.5, 2.0)).collect();
        let h = (0..n).map(|_| uniform_vec(r, arch.d, -1.0, 1.0)).collect();
        Self {
            params,
            x,
            n,
            labels,
            pos,
            negs,
            us,
            h,
            tau: 0.5,
        }
    }

    fn loss_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut p = self.params.clone();
        p.u = u.to_vec();
        let fwd = p.forward(&self.x, self.n)?;
        let (d, c) = (p.arch.d, p.arch.classes);
        let mut dz = vec![0.0; self.n * d];
        let mut dl = vec![0.0; self.n * c];
        let mut total = 0.0;
        for i in 0..self.n {
            let z = fwd.z_row(i);
            let pos = Target {
                f: &self.pos[i],
                u: self.us[i][0],
            };
            let negs: Vec<Target<'_>> = self.negs[i]
                .iter()
                .zip(&self.us[i][1..])
                .map(|(f, &u)| Target { f, u })
                .collect();
            let (lt, gt) = tdcl_with_grad(z, pos, &negs, self.tau)?;
            let (ln, gn) = ndcr_with_grad(z, &self.h[i])?;
            let (lc, gc) = ce_with_grad(fwd.logits_row(i), self.labels[i])?;
            total += lt + ln + lc;
            for q in 0..d {
                dz[i * d + q] = gt[q] + gn[q];
            }
            dl[i * c..(i + 1) * c].copy_from_slice(&gc);
        }
        let (du, _) = p.backward(&fwd, &dz, &dl);
        Ok((total, du))
    }
}

/// Encoder-path gradients of the full objective against central
/// differences along random parameter directions.
pub fn encoder_fd_suite(seed: u64, directions: usize) -> Result<f64> {
    let mut r = rng(seed);
    let prob = EncoderProblem::new(&mut r);
    let u0 = prob.params.u.clone();
    let (_, grad) = prob.loss_and_grad(&u0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir = uniform_vec(&mut r, u0.len(), -1.0, 1.0);
        let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let eps = 1e-6;
        let shifted = |s: f64| u0.iter().zip(&dir).map(|(a, b)| a + s * b).collect::<Vec<_>>();
        let fd = (prob.loss_and_grad(&shifted(eps))?.0 - prob.loss_and_grad(&shifted(-eps))?.0) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, fd));
    }
    Ok(worst)
}

pub fn loss_math_check() -> Check {
    let run = || -> Result<(f64, f64, f64)> {
        Ok((loss_oracle_suite(5, 100)?, ndcr_fd_suite(6, 20)?, encoder_fd_suite(7, 20)?))
    };
    match run() {
        Ok((values, ndcr, enc)) => {
            let ok = values < 1e-9 && ndcr < 1e-3 && enc < 1e-3;
            let detail = format!("max rel err values {values:.2e}, ndcr fd {ndcr:.2e}, encoder fd {enc:.2e}");
            if ok {
                Check::pass(detail)
            } else {
                Check::fail(detail)
            }
        }
        Err(e) => Check::fail(format!("error: {e}")),
    }
}

/// Largest deviation of `alpha_bar` from the literal product, over two
/// schedules.
pub fn schedule_product_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (steps, lo, hi) in [(1000, 1e-4, 0.02), (100, 1e-3, 0.2), (7, 0.05, 0.3)] {
        let s = NoiseSchedule::build(steps, ScheduleKind::Linear, lo, hi)?;
        for t in 0..=steps {
            worst = worst.max((s.alpha_bar(t) - oracle_alpha_bar(steps, lo, hi, t)).abs());
        }
    }
    Ok(worst)
}

/// Moments of `n` forward-noise draws at step `t`, as the number of
/// standard errors by which the worst pixel mean / variance misses.
pub fn forward_moment_z_scores(t: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let schedule = NoiseSchedule::linear_scaled(100)?;
    let x0 = ImageTensor::new(1, 2, 2, vec![0.8, -0.5, 0.0, 0.25])?;
    let mut r = rng(seed);
    let mut sums = vec![0.0; 4];
    let mut sq = vec![0.0; 4];
    for _ in 0..n {
        let (xt, _) = forward_noise(&x0, t, &schedule, &mut r)?;
        for (i, v) in xt.data.iter().enumerate() {
            sums[i] += v;
            sq[i] += v * v;
        }
    }
    moment_z_scores(&x0.data, schedule.alpha_bar(t), &sums, &sq, n)
}

fn moment_z_scores(x0: &[f64], ab: f64, sums: &[f64], sq: &[f64], n: usize) -> Result<(f64, f64)> {
    let var_true = 1.0 - ab;
    let nf = n as f64;
    let mut zm: f64 = 0.0;
    let mut zv: f64 = 0.0;
    for i in 0..x0.len() {
        let mean = sums[i] / nf;
        let var = (sq[i] - nf * mean * mean) / (nf - 1.0);
        zm = zm.max((mean - ab.sqrt() * x0[i]).abs() / (var_true / nf).sqrt());
        zv = zv.max((var - var_true).abs() / (var_true * (2.0 / (nf - 1.0)).sqrt()));
    }
    Ok((zm, zv))
}

/// The same moments for `t` iterated single Markov steps.
pub fn iterated_moment_z_scores(t: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let schedule = NoiseSchedule::linear_scaled(100)?;
    let x0 = ImageTensor::new(1, 1, 2, vec![0.6, -0.9])?;
    let mut r = rng(seed);
    let mut sums = vec![0.0; 2];
    let mut sq = vec![0.0; 2];
    for _ in 0..n {
        let mut x = x0.clone();
        for s in 1..=t {
            x = noise_step(&x, s, &schedule, &mut r)?;
        }
        for (i, v) in x.data.iter().enumerate() {
            sums[i] += v;
            sq[i] += v * v;
        }
    }
    moment_z_scores(&x0.data, schedule.alpha_bar(t), &sums, &sq, n)
}

/// Predicts the exact noise separating `x_t` from a known `x0`.
pub struct OraclePredictor {
    pub x0: ImageTensor,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OraclePredictor {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let ab = self.schedule.alpha_bar(t);
        let data = x_t
            .data
            .iter()
            .zip(&self.x0.data)
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect();
        ImageTensor::new(x_t.channels, x_t.height, x_t.width, data)
    }
}

/// Max error of one oracle reverse step at t = 1 and of a full oracle
/// reverse chain on a one-pixel image.
pub fn reverse_oracle_errors(seed: u64) -> Result<(f64, f64)> {
    let schedule = NoiseSchedule::linear_scaled(100)?;
    let mut r = rng(seed);
    let x0 = ImageTensor::new(1, 1, 2, vec![0.3, -0.7])?;
    let (x1, eps) = forward_noise(&x0, 1, &schedule, &mut r)?;
    let back = reverse_step_with_eps(&x1, &eps, 1, &schedule)?;
    let one = back.data.iter().zip(&x0.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let toy = ImageTensor::new(1, 1, 1, vec![0.42])?;
    let (mut x, _) = forward_noise(&toy, schedule.steps(), &schedule, &mut r)?;
    let oracle = OraclePredictor {
        x0: toy.clone(),
        schedule: schedule.clone(),
    };
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(&oracle, &x, t, &schedule)?;
    }
    Ok((one, (x.data[0] - toy.data[0]).abs()))
}

pub fn diffusion_check() -> Check {
    let run = || -> Result<(f64, (f64, f64), (f64, f64))> {
        Ok((
            schedule_product_error()?,
            forward_moment_z_scores(15, 10_000, 11)?,
            reverse_oracle_errors(12)?,
        ))
    };
    match run() {
        Ok((prod, (zm, zv), (one, _chain))) => {
            let ok = prod <= 1e-12 && zm <= 3.0 && zv <= 3.0 && one <= 1e-6;
            let detail = format!(
                "product err {prod:.1e}, moment z-scores mean {zm:.2} var {zv:.2}, reverse err {one:.1e}"
            );
            if ok {
                Check::pass(detail)
            } else {
                Check::fail(detail)
            }
        }
        Err(e) => Check::fail(format!("error: {e}")),
    }
}

/// Worst deviation of `weighted_mean` / `aggregate` from the rational
/// oracle over random 3-client toy problems with dyadic entries.
pub fn aggregation_oracle_error(seed: u64, cases: usize) -> Result<f64> {
    let mut r = rng(seed);
    let shift = 20;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dim = r.random_range(1..20);
        let sizes: Vec<u64> = (0..3).map(|_| r.random_range(1..500)).collect();
        let ints: Vec<Vec<i64>> = (0..3)
            .map(|_| (0..dim).map(|_| r.random_range(-(1i64 << 24)..(1i64 << 24))).collect())
            .collect();
        let vecs: Vec<Vec<f64>> = ints
            .iter()
            .map(|v| v.iter().map(|&x| x as f64 / (1u64 << shift) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let us: Vec<usize> = sizes.iter().map(|&s| s as usize).collect();
        let got = weighted_mean(&refs, &us)?;
        for q in 0..dim {
            let col: Vec<i64> = ints.iter().map(|v| v[q]).collect();
            let want = oracle_weighted_mean(&col, shift, &sizes);
            worst = worst.max((got[q] - want).abs() / want.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Aggregating K copies of one parameter vector must return it unchanged.
pub fn identical_aggregate_is_exact(seed: u64) -> Result<bool> {
    let arch = ModelArch {
        input_dim: 5,
        hidden: 4,
        d: 3,
        classes: 2,
    };
    let p = ModelParams::init(arch, &mut rng(seed));
    let copies = vec![p.clone(); 10];
    let sizes: Vec<usize> = (1..=10).map(|i| i * 37).collect();
    let agg = aggregate(&copies, &sizes)?;
    Ok(agg.flat().iter().zip(p.flat()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

/// Tiny balanced labelled pool whose pixels encode the sample index, so
/// that every sample is distinguishable.
pub fn indexed_pool(num_classes: usize, per_class: usize) -> LabeledImages {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..num_classes {
        for j in 0..per_class {
            let id = (c * per_class + j) as f64;
            images.push(ImageTensor::new(1, 1, 2, vec![id, c as f64]).expect("valid shape"));
            labels.push(c);
        }
    }
    LabeledImages::new(images, labels, num_classes).expect("valid pool")
}

fn multiset(data: &LabeledImages) -> BTreeMap<(usize, Vec<u64>), usize> {
    let mut m = BTreeMap::new();
    for (img, &l) in data.images.iter().zip(&data.labels) {
        let key = (l, img.data.iter().map(|v| v.to_bits()).collect());
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

/// The shards of every scheme together equal the (possibly subsampled)
/// pool as a multiset, and their index lists cover it exactly once.
pub fn partition_conserves(spec: &PartitionSpec, pool: &LabeledImages) -> Result<bool> {
    let (base, shards) = spec.apply(pool)?;
    let mut seen: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
    seen.sort_unstable();
    if seen != (0..base.len()).collect::<Vec<_>>() {
        return Ok(false);
    }
    let mut joined = BTreeMap::new();
    for s in &shards {
        for (k, v) in multiset(&s.data) {
            *joined.entry(k).or_insert(0) += v;
        }
    }
    Ok(joined == multiset(&base))
}

/// Six clients each holding exactly one class (all different), plus one
/// client holding every class.
pub fn nid2_structure_holds(pool: &LabeledImages, seed: u64) -> Result<bool> {
    let spec = PartitionSpec {
        scheme: Scheme::Nid2,
        alpha: 1.0,
        rho: 1.0,
        clients: EXTREME_CLIENTS,
        seed,
    };
    let (_, shards) = spec.apply(pool)?;
    if shards.len() != EXTREME_CLIENTS {
        return Ok(false);
    }
    let mut single = Vec::new();
    let mut full = 0;
    for s in &shards {
        let present: Vec<usize> = s.histogram().iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, _)| i).collect();
        if present.len() == 1 {
            single.push(present[0]);
        } else if present.len() == pool.num_classes {
            full += 1;
        }
    }
    single.sort_unstable();
    single.dedup();
    Ok(single.len() == 6 && full == 1)
}

pub fn aggregation_partition_check() -> Check {
    let run = || -> Result<(f64, bool, bool, usize)> {
        let err = aggregation_oracle_error(21, 200)?;
        let ident = identical_aggregate_is_exact(22)?;
        let pool = indexed_pool(10, 60);
        let mut conserve = true;
        for seed in 0..5 {
            for scheme in [Scheme::Nid1, Scheme::Nid2, Scheme::LongTailNid1] {
                let spec = PartitionSpec {
                    scheme,
                    alpha: 0.2,
                    rho: 10.0,
                    clients: if scheme == Scheme::Nid2 { EXTREME_CLIENTS } else { 10 },
                    seed,
                };
                conserve &= partition_conserves(&spec, &pool)?;
            }
        }
        let mut nid2_ok = 0;
        for seed in 0..20 {
            nid2_ok += nid2_structure_holds(&pool, seed)? as usize;
        }
        Ok((err, ident, conserve, nid2_ok))
    };
    match run() {
        Ok((err, ident, conserve, nid2)) => {
            let ok = err <= 1e-12 && ident && conserve && nid2 == 20;
            let detail = format!(
                "aggregate err {err:.1e}, identical exact {ident}, conservation {conserve}, nid2 structure {nid2}/20 seeds"
            );
            if ok {
                Check::pass(detail)
            } else {
                Check::fail(detail)
            }
        }
        Err(e) => Check::fail(format!("error: {e}")),
    }
}

/// Realized max/min class ratio of the long-tail subsample for each `rho`,
/// with the smallest class count and its ideal value `n_max / rho`.
pub fn long_tail_realized(rho: f64, n_max: usize, seed: u64) -> Result<(usize, usize, f64)> {
    let pool = indexed_pool(10, n_max);
    let lt = make_long_tail(&pool, rho, seed)?;
    let h = lt.histogram();
    let max = *h.iter().max().unwrap_or(&0);
    let min = *h.iter().min().unwrap_or(&0);
    Ok((max, min, n_max as f64 / rho))
}

pub fn long_tail_check() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for rho in [10.0, 50.0, 100.0] {
        match long_tail_realized(rho, 500, 3) {
            Ok((max, min, ideal)) => {
                ok &= max == 500 && (min as f64 - ideal).abs() <= 1.0;
                parts.push(format!("rho {rho}: {max}/{min} = {:.2}", max as f64 / min as f64));
            }
            Err(e) => return Check::fail(format!("error: {e}")),
        }
    }
    if ok {
        Check::pass(parts.join(", "))
    } else {
        Check::fail(parts.join(", "))
    }
}

pub fn unit_bound() -> BoundInputs {
    BoundInputs {
        l0: 0.5,
        lstar: 0.0,
        l1: 1.0,
        l2: 0.0,
        b: 0.0,
        sigma2: 0.0,
        classes: 10,
        epochs: 1,
        eta: 1.0,
        xi: 1.0,
    }
}

/// Scalar re-evaluation of the bound formulas.
pub fn oracle_bound(x: &BoundInputs) -> (f64, Option<f64>) {
    let c1 = x.classes as f64 - 1.0;
    let e = x.epochs as f64;
    let w1 = 2.0 * c1 * x.l2 * e * x.eta * x.b;
    let w2 = x.l1 * e * x.eta.powi(2) * x.sigma2;
    let den = x.xi * e * x.eta * (2.0 - x.l1 * x.eta) - w1 - w2;
    let eta_max = (2.0 * x.xi - 2.0 * c1 * x.l2 * x.b) / (x.l1 * (x.xi + x.sigma2));
    (eta_max, (den > 0.0).then(|| 2.0 * (x.l0 - x.lstar) / den))
}

pub fn bound_check() -> Check {
    let run = || -> Result<(bool, bool)> {
        let r = convergence_bound(&unit_bound())?;
        let worked = r.r_min == Some(1.0) && r.eta_max == 2.0;
        let mut inputs = unit_bound();
        inputs.eta = 0.5;
        inputs.l2 = 0.01;
        inputs.b = 0.1;
        let mut last = 0.0;
        let mut monotone = true;
        for xi in [2.0, 1.5, 1.0, 0.75, 0.5] {
            inputs.xi = xi;
            match convergence_bound(&inputs)?.r_min {
                Some(v) if v > last => last = v,
                _ => monotone = false,
            }
        }
        Ok((worked, monotone))
    };
    match run() {
        Ok((worked, monotone)) => {
            let detail = format!("worked example exact {worked}, r_min decreasing in xi {monotone}");
            if worked && monotone {
                Check::pass(detail)
            } else {
                Check::fail(detail)
            }
        }
        Err(e) => Check::fail(format!("error: {e}")),
    }
}
