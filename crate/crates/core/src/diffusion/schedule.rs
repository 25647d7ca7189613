//! Variance schedule and the closed-form forward / deterministic reverse
//! diffusion steps.

use rand::Rng;
use rand_distr::StandardNormal;

use super::image::ImageTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Constant,
}

/// Per-step variances `gamma_t`, `alpha_t = 1 - gamma_t` and the running
/// products `alpha_bar_t`. Steps are 1-indexed; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind, gamma_min: f64, gamma_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < gamma_min <= gamma_max < 1, got {gamma_min}, {gamma_max}"
            )));
        }
        let gamma: Vec<f64> = match kind {
            ScheduleKind::Constant => vec![gamma_min; steps],
            ScheduleKind::Linear if steps == 1 => vec![gamma_min],
            ScheduleKind::Linear => (0..steps)
                .map(|i| gamma_min + (gamma_max - gamma_min) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let alpha: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            gamma,
            alpha,
            alpha_bar,
        })
    }

    /// Linear schedule with the usual 1000-step endpoints rescaled to `steps`.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        Self::build(
            steps,
            ScheduleKind::Linear,
            (1e-4 * scale).min(0.5),
            (0.02 * scale).min(0.999),
        )
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form noising `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// Returns `(x_t, eps)`.
pub fn forward_noise<R: Rng + ?Sized>(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    schedule.check_step(t, 0)?;
    let eps = standard_normal(rng, x0.len());
    let xt = noise_with(x0, t, schedule, &eps)?;
    let eps = ImageTensor {
        data: eps,
        ..x0.clone()
    };
    Ok((xt, eps))
}

/// Closed-form noising with caller-supplied noise.
pub fn noise_with(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<ImageTensor> {
    schedule.check_step(t, 0)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape("noise length differs from image".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(eps).map(|(x, e)| s * x + n * e).collect();
    Ok(ImageTensor {
        data,
        ..x0.clone()
    })
}

/// One Markov step `x_t = sqrt(1 - gamma_t) x_{t-1} + sqrt(gamma_t) eps`.
pub fn noise_step<R: Rng + ?Sized>(
    x_prev: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    let g = schedule.gamma(t);
    let (s, n) = ((1.0 - g).sqrt(), g.sqrt());
    let data = x_prev
        .data
        .iter()
        .map(|x| s * x + n * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(ImageTensor {
        data,
        ..x_prev.clone()
    })
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor>;
}

/// Deterministic reverse step
/// `x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) * eps) / sqrt(a_t)`.
pub fn reverse_step_with_eps(
    x_t: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    if !x_t.same_shape(eps) {
        return Err(Error::Shape("noise prediction shape differs from x_t".into()));
    }
    let a = schedule.alpha(t);
    let coef = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let data = x_t
        .data
        .iter()
        .zip(&eps.data)
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    Ok(ImageTensor {
        data,
        ..x_t.clone()
    })
}

pub fn reverse_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_t: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    let eps = predictor.predict_eps(x_t, t)?;
    reverse_step_with_eps(x_t, &eps, t, schedule)
}
