use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledImages;
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Pattern families, one per class (cycled with a frequency bump when there
/// are more than ten classes).
pub const FAMILIES: [&str; 10] = [
    "bars", "rings", "checkers", "gradient", "blob", "cross", "corner", "stripes2f", "dots", "wedges",
];

/// Per-sample jitter of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Maximum rotation in radians (uniform in `[-r, r]`).
    pub rotation: f64,
    /// Maximum translation as a fraction of the half-width.
    pub shift: f64,
    /// Maximum phase offset in radians for periodic families.
    pub phase: f64,
    /// Amplitude is drawn uniformly from `[1 - a, 1]`.
    pub amplitude: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            rotation: 0.5,
            shift: 0.2,
            phase: 1.5,
            amplitude: 0.4,
            noise: 0.1,
        }
    }
}

fn smooth_step(x: f64, width: f64) -> f64 {
    (x / width).tanh()
}

/// Noise-free intensity of `family` at rotated/shifted coordinates `(u, v)`
/// in `[-1, 1]^2`, roughly in `[-1, 1]`.
fn pattern(family: usize, freq: f64, u: f64, v: f64, phase: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    match family {
        0 => smooth_step((1.5 * PI * freq * u + phase).sin(), 0.35),
        1 => (2.0 * PI * freq * r + phase).cos(),
        2 => smooth_step((PI * freq * u + phase).sin() * (PI * freq * v + phase).sin(), 0.2),
        3 => (u + 0.3 * v + 0.2 * phase).clamp(-1.0, 1.0),
        4 => 2.0 * (-(r * r) / (0.18 * freq)).exp() - 1.0,
        5 => {
            let w = 0.03 / freq;
            2.0 * (-(u * u) / w).exp().max((-(v * v) / w).exp()) - 1.0
        }
        6 => {
            let a = smooth_step(u - 0.1, 0.15);
            let b = smooth_step(-v - 0.1, 0.15);
            ((a + 1.0) * (b + 1.0) / 2.0 - 1.0).clamp(-1.0, 1.0)
        }
        7 => (3.0 * PI * freq * (u + v) / 2f64.sqrt() + phase).sin(),
        8 => {
            let c = (2.5 * PI * freq * u + phase).cos() * (2.5 * PI * freq * v + phase).cos();
            2.0 * smooth_step(c - 0.5, 0.15).max(0.0) - 1.0
        }
        9 => (3.0 * v.atan2(u) + phase).cos() * smooth_step(r, 0.1),
        _ => unreachable!("family index is taken modulo the family count"),
    }
}

/// Renders one image of class `class`.
pub fn render<R: Rng + ?Sized>(class: usize, size: usize, jitter: &Jitter, rng: &mut R) -> ImageTensor {
    let family = class % FAMILIES.len();
    let freq = 1.0 + 0.5 * (class / FAMILIES.len()) as f64;
    let theta = rng.random_range(-1.0..=1.0) * jitter.rotation;
    let (dx, dy) = (
        rng.random_range(-1.0..=1.0) * jitter.shift,
        rng.random_range(-1.0..=1.0) * jitter.shift,
    );
    let phase = rng.random_range(-1.0..=1.0) * jitter.phase;
    let amp = 1.0 - rng.random::<f64>() * jitter.amplitude;
    let (s, c) = theta.sin_cos();
    let mut data = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let x = 2.0 * (col as f64 + 0.5) / size as f64 - 1.0 - dx;
            let y = 2.0 * (row as f64 + 0.5) / size as f64 - 1.0 - dy;
            let u = c * x + s * y;
            let v = -s * x + c * y;
            let noise: f64 = rng.sample(StandardNormal);
            let value = amp * pattern(family, freq, u, v, phase) + jitter.noise * noise;
            data.push(value.clamp(-1.0, 1.0));
        }
    }
    ImageTensor {
        channels: 1,
        height: size,
        width: size,
        data,
    }
}

/// Balanced procedural dataset: `per_class` single-channel `size x size`
/// images for each of `num_classes` pattern families, ordered by class.
pub fn generate_synthetic_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<LabeledImages> {
    generate_with_jitter(num_classes, per_class, size, seed, &Jitter::default())
}

pub fn generate_with_jitter(
    num_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    jitter: &Jitter,
) -> Result<LabeledImages> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size must be at least 8, got {size}")));
    }
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let mut rng = stream(seed, Stream::Dataset, &[class as u64]);
        for _ in 0..per_class {
            images.push(render(class, size, jitter, &mut rng));
            labels.push(class);
        }
    }
    LabeledImages::new(images, labels, num_classes)
}
