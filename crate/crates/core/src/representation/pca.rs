use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffusion::{Activation, TapShape, Taps};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};

/// PCA of one tap layer: mean channel vector and the top `k` principal
/// directions as rows of `components` (`k x channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPca {
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub target_dim: usize,
    pub channels: usize,
}

impl LayerPca {
    /// Fits on `tokens` (each a channel vector). Components are ordered by
    /// descending eigenvalue; each has its first nonzero entry positive.
    pub fn fit(tokens: &[Vec<f64>], target_dim: usize) -> Result<Self> {
        let channels = tokens
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Degenerate("no samples to fit PCA".into()))?;
        if target_dim == 0 || target_dim > channels {
            return Err(Error::Config(format!(
                "PCA target dim {target_dim} must be in 1..={channels}"
            )));
        }
        if tokens.len() < target_dim {
            return Err(Error::Degenerate(format!(
                "{} samples cannot support {target_dim} components",
                tokens.len()
            )));
        }
        if tokens.iter().any(|t| t.len() != channels) {
            return Err(Error::Shape("PCA samples differ in width".into()));
        }
        let n = tokens.len() as f64;
        let mut mean = vec![0.0; channels];
        for t in tokens {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = DMatrix::<f64>::zeros(channels, channels);
        let mut centered = vec![0.0; channels];
        for t in tokens {
            for (c, (v, m)) in centered.iter_mut().zip(t.iter().zip(&mean)) {
                *c = v - m;
            }
            for i in 0..channels {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..channels {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..channels {
            for j in i..channels {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self::from_moments(mean, cov, target_dim))
    }

    /// Fits on every spatial token of the given activations (all must share
    /// a channel count). Same result as [`LayerPca::fit`] on the token list,
    /// computed with one matrix product.
    pub fn fit_activations(acts: &[&Activation], target_dim: usize) -> Result<Self> {
        let channels = acts
            .first()
            .map(|a| a.channels)
            .ok_or_else(|| Error::Degenerate("no samples to fit PCA".into()))?;
        if target_dim == 0 || target_dim > channels {
            return Err(Error::Config(format!(
                "PCA target dim {target_dim} must be in 1..={channels}"
            )));
        }
        if acts.iter().any(|a| a.channels != channels) {
            return Err(Error::Shape("PCA samples differ in width".into()));
        }
        let cols: usize = acts.iter().map(|a| a.n * a.hw()).sum();
        if cols < target_dim {
            return Err(Error::Degenerate(format!(
                "{cols} samples cannot support {target_dim} components"
            )));
        }
        // channel-major token matrix, channels x cols
        let mut x = vec![0.0; channels * cols];
        let mut off = 0;
        for a in acts {
            let w = a.n * a.hw();
            for c in 0..channels {
                x[c * cols + off..c * cols + off + w].copy_from_slice(&a.data[c * w..(c + 1) * w]);
            }
            off += w;
        }
        let mut mean = vec![0.0; channels];
        for c in 0..channels {
            let row = &mut x[c * cols..(c + 1) * cols];
            let m = row.iter().sum::<f64>() / cols as f64;
            row.iter_mut().for_each(|v| *v -= m);
            mean[c] = m;
        }
        let mut cov = vec![0.0; channels * channels];
        gemm(channels, cols, channels, &x, Op::N, &x, Op::T, 0.0, &mut cov);
        let inv = 1.0 / cols as f64;
        let cov = DMatrix::from_fn(channels, channels, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            cov[a * channels + b] * inv
        });
        Ok(Self::from_moments(mean, cov, target_dim))
    }

    fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>, target_dim: usize) -> Self {
        let channels = mean.len();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..channels).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut components = Vec::with_capacity(target_dim * channels);
        let mut eigenvalues = Vec::with_capacity(target_dim);
        for &k in order.iter().take(target_dim) {
            let col = eig.eigenvectors.column(k);
            let sign = col
                .iter()
                .find(|v| v.abs() > 1e-12)
                .map_or(1.0, |v| v.signum());
            components.extend(col.iter().map(|v| v * sign));
            eigenvalues.push(eig.eigenvalues[k].max(0.0));
        }
        Self {
            mean,
            components,
            eigenvalues,
            target_dim,
            channels,
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.target_dim)
            .map(|k| {
                self.components[k * self.channels..(k + 1) * self.channels]
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &yk) in y.iter().enumerate() {
            for (o, c) in out
                .iter_mut()
                .zip(&self.components[k * self.channels..(k + 1) * self.channels])
            {
                *o += yk * c;
            }
        }
        out
    }
}

/// Layer indices (0-based into [`Taps::layers`]) that enter the fused vector.
pub const FUSED_LAYERS: [usize; 3] = [1, 2, 3];

/// Per-layer target dims `(d/2, d/4, d - d/2 - d/4)`.
pub fn target_dims(d: usize) -> [usize; 3] {
    let a = d / 2;
    let b = d / 4;
    [a, b, d - a - b]
}

/// PCA bases for tap layers L = 2, 3, 4.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub layers: [LayerPca; 3],
}

/// Every spatial token of the fused layers, across all samples in `taps`.
pub fn layer_tokens(taps: &[&Taps]) -> [Vec<Vec<f64>>; 3] {
    std::array::from_fn(|j| {
        let l = FUSED_LAYERS[j];
        let mut out = Vec::new();
        for t in taps {
            let a = &t.layers[l];
            for i in 0..a.n {
                for p in 0..a.hw() {
                    out.push(a.token(i, p));
                }
            }
        }
        out
    })
}

impl PcaBasis {
    pub fn fit(tokens: &[Vec<Vec<f64>>; 3], target_dims: [usize; 3]) -> Result<Self> {
        let l0 = LayerPca::fit(&tokens[0], target_dims[0])?;
        let l1 = LayerPca::fit(&tokens[1], target_dims[1])?;
        let l2 = LayerPca::fit(&tokens[2], target_dims[2])?;
        Ok(Self { layers: [l0, l1, l2] })
    }

    /// Fits on every spatial token of the given tap batches.
    pub fn fit_taps(taps: &[&Taps], d: usize) -> Result<Self> {
        let dims = target_dims(d);
        let fit = |j: usize| {
            let acts: Vec<&Activation> = taps.iter().map(|t| &t.layers[FUSED_LAYERS[j]]).collect();
            LayerPca::fit_activations(&acts, dims[j])
        };
        Ok(Self {
            layers: [fit(0)?, fit(1)?, fit(2)?],
        })
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.target_dim).sum()
    }

    /// Index range of each layer's segment inside a fused vector.
    pub fn segments(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.layers[0].target_dim;
        let b = a + self.layers[1].target_dim;
        [0..a, a..b, b..self.dim()]
    }

    fn check(&self, taps: &Taps, shapes: Option<&[TapShape; 4]>) -> Result<()> {
        for (j, &l) in FUSED_LAYERS.iter().enumerate() {
            if taps.layers[l].channels != self.layers[j].channels {
                return Err(Error::Shape(format!(
                    "tap L={} has {} channels, basis expects {}",
                    l + 1,
                    taps.layers[l].channels,
                    self.layers[j].channels
                )));
            }
        }
        if let Some(shapes) = shapes {
            for (l, s) in shapes.iter().enumerate() {
                let a = &taps.layers[l];
                if a.channels != s.channels || a.height != s.spatial || a.width != s.spatial {
                    return Err(Error::Shape(format!("tap L={} has the wrong shape", l + 1)));
                }
            }
        }
        Ok(())
    }

    /// Fused vector of every sample in the batch: each layer's tokens are
    /// projected through its PCA and average-pooled, then layers 2, 3, 4
    /// are concatenated. Layer 2 sits at half resolution; nearest upsampling
    /// replicates every token equally, so pooling before or after the
    /// upsample gives the same vector.
    pub fn fuse_batch(&self, taps: &Taps) -> Result<Vec<Vec<f64>>> {
        self.check(taps, None)?;
        let n = taps.n();
        Ok((0..n)
            .map(|i| {
                let mut v = Vec::with_capacity(self.dim());
                for (j, &l) in FUSED_LAYERS.iter().enumerate() {
                    // projection is affine, so pooling commutes with it
                    let m = taps.layers[l].spatial_mean(i);
                    v.extend(self.layers[j].project(&m));
                }
                v
            })
            .collect())
    }

    /// Fuses a single-sample tap set, checking it against the net's tap shapes.
    pub fn fuse(&self, taps: &Taps, shapes: &[TapShape; 4]) -> Result<Vec<f64>> {
        if taps.n() != 1 {
            return Err(Error::Shape("fuse expects a single sample".into()));
        }
        self.check(taps, Some(shapes))?;
        Ok(self.fuse_batch(taps)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_fit_matches_token_fit() {
        let mut a = Activation::zeros(5, 3, 2, 2);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.3 + (i as f64 * 0.1).sin();
        }
        let tokens: Vec<Vec<f64>> = (0..a.n)
            .flat_map(|i| (0..a.hw()).map(move |p| (i, p)))
            .map(|(i, p)| a.token(i, p))
            .collect();
        let x = LayerPca::fit(&tokens, 3).unwrap();
        let y = LayerPca::fit_activations(&[&a], 3).unwrap();
        for (p, q) in x.mean.iter().zip(&y.mean) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in x.eigenvalues.iter().zip(&y.eigenvalues) {
            assert!((p - q).abs() < 1e-10);
        }
        for (p, q) in x.components.iter().zip(&y.components) {
            assert!((p - q).abs() < 1e-8);
        }
    }
}
