use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::Container;
use crate::error::{Error, Result};
use crate::linalg::{gemm, silu, silu_grad, Op};

/// Architecture of the client model: a one-hidden-layer MLP encoder
/// `h: pixels -> R^d` and a linear classifier `g: R^d -> logits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub classes: usize,
}

impl ModelArch {
    pub fn encoder_len(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.d * self.hidden + self.d
    }

    pub fn classifier_len(&self) -> usize {
        self.classes * self.d + self.classes
    }
}

/// Encoder parameters `u` and classifier parameters `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ModelForward {
    pub n: usize,
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    /// `n x d` embeddings.
    pub z: Vec<f64>,
    /// `n x classes` logits.
    pub logits: Vec<f64>,
}

impl ModelForward {
    pub fn z_row(&self, i: usize) -> &[f64] {
        let d = self.z.len() / self.n;
        &self.z[i * d..(i + 1) * d]
    }

    pub fn logits_row(&self, i: usize) -> &[f64] {
        let c = self.logits.len() / self.n;
        &self.logits[i * c..(i + 1) * c]
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: ModelArch, rng: &mut R) -> Self {
        let mut u = vec![0.0; arch.encoder_len()];
        let mut v = vec![0.0; arch.classifier_len()];
        let (w1, _, w2, _) = Self::split_ranges(&arch);
        let s1 = (2.0 / arch.input_dim as f64).sqrt();
        for x in &mut u[w1] {
            *x = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let s2 = (1.0 / arch.hidden as f64).sqrt();
        for x in &mut u[w2] {
            *x = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        let s3 = (1.0 / arch.d as f64).sqrt();
        for x in &mut v[..arch.classes * arch.d] {
            *x = s3 * rng.sample::<f64, _>(StandardNormal);
        }
        Self { arch, u, v }
    }

    fn split_ranges(a: &ModelArch) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let w1 = 0..a.hidden * a.input_dim;
        let b1 = w1.end..w1.end + a.hidden;
        let w2 = b1.end..b1.end + a.d * a.hidden;
        let b2 = w2.end..w2.end + a.d;
        (w1, b1, w2, b2)
    }

    pub fn len(&self) -> usize {
        self.u.len() + self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `u` followed by `v`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.u.clone();
        out.extend_from_slice(&self.v);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let nu = self.u.len();
        self.u.copy_from_slice(&flat[..nu]);
        self.v.copy_from_slice(&flat[nu..]);
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Batched forward over `n` flattened inputs (`n x input_dim`).
    pub fn forward(&self, x: &[f64], n: usize) -> Result<ModelForward> {
        let a = &self.arch;
        if x.len() != n * a.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} inputs per sample",
                a.input_dim
            )));
        }
        let (w1, b1, w2, b2) = Self::split_ranges(a);
        let mut pre = vec![0.0; n * a.hidden];
        gemm(n, a.input_dim, a.hidden, x, Op::N, &self.u[w1], Op::T, 0.0, &mut pre);
        let bias1 = &self.u[b1];
        for row in pre.chunks_mut(a.hidden) {
            for (p, b) in row.iter_mut().zip(bias1) {
                *p += b;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&p| silu(p)).collect();
        let mut z = vec![0.0; n * a.d];
        gemm(n, a.hidden, a.d, &hidden, Op::N, &self.u[w2], Op::T, 0.0, &mut z);
        let bias2 = &self.u[b2];
        for row in z.chunks_mut(a.d) {
            for (p, b) in row.iter_mut().zip(bias2) {
                *p += b;
            }
        }
        let logits = self.classify(&z, n);
        Ok(ModelForward {
            n,
            x: x.to_vec(),
            pre,
            hidden,
            z,
            logits,
        })
    }

    /// Classifier head on `n x d` embeddings.
    pub fn classify(&self, z: &[f64], n: usize) -> Vec<f64> {
        let a = &self.arch;
        let mut logits = vec![0.0; n * a.classes];
        gemm(n, a.d, a.classes, z, Op::N, &self.v[..a.classes * a.d], Op::T, 0.0, &mut logits);
        let c = &self.v[a.classes * a.d..];
        for row in logits.chunks_mut(a.classes) {
            for (p, b) in row.iter_mut().zip(c) {
                *p += b;
            }
        }
        logits
    }

    /// Gradients `(du, dv)` given upstream `dz` (`n x d`) and `dlogits`
    /// (`n x classes`). The classifier's contribution to `dz` is added here.
    pub fn backward(&self, fwd: &ModelForward, dz: &[f64], dlogits: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = &self.arch;
        let n = fwd.n;
        let mut dv = vec![0.0; self.v.len()];
        let (vw, vb) = dv.split_at_mut(a.classes * a.d);
        gemm(a.classes, n, a.d, dlogits, Op::T, &fwd.z, Op::N, 0.0, vw);
        for row in dlogits.chunks(a.classes) {
            for (b, g) in vb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dz_total = dz.to_vec();
        gemm(n, a.classes, a.d, dlogits, Op::N, &self.v[..a.classes * a.d], Op::N, 1.0, &mut dz_total);

        let (w1, b1, w2, b2) = Self::split_ranges(a);
        let mut du = vec![0.0; self.u.len()];
        gemm(a.d, n, a.hidden, &dz_total, Op::T, &fwd.hidden, Op::N, 0.0, &mut du[w2.clone()]);
        for row in dz_total.chunks(a.d) {
            for (b, g) in du[b2.clone()].iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dh = vec![0.0; n * a.hidden];
        gemm(n, a.d, a.hidden, &dz_total, Op::N, &self.u[w2], Op::N, 0.0, &mut dh);
        for (g, &p) in dh.iter_mut().zip(&fwd.pre) {
            *g *= silu_grad(p);
        }
        gemm(a.hidden, n, a.input_dim, &dh, Op::T, &fwd.x, Op::N, 0.0, &mut du[w1]);
        for row in dh.chunks(a.hidden) {
            for (b, g) in du[b1.clone()].iter_mut().zip(row) {
                *b += g;
            }
        }
        (du, dv)
    }

    /// Serializes into the checkpoint container with kind `flmodel`.
    pub fn to_container(&self) -> Container {
        let a = &self.arch;
        let mut c = Container::new("flmodel");
        c.meta = vec![
            ("input_dim".into(), a.input_dim.to_string()),
            ("hidden".into(), a.hidden.to_string()),
            ("d".into(), a.d.to_string()),
            ("classes".into(), a.classes.to_string()),
        ];
        c.params.push(("encoder.u".into(), self.u.clone()));
        c.params.push(("classifier.v".into(), self.v.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "flmodel" {
            return Err(Error::Corrupt(format!("expected an flmodel checkpoint, got `{}`", c.kind)));
        }
        let arch = ModelArch {
            input_dim: c.meta_usize("input_dim")?,
            hidden: c.meta_usize("hidden")?,
            d: c.meta_usize("d")?,
            classes: c.meta_usize("classes")?,
        };
        let u = c.param("encoder.u")?.to_vec();
        let v = c.param("classifier.v")?.to_vec();
        if u.len() != arch.encoder_len() || v.len() != arch.classifier_len() {
            return Err(Error::Corrupt("flmodel parameter lengths do not match manifest".into()));
        }
        Ok(Self { arch, u, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn backward_matches_finite_differences() {
        let arch = ModelArch {
            input_dim: 5,
            hidden: 4,
            d: 3,
            classes: 2,
        };
        let mut rng = stream(2, Stream::ModelInit, &[]);
        let mut m = ModelParams::init(arch, &mut rng);
        for x in m.u.iter_mut().chain(m.v.iter_mut()) {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let n = 3;
        let x: Vec<f64> = (0..n * 5).map(|i| (i as f64 * 0.77).sin()).collect();
        let cz: Vec<f64> = (0..n * 3).map(|i| (i as f64 * 1.3).cos()).collect();
        let cl: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.4).sin()).collect();
        // scalar objective: <cz, z> + <cl, logits>
        let obj = |m: &ModelParams| {
            let f = m.forward(&x, n).unwrap();
            f.z.iter().zip(&cz).map(|(a, b)| a * b).sum::<f64>()
                + f.logits.iter().zip(&cl).map(|(a, b)| a * b).sum::<f64>()
        };
        let f = m.forward(&x, n).unwrap();
        let (du, dv) = m.backward(&f, &cz, &cl);
        let h = 1e-6;
        let flat = m.flat();
        let an: Vec<f64> = du.iter().chain(&dv).cloned().collect();
        for i in 0..flat.len() {
            let mut p = m.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            p.set_flat(&fp);
            let lp = obj(&p);
            fp[i] -= 2.0 * h;
            p.set_flat(&fp);
            let lm = obj(&p);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-6 + 1e-5 * fd.abs(), "param {i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn container_roundtrip_is_f32() {
        let arch = ModelArch {
            input_dim: 4,
            hidden: 3,
            d: 2,
            classes: 2,
        };
        let m = ModelParams::init(arch, &mut stream(1, Stream::ModelInit, &[]));
        let mut buf = Vec::new();
        m.to_container().write_to(&mut buf).unwrap();
        let back = ModelParams::from_container(&Container::read_from(&buf[..]).unwrap()).unwrap();
        for (a, b) in back.u.iter().zip(&m.u) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
