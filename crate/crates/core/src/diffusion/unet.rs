//! Tiny conditional UNet noise predictor with four decoder feature taps.
//!
//! Layout of every activation buffer is channel-major over the batch:
//! `data[c * (n * h * w) + i * (h * w) + p]`, so 1x1 mixing and im2col
//! convolutions are single GEMMs over the whole batch.
//!
//! Conditioning: the sinusoidal timestep embedding goes through a two-layer
//! MLP; the condition vector and the prompt features are each linearly
//! projected to the same width and summed in. Every block adds a learned
//! per-channel projection of that embedding before its activation.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use super::image::ImageTensor;
use super::schedule::NoisePredictor;
use crate::error::{Error, Result};
use crate::linalg::{gemm, silu, silu_grad, Op};

/// Largest sub-batch evaluated in one pass by [`DenoiserNet::forward_batch`].
const FORWARD_CHUNK: usize = 32;

/// Batched feature map `channels x n x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub channels: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn zeros(channels: usize, n: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            n,
            height,
            width,
            data: vec![0.0; channels * n * height * width],
        }
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// Stacks single images into a batch.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (c, h, w) = first.shape();
        let n = images.len();
        let hw = h * w;
        let mut out = Self::zeros(c, n, h, w);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (c, h, w) {
                return Err(Error::Shape("images in a batch must share a shape".into()));
            }
            for ch in 0..c {
                out.data[ch * n * hw + i * hw..ch * n * hw + (i + 1) * hw]
                    .copy_from_slice(&img.data[ch * hw..(ch + 1) * hw]);
            }
        }
        Ok(out)
    }

    /// Copies sample `i` out as a single-sample activation.
    pub fn sample(&self, i: usize) -> Activation {
        let hw = self.hw();
        let mut out = Activation::zeros(self.channels, 1, self.height, self.width);
        for c in 0..self.channels {
            let src = c * self.n * hw + i * hw;
            out.data[c * hw..(c + 1) * hw].copy_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    pub fn to_image(&self, i: usize) -> ImageTensor {
        let s = self.sample(i);
        ImageTensor {
            channels: s.channels,
            height: s.height,
            width: s.width,
            data: s.data,
        }
    }

    /// Samples `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Activation {
        let hw = self.hw();
        let m = end - start;
        let mut out = Activation::zeros(self.channels, m, self.height, self.width);
        for c in 0..self.channels {
            let src = c * self.n * hw + start * hw;
            out.data[c * m * hw..(c + 1) * m * hw].copy_from_slice(&self.data[src..src + m * hw]);
        }
        out
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[Activation]) -> Activation {
        let first = &parts[0];
        let hw = first.hw();
        let n: usize = parts.iter().map(|p| p.n).sum();
        let mut out = Activation::zeros(first.channels, n, first.height, first.width);
        for c in 0..first.channels {
            let mut off = c * n * hw;
            for p in parts {
                let len = p.n * hw;
                out.data[off..off + len].copy_from_slice(&p.data[c * len..(c + 1) * len]);
                off += len;
            }
        }
        out
    }

    /// Mean channel vector of sample `i` over its spatial positions.
    pub fn spatial_mean(&self, i: usize) -> Vec<f64> {
        let hw = self.hw();
        (0..self.channels)
            .map(|c| {
                let s = c * self.n * hw + i * hw;
                self.data[s..s + hw].iter().sum::<f64>() / hw as f64
            })
            .collect()
    }

    /// Channel vector of sample `i` at spatial position `p`.
    pub fn token(&self, i: usize, p: usize) -> Vec<f64> {
        let hw = self.hw();
        (0..self.channels)
            .map(|c| self.data[c * self.n * hw + i * hw + p])
            .collect()
    }
}

/// The four decoder taps of one forward pass, L = 1..=4 at indices 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub layers: [Activation; 4],
}

impl Taps {
    pub fn n(&self) -> usize {
        self.layers[0].n
    }

    pub fn sample(&self, i: usize) -> Taps {
        Taps {
            layers: std::array::from_fn(|l| self.layers[l].sample(i)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapShape {
    pub channels: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub enc_channels: [usize; 3],
    pub tap_channels: [usize; 4],
    pub emb_width: usize,
    pub time_features: usize,
    pub cond_width: usize,
}

impl DenoiserConfig {
    /// Default desk-scale architecture for `size x size` single-channel
    /// inputs. `width` multiplies every channel count.
    pub fn desk(size: usize, cond_width: usize, width: usize) -> Self {
        let w = width.max(1);
        Self {
            image_size: size,
            in_channels: 1,
            enc_channels: [8 * w, 16 * w, 32 * w],
            tap_channels: [64 * w, 64 * w, 32 * w, 16 * w],
            emb_width: 32,
            time_features: 32,
            cond_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.time_features % 2 != 0 || self.time_features == 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        let all = self.enc_channels.iter().chain(&self.tap_channels);
        if self.in_channels == 0 || self.emb_width == 0 || self.cond_width == 0 || all.clone().any(|&c| c == 0) {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        Ok(())
    }

    pub fn tap_shapes(&self) -> [TapShape; 4] {
        let s = self.image_size;
        let spatial = [s / 4, s / 2, s, s];
        std::array::from_fn(|l| TapShape {
            channels: self.tap_channels[l],
            spatial: spatial[l],
        })
    }
}

/// Named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    len: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: &str, shape: &[usize]) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.len..self.len + n;
        self.len += n;
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            range: range.clone(),
        });
        range
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvIdx {
    w: Range<usize>,
    b: Range<usize>,
    emb: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MergeIdx {
    w_up: Range<usize>,
    w_skip: Range<usize>,
    b: Range<usize>,
    emb: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Index {
    time_w1: Range<usize>,
    time_b1: Range<usize>,
    time_w2: Range<usize>,
    time_b2: Range<usize>,
    cond_w: Range<usize>,
    prompt_w: Range<usize>,
    enc0: ConvIdx,
    enc1: ConvIdx,
    enc2: ConvIdx,
    mid: ConvIdx,
    up2: MergeIdx,
    up3: MergeIdx,
    dec4: ConvIdx,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

/// Noise-prediction UNet. Parameters live in one flat vector described by
/// [`DenoiserNet::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    specs: Vec<ParamSpec>,
    idx: Index,
    pub params: Vec<f64>,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub eps: Option<Activation>,
    pub taps: Taps,
}

struct ConvCache {
    cols: Vec<f64>,
    pre: Vec<f64>,
}

struct MergeCache {
    pre: Vec<f64>,
}

struct Cache {
    n: usize,
    phi: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    e: Vec<f64>,
    ea: Vec<f64>,
    cond: Option<Vec<f64>>,
    prompts: Vec<f64>,
    enc0: ConvCache,
    enc1: ConvCache,
    enc2: ConvCache,
    mid: ConvCache,
    s0: Activation,
    s1: Activation,
    up2: MergeCache,
    up3: MergeCache,
    dec4: ConvCache,
    out_cols: Vec<f64>,
}

/// Gradients of a scalar loss with respect to the parameters and to each
/// sample's prompt feature row.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub prompts: Vec<f64>,
}

fn im2col(x: &Activation, stride: usize) -> (Vec<f64>, usize, usize) {
    let (h, w) = (x.height, x.width);
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let n = x.n;
    let cols_n = n * ho * wo;
    let mut cols = vec![0.0; x.channels * 9 * cols_n];
    let hw = h * w;
    for c in 0..x.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                for i in 0..n {
                    let src = c * n * hw + i * hw;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = row + i * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[dst + ox] = x.data[src + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], channels: usize, n: usize, h: usize, w: usize, stride: usize) -> Activation {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let cols_n = n * ho * wo;
    let hw = h * w;
    let mut out = Activation::zeros(channels, n, h, w);
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                for i in 0..n {
                    let dst = c * n * hw + i * hw;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row + i * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out.data[dst + iy as usize * w + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
fn upsample2(x: &[f64], channels: usize, n: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * n * h2 * w2];
    for cn in 0..channels * n {
        let src = &x[cn * h * w..(cn + 1) * h * w];
        let dst = &mut out[cn * h2 * w2..(cn + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
fn downsum2(x: &[f64], channels: usize, n: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * n * h * w];
    for cn in 0..channels * n {
        let src = &x[cn * h2 * w2..(cn + 1) * h2 * w2];
        let dst = &mut out[cn * h * w..(cn + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

/// Adds `bias[c] + emb[i * cout + c]` to every position and returns the
/// pre-activation plus its SiLU.
fn bias_act(pre: &mut [f64], bias: &[f64], emb: &[f64], cout: usize, n: usize, hw: usize) -> Vec<f64> {
    for c in 0..cout {
        for i in 0..n {
            let add = bias[c] + emb[i * cout + c];
            for v in &mut pre[c * n * hw + i * hw..c * n * hw + (i + 1) * hw] {
                *v += add;
            }
        }
    }
    pre.iter().map(|&v| silu(v)).collect()
}

/// Backprop through `out = silu(pre)` with per-channel bias and per-sample
/// embedding bias. Returns `dpre`, accumulating `db` and returning `demb`
/// (`n x cout`).
fn bias_act_back(
    dout: &[f64],
    pre: &[f64],
    cout: usize,
    n: usize,
    hw: usize,
    db: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let dpre: Vec<f64> = dout.iter().zip(pre).map(|(d, &p)| d * silu_grad(p)).collect();
    let mut demb = vec![0.0; n * cout];
    for c in 0..cout {
        for i in 0..n {
            let s: f64 = dpre[c * n * hw + i * hw..c * n * hw + (i + 1) * hw].iter().sum();
            demb[i * cout + c] = s;
            db[c] += s;
        }
    }
    (dpre, demb)
}

fn normal_fill<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], std: f64) {
    for v in out {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (e, tf, cw) = (c.emb_width, c.time_features, c.cond_width);
        let [e0, e1, e2] = c.enc_channels;
        let [t0, t1, t2, t3] = c.tap_channels;
        let cin = c.in_channels;
        let mut b = LayoutBuilder::default();
        let conv = |b: &mut LayoutBuilder, name: &str, cout: usize, k: usize| ConvIdx {
            w: b.add(&format!("{name}.weight"), &[cout, k]),
            b: b.add(&format!("{name}.bias"), &[cout]),
            emb: b.add(&format!("{name}.emb"), &[cout, e]),
        };
        let time_w1 = b.add("time.w1", &[e, tf]);
        let time_b1 = b.add("time.b1", &[e]);
        let time_w2 = b.add("time.w2", &[e, e]);
        let time_b2 = b.add("time.b2", &[e]);
        let cond_w = b.add("cond.weight", &[e, cw]);
        let prompt_w = b.add("prompt.weight", &[e, cw]);
        let enc0 = conv(&mut b, "enc0", e0, cin * 9);
        let enc1 = conv(&mut b, "enc1", e1, e0 * 9);
        let enc2 = conv(&mut b, "enc2", e2, e1 * 9);
        let mid = conv(&mut b, "mid", t0, e2 * 9);
        let up2 = MergeIdx {
            w_up: b.add("up2.w_up", &[t1, t0]),
            w_skip: b.add("up2.w_skip", &[t1, e1]),
            b: b.add("up2.bias", &[t1]),
            emb: b.add("up2.emb", &[t1, e]),
        };
        let up3 = MergeIdx {
            w_up: b.add("up3.w_up", &[t2, t1]),
            w_skip: b.add("up3.w_skip", &[t2, e0]),
            b: b.add("up3.bias", &[t2]),
            emb: b.add("up3.emb", &[t2, e]),
        };
        let dec4 = conv(&mut b, "dec4", t3, t2);
        let out_w = b.add("out.weight", &[cin, t3 * 9]);
        let out_b = b.add("out.bias", &[cin]);
        let idx = Index {
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_w,
            prompt_w,
            enc0,
            enc1,
            enc2,
            mid,
            up2,
            up3,
            dec4,
            out_w,
            out_b,
        };
        let mut params = vec![0.0; b.len];
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let emb_std = (1.0 / e as f64).sqrt();
        normal_fill(rng, &mut params[idx.time_w1.clone()], he(tf));
        normal_fill(rng, &mut params[idx.time_w2.clone()], (1.0 / e as f64).sqrt());
        normal_fill(rng, &mut params[idx.cond_w.clone()], 0.1 / (cw as f64).sqrt());
        normal_fill(rng, &mut params[idx.prompt_w.clone()], (1.0 / cw as f64).sqrt());
        for (ci, fan) in [
            (&idx.enc0, cin * 9),
            (&idx.enc1, e0 * 9),
            (&idx.enc2, e1 * 9),
            (&idx.mid, e2 * 9),
            (&idx.dec4, t2),
        ] {
            normal_fill(rng, &mut params[ci.w.clone()], he(fan));
            normal_fill(rng, &mut params[ci.emb.clone()], emb_std);
        }
        for (mi, fan) in [(&idx.up2, t0 + e1), (&idx.up3, t1 + e0)] {
            normal_fill(rng, &mut params[mi.w_up.clone()], he(fan));
            normal_fill(rng, &mut params[mi.w_skip.clone()], he(fan));
            normal_fill(rng, &mut params[mi.emb.clone()], emb_std);
        }
        // output head starts at zero so the untrained net predicts eps = 0
        Ok(Self {
            config,
            specs: b.specs,
            idx,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn cond_width(&self) -> usize {
        self.config.cond_width
    }

    pub fn tap_shapes(&self) -> [TapShape; 4] {
        self.config.tap_shapes()
    }

    /// Named parameter tensors in storage order.
    pub fn layout(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn time_features(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_features / 2;
        let mut out = vec![0.0; 2 * half];
        for k in 0..half {
            let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out[k] = (t as f64 * w).sin();
            out[half + k] = (t as f64 * w).cos();
        }
        out
    }

    fn conv_forward(
        &self,
        x: &Activation,
        ci: &ConvIdx,
        cout: usize,
        stride: usize,
        ea: &[f64],
        k3: bool,
    ) -> (Activation, ConvCache) {
        let n = x.n;
        let (cols, ho, wo) = if k3 {
            im2col(x, stride)
        } else {
            (x.data.clone(), x.height, x.width)
        };
        let k = if k3 { x.channels * 9 } else { x.channels };
        let cols_n = n * ho * wo;
        let mut pre = vec![0.0; cout * cols_n];
        gemm(cout, k, cols_n, self.p(&ci.w), Op::N, &cols, Op::N, 0.0, &mut pre);
        let emb = self.emb_bias(ea, &ci.emb, cout, n);
        let out = bias_act(&mut pre, self.p(&ci.b), &emb, cout, n, ho * wo);
        (
            Activation {
                channels: cout,
                n,
                height: ho,
                width: wo,
                data: out,
            },
            ConvCache { cols, pre },
        )
    }

    /// Per-sample block bias `ea (n x e) * W^T` -> `n x cout`.
    fn emb_bias(&self, ea: &[f64], r: &Range<usize>, cout: usize, n: usize) -> Vec<f64> {
        let e = self.config.emb_width;
        let mut out = vec![0.0; n * cout];
        gemm(n, e, cout, ea, Op::N, self.p(r), Op::T, 0.0, &mut out);
        out
    }

    fn merge_forward(
        &self,
        low: &Activation,
        skip: &Activation,
        mi: &MergeIdx,
        cout: usize,
        ea: &[f64],
    ) -> (Activation, MergeCache) {
        let n = low.n;
        let low_n = n * low.hw();
        let mut a = vec![0.0; cout * low_n];
        gemm(cout, low.channels, low_n, self.p(&mi.w_up), Op::N, &low.data, Op::N, 0.0, &mut a);
        let mut pre = upsample2(&a, cout, n, low.height, low.width);
        let skip_n = n * skip.hw();
        gemm(cout, skip.channels, skip_n, self.p(&mi.w_skip), Op::N, &skip.data, Op::N, 1.0, &mut pre);
        let emb = self.emb_bias(ea, &mi.emb, cout, n);
        let out = bias_act(&mut pre, self.p(&mi.b), &emb, cout, n, skip.hw());
        (
            Activation {
                channels: cout,
                n,
                height: skip.height,
                width: skip.width,
                data: out,
            },
            MergeCache { pre },
        )
    }

    fn check_inputs(&self, x: &Activation, t: &[usize], cond: Option<&[f64]>, prompts: &[f64]) -> Result<()> {
        let c = &self.config;
        if x.channels != c.in_channels || x.height != c.image_size || x.width != c.image_size {
            return Err(Error::Shape(format!(
                "denoiser expects {}x{}x{} input, got {}x{}x{}",
                c.in_channels, c.image_size, c.image_size, x.channels, x.height, x.width
            )));
        }
        if t.len() != x.n {
            return Err(Error::Shape("one timestep per sample required".into()));
        }
        if prompts.len() != x.n * c.cond_width {
            return Err(Error::Shape(format!(
                "prompt features must be {} wide per sample",
                c.cond_width
            )));
        }
        if let Some(cond) = cond {
            if cond.len() != x.n * c.cond_width {
                return Err(Error::Shape(format!(
                    "condition must be {} wide per sample",
                    c.cond_width
                )));
            }
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        x: &Activation,
        t: &[usize],
        cond: Option<&[f64]>,
        prompts: &[f64],
        head: bool,
        keep: bool,
    ) -> Result<(Forward, Option<Cache>)> {
        self.check_inputs(x, t, cond, prompts)?;
        let c = &self.config;
        let n = x.n;
        let (e, tf, cw) = (c.emb_width, c.time_features, c.cond_width);
        let idx = &self.idx;

        let mut phi = Vec::with_capacity(n * tf);
        for &ti in t {
            phi.extend(self.time_features(ti));
        }
        let mut h1 = vec![0.0; n * e];
        gemm(n, tf, e, &phi, Op::N, self.p(&idx.time_w1), Op::T, 0.0, &mut h1);
        let b1 = self.p(&idx.time_b1);
        for (i, v) in h1.iter_mut().enumerate() {
            *v += b1[i % e];
        }
        let a1: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();
        let mut emb = vec![0.0; n * e];
        gemm(n, e, e, &a1, Op::N, self.p(&idx.time_w2), Op::T, 0.0, &mut emb);
        let b2 = self.p(&idx.time_b2);
        for (i, v) in emb.iter_mut().enumerate() {
            *v += b2[i % e];
        }
        if let Some(cond) = cond {
            gemm(n, cw, e, cond, Op::N, self.p(&idx.cond_w), Op::T, 1.0, &mut emb);
        }
        gemm(n, cw, e, prompts, Op::N, self.p(&idx.prompt_w), Op::T, 1.0, &mut emb);
        let ea: Vec<f64> = emb.iter().map(|&v| silu(v)).collect();

        let [e0, e1, e2] = c.enc_channels;
        let [t0, t1, t2, t3] = c.tap_channels;
        let (s0, c0) = self.conv_forward(x, &idx.enc0, e0, 1, &ea, true);
        let (s1, c1) = self.conv_forward(&s0, &idx.enc1, e1, 2, &ea, true);
        let (s2, c2) = self.conv_forward(&s1, &idx.enc2, e2, 2, &ea, true);
        let (tap1, cm) = self.conv_forward(&s2, &idx.mid, t0, 1, &ea, true);
        let (tap2, cu2) = self.merge_forward(&tap1, &s1, &idx.up2, t1, &ea);
        let (tap3, cu3) = self.merge_forward(&tap2, &s0, &idx.up3, t2, &ea);
        let (tap4, cd4) = self.conv_forward(&tap3, &idx.dec4, t3, 1, &ea, false);

        let (eps, out_cols) = if head {
            let (cols, ho, wo) = im2col(&tap4, 1);
            let cols_n = n * ho * wo;
            let cin = c.in_channels;
            let mut out = vec![0.0; cin * cols_n];
            gemm(cin, t3 * 9, cols_n, self.p(&idx.out_w), Op::N, &cols, Op::N, 0.0, &mut out);
            let ob = self.p(&idx.out_b);
            for ch in 0..cin {
                for v in &mut out[ch * cols_n..(ch + 1) * cols_n] {
                    *v += ob[ch];
                }
            }
            (
                Some(Activation {
                    channels: cin,
                    n,
                    height: ho,
                    width: wo,
                    data: out,
                }),
                cols,
            )
        } else {
            (None, Vec::new())
        };

        let cache = keep.then(|| Cache {
            n,
            phi,
            h1,
            a1,
            e: emb,
            ea,
            cond: cond.map(|c| c.to_vec()),
            prompts: prompts.to_vec(),
            enc0: c0,
            enc1: c1,
            enc2: c2,
            mid: cm,
            s0: s0.clone(),
            s1: s1.clone(),
            up2: cu2,
            up3: cu3,
            dec4: cd4,
            out_cols,
        });
        let taps = Taps {
            layers: [tap1, tap2, tap3, tap4],
        };
        Ok((Forward { eps, taps }, cache))
    }

    /// Batched forward. `cond` and `prompts` are `n x cond_width` row-major.
    /// With `head = false` only the decoder taps are computed.
    pub fn forward_batch(
        &self,
        x: &Activation,
        t: &[usize],
        cond: Option<&[f64]>,
        prompts: &[f64],
        head: bool,
    ) -> Result<Forward> {
        if x.n <= FORWARD_CHUNK {
            return Ok(self.forward_impl(x, t, cond, prompts, head, false)?.0);
        }
        self.check_inputs(x, t, cond, prompts)?;
        // bounded working set: im2col buffers grow linearly with the batch
        let cw = self.config.cond_width;
        let mut parts = Vec::with_capacity(x.n.div_ceil(FORWARD_CHUNK));
        for start in (0..x.n).step_by(FORWARD_CHUNK) {
            let end = (start + FORWARD_CHUNK).min(x.n);
            let c = cond.map(|c| &c[start * cw..end * cw]);
            let p = &prompts[start * cw..end * cw];
            parts.push(self.forward_impl(&x.slice(start, end), &t[start..end], c, p, head, false)?.0);
        }
        let eps = head.then(|| {
            let e: Vec<Activation> = parts.iter_mut().map(|f| f.eps.take().expect("head requested")).collect();
            Activation::concat(&e)
        });
        let taps = Taps {
            layers: std::array::from_fn(|l| {
                let layer: Vec<Activation> = parts.iter_mut().map(|f| std::mem::replace(&mut f.taps.layers[l], Activation::zeros(0, 0, 0, 0))).collect();
                Activation::concat(&layer)
            }),
        };
        Ok(Forward { eps, taps })
    }

    /// Single-sample forward: noise prediction plus the four taps.
    pub fn forward(
        &self,
        x_t: &ImageTensor,
        t: usize,
        cond: Option<&[f64]>,
        prompt: &[f64],
    ) -> Result<(ImageTensor, Taps)> {
        let x = Activation::from_images(&[x_t])?;
        let f = self.forward_batch(&x, &[t], cond, prompt, true)?;
        let eps = f.eps.expect("head requested").to_image(0);
        Ok((eps, f.taps))
    }

    /// Mean squared error between predicted and target noise over all
    /// elements of the batch, with gradients.
    pub fn loss_and_grad(
        &self,
        x_t: &Activation,
        t: &[usize],
        cond: Option<&[f64]>,
        prompts: &[f64],
        eps: &[f64],
    ) -> Result<(f64, Gradients)> {
        let (fwd, cache) = self.forward_impl(x_t, t, cond, prompts, true, true)?;
        let cache = cache.expect("cache requested");
        let pred = fwd.eps.expect("head requested");
        if eps.len() != pred.data.len() {
            return Err(Error::Shape("target noise length differs from prediction".into()));
        }
        let count = eps.len() as f64;
        let mut loss = 0.0;
        let dpred: Vec<f64> = pred
            .data
            .iter()
            .zip(eps)
            .map(|(p, e)| {
                let d = p - e;
                loss += d * d;
                2.0 * d / count
            })
            .collect();
        let grads = self.backward(&cache, &fwd.taps, &dpred);
        Ok((loss / count, grads))
    }

    /// Mean squared error only.
    pub fn loss(
        &self,
        x_t: &Activation,
        t: &[usize],
        cond: Option<&[f64]>,
        prompts: &[f64],
        eps: &[f64],
    ) -> Result<f64> {
        let pred = self
            .forward_batch(x_t, t, cond, prompts, true)?
            .eps
            .expect("head requested");
        if eps.len() != pred.data.len() {
            return Err(Error::Shape("target noise length differs from prediction".into()));
        }
        let s: f64 = pred.data.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum();
        Ok(s / eps.len() as f64)
    }

    fn conv_backward(
        &self,
        dout: &[f64],
        cache: &ConvCache,
        ci: &ConvIdx,
        input_shape: (usize, usize, usize, usize),
        out_hw: usize,
        stride: usize,
        k3: bool,
        g: &mut [f64],
    ) -> (Activation, Vec<f64>) {
        let (cin, n, h, w) = input_shape;
        let w_len = ci.b.len();
        let cout = w_len;
        let (dpre, demb) = bias_act_back(dout, &cache.pre, cout, n, out_hw, &mut g[ci.b.clone()]);
        let k = if k3 { cin * 9 } else { cin };
        let cols_n = n * out_hw;
        gemm(cout, cols_n, k, &dpre, Op::N, &cache.cols, Op::T, 1.0, &mut g[ci.w.clone()]);
        let mut dcols = vec![0.0; k * cols_n];
        gemm(k, cout, cols_n, self.p(&ci.w), Op::T, &dpre, Op::N, 0.0, &mut dcols);
        let dx = if k3 {
            col2im(&dcols, cin, n, h, w, stride)
        } else {
            Activation {
                channels: cin,
                n,
                height: h,
                width: w,
                data: dcols,
            }
        };
        (dx, demb)
    }

    fn merge_backward(
        &self,
        dout: &[f64],
        cache: &MergeCache,
        mi: &MergeIdx,
        low: &Activation,
        skip: &Activation,
        g: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = low.n;
        let cout = mi.b.len();
        let (dpre, demb) = bias_act_back(dout, &cache.pre, cout, n, skip.hw(), &mut g[mi.b.clone()]);
        let skip_n = n * skip.hw();
        gemm(cout, skip_n, skip.channels, &dpre, Op::N, &skip.data, Op::T, 1.0, &mut g[mi.w_skip.clone()]);
        let mut dskip = vec![0.0; skip.channels * skip_n];
        gemm(skip.channels, cout, skip_n, self.p(&mi.w_skip), Op::T, &dpre, Op::N, 0.0, &mut dskip);
        let da = downsum2(&dpre, cout, n, low.height, low.width);
        let low_n = n * low.hw();
        gemm(cout, low_n, low.channels, &da, Op::N, &low.data, Op::T, 1.0, &mut g[mi.w_up.clone()]);
        let mut dlow = vec![0.0; low.channels * low_n];
        gemm(low.channels, cout, low_n, self.p(&mi.w_up), Op::T, &da, Op::N, 0.0, &mut dlow);
        (dlow, dskip, demb)
    }

    fn emb_grad(&self, demb: &[f64], r: &Range<usize>, cout: usize, n: usize, ea: &[f64], g: &mut [f64], dea: &mut [f64]) {
        let e = self.config.emb_width;
        gemm(cout, n, e, demb, Op::T, ea, Op::N, 1.0, &mut g[r.clone()]);
        gemm(n, cout, e, demb, Op::N, self.p(r), Op::N, 1.0, dea);
    }

    fn backward(&self, cache: &Cache, taps: &Taps, dpred: &[f64]) -> Gradients {
        let c = &self.config;
        let idx = &self.idx;
        let n = cache.n;
        let s = c.image_size;
        let (e, tf, cw) = (c.emb_width, c.time_features, c.cond_width);
        let [e0, e1, e2] = c.enc_channels;
        let [t0, _t1, t2, t3] = c.tap_channels;
        let cin = c.in_channels;
        let mut g = vec![0.0; self.params.len()];
        let mut dea = vec![0.0; n * e];

        // output head
        let cols_n = n * s * s;
        for ch in 0..cin {
            g[idx.out_b.start + ch] += dpred[ch * cols_n..(ch + 1) * cols_n].iter().sum::<f64>();
        }
        gemm(cin, cols_n, t3 * 9, dpred, Op::N, &cache.out_cols, Op::T, 1.0, &mut g[idx.out_w.clone()]);
        let mut dcols = vec![0.0; t3 * 9 * cols_n];
        gemm(t3 * 9, cin, cols_n, self.p(&idx.out_w), Op::T, dpred, Op::N, 0.0, &mut dcols);
        let dtap4 = col2im(&dcols, t3, n, s, s, 1);

        let [tap1, tap2, tap3, _] = &taps.layers;
        let (dtap3, demb) = self.conv_backward(&dtap4.data, &cache.dec4, &idx.dec4, (t2, n, s, s), s * s, 1, false, &mut g);
        self.emb_grad(&demb, &idx.dec4.emb, t3, n, &cache.ea, &mut g, &mut dea);

        let (dtap2, mut ds0, demb) = self.merge_backward(&dtap3.data, &cache.up3, &idx.up3, tap2, &cache.s0, &mut g);
        self.emb_grad(&demb, &idx.up3.emb, idx.up3.b.len(), n, &cache.ea, &mut g, &mut dea);

        let (dtap1, mut ds1, demb) = self.merge_backward(&dtap2, &cache.up2, &idx.up2, tap1, &cache.s1, &mut g);
        self.emb_grad(&demb, &idx.up2.emb, idx.up2.b.len(), n, &cache.ea, &mut g, &mut dea);

        let (ds2, demb) = self.conv_backward(&dtap1, &cache.mid, &idx.mid, (e2, n, s / 4, s / 4), (s / 4) * (s / 4), 1, true, &mut g);
        self.emb_grad(&demb, &idx.mid.emb, t0, n, &cache.ea, &mut g, &mut dea);

        let (ds1b, demb) = self.conv_backward(&ds2.data, &cache.enc2, &idx.enc2, (e1, n, s / 2, s / 2), (s / 4) * (s / 4), 2, true, &mut g);
        self.emb_grad(&demb, &idx.enc2.emb, e2, n, &cache.ea, &mut g, &mut dea);
        for (a, b) in ds1.iter_mut().zip(&ds1b.data) {
            *a += b;
        }

        let (ds0b, demb) = self.conv_backward(&ds1, &cache.enc1, &idx.enc1, (e0, n, s, s), (s / 2) * (s / 2), 2, true, &mut g);
        self.emb_grad(&demb, &idx.enc1.emb, e1, n, &cache.ea, &mut g, &mut dea);
        for (a, b) in ds0.iter_mut().zip(&ds0b.data) {
            *a += b;
        }

        let (_, demb) = self.conv_backward(&ds0, &cache.enc0, &idx.enc0, (cin, n, s, s), s * s, 1, true, &mut g);
        self.emb_grad(&demb, &idx.enc0.emb, e0, n, &cache.ea, &mut g, &mut dea);
        let _ = tap3;

        // embedding MLP
        let de: Vec<f64> = dea.iter().zip(&cache.e).map(|(d, &v)| d * silu_grad(v)).collect();
        gemm(e, n, cw, &de, Op::T, &cache.prompts, Op::N, 1.0, &mut g[idx.prompt_w.clone()]);
        let mut dprompts = vec![0.0; n * cw];
        gemm(n, e, cw, &de, Op::N, self.p(&idx.prompt_w), Op::N, 0.0, &mut dprompts);
        if let Some(cond) = &cache.cond {
            gemm(e, n, cw, &de, Op::T, cond, Op::N, 1.0, &mut g[idx.cond_w.clone()]);
        }
        for (i, d) in de.iter().enumerate() {
            g[idx.time_b2.start + i % e] += d;
        }
        gemm(e, n, e, &de, Op::T, &cache.a1, Op::N, 1.0, &mut g[idx.time_w2.clone()]);
        let mut da1 = vec![0.0; n * e];
        gemm(n, e, e, &de, Op::N, self.p(&idx.time_w2), Op::N, 0.0, &mut da1);
        let dh1: Vec<f64> = da1.iter().zip(&cache.h1).map(|(d, &v)| d * silu_grad(v)).collect();
        for (i, d) in dh1.iter().enumerate() {
            g[idx.time_b1.start + i % e] += d;
        }
        gemm(e, n, tf, &dh1, Op::T, &cache.phi, Op::N, 1.0, &mut g[idx.time_w1.clone()]);

        Gradients {
            params: g,
            prompts: dprompts,
        }
    }
}

/// A denoiser bound to one prompt row (and optionally a condition), usable
/// wherever a plain `eps(x_t, t)` predictor is needed.
pub struct PromptedDenoiser<'a> {
    pub net: &'a DenoiserNet,
    pub prompt: &'a [f64],
    pub cond: Option<&'a [f64]>,
}

impl NoisePredictor for PromptedDenoiser<'_> {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(self.net.forward(x_t, t, self.cond, self.prompt)?.0)
    }
}
