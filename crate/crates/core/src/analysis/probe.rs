use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::rng::{stream, Stream};

/// Full-batch softmax regression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            momentum: 0.9,
            l2: 1e-4,
        }
    }
}

fn flatten(rows: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape(format!("embedding has {} dims, expected {d}", r.len())));
        }
        out.extend_from_slice(r);
    }
    Ok(out)
}

/// Stratified holdout: per class, `round(test_fraction * n_c)` shuffled
/// members (at least one when the class has two or more) go to the test
/// side. Returns `(train, test)` index lists in ascending order.
pub fn holdout_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = stream(seed, Stream::Eval, &[u64::MAX]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let mut k = (n as f64 * test_fraction).round() as usize;
        if n >= 2 && test_fraction > 0.0 {
            k = k.clamp(1, n - 1);
        }
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(format!("{} samples are too few for a holdout split", labels.len())));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains a linear softmax classifier on standardized `train` embeddings and
/// returns top-1 accuracy on `test`. Deterministic: weights start at zero
/// and gradient descent is full-batch.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("linear probe needs non-empty splits".into()));
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::Shape("embeddings and labels differ in count".into()));
    }
    if let Some(&l) = train_labels.iter().chain(test_labels).find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("label {l} outside {num_classes} classes")));
    }
    let d = train[0].len();
    let (n, m, c) = (train.len(), test.len(), num_classes);
    let mut x = flatten(train, d)?;
    let mut xt = flatten(test, d)?;

    // standardize with training statistics
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for i in 0..n {
            x[i * d + j] = (x[i * d + j] - mean) * inv;
        }
        for i in 0..m {
            xt[i * d + j] = (xt[i * d + j] - mean) * inv;
        }
    }

    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut vw = vec![0.0; c * d];
    let mut vb = vec![0.0; c];
    let mut logits = vec![0.0; n * c];
    let mut gw = vec![0.0; c * d];
    for _ in 0..cfg.epochs {
        gemm(n, d, c, &x, Op::N, &w, Op::T, 0.0, &mut logits);
        let mut gb = vec![0.0; c];
        for (i, row) in logits.chunks_mut(c).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (v, bias) in row.iter_mut().zip(&b) {
                *v += bias;
                mx = mx.max(*v);
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s * n as f64;
            }
            row[train_labels[i]] -= 1.0 / n as f64;
            for (g, v) in gb.iter_mut().zip(row.iter()) {
                *g += v;
            }
        }
        gemm(c, n, d, &logits, Op::T, &x, Op::N, 0.0, &mut gw);
        for ((wi, vi), gi) in w.iter_mut().zip(vw.iter_mut()).zip(&gw) {
            *vi = cfg.momentum * *vi + gi + cfg.l2 * *wi;
            *wi -= cfg.lr * *vi;
        }
        for ((bi, vi), gi) in b.iter_mut().zip(vb.iter_mut()).zip(&gb) {
            *vi = cfg.momentum * *vi + gi;
            *bi -= cfg.lr * *vi;
        }
    }

    let mut out = vec![0.0; m * c];
    gemm(m, d, c, &xt, Op::N, &w, Op::T, 0.0, &mut out);
    let mut correct = 0;
    for (i, row) in out.chunks(c).enumerate() {
        let mut best = 0;
        for j in 1..c {
            if row[j] + b[j] > row[best] + b[best] {
                best = j;
            }
        }
        if best == test_labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / m as f64)
}
