use super::model::ModelParams;
use crate::error::{Error, Result};

/// Error-free transformation `a + b = s + e`.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Weighted sum `sum w_i x_i` evaluated in twice-working precision, so the
/// result is correctly rounded in all but pathological cases and therefore
/// independent of the summation order.
fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for (&w, &x) in weights.iter().zip(values) {
        let p = w * x;
        let pe = w.mul_add(x, -p);
        let (ns, se) = two_sum(s, p);
        s = ns;
        c += se + pe;
    }
    s + c
}

/// Elementwise mean of `values` weighted by `sizes`, computed stably.
/// Identical inputs return that input bit-for-bit.
pub fn weighted_mean(vectors: &[&[f64]], sizes: &[usize]) -> Result<Vec<f64>> {
    let Some(first) = vectors.first() else {
        return Err(Error::InvalidInput("aggregation needs at least one client".into()));
    };
    if vectors.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} parameter sets but {} sizes",
            vectors.len(),
            sizes.len()
        )));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != first.len()) {
        return Err(Error::Shape(format!(
            "parameter lengths differ: {} vs {}",
            first.len(),
            v.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("aggregation weights sum to zero".into()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let total = total as f64;
    let mut column = vec![0.0; vectors.len()];
    Ok((0..first.len())
        .map(|e| {
            for (c, v) in column.iter_mut().zip(vectors) {
                *c = v[e];
            }
            if column.iter().all(|&x| x.to_bits() == column[0].to_bits()) {
                column[0]
            } else {
                weighted_sum(&weights, &column) / total
            }
        })
        .collect())
}

/// Size-weighted average of client models: `w = sum_k (n_k / N) w_k`.
pub fn aggregate(params: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let Some(first) = params.first() else {
        return Err(Error::InvalidInput("aggregation needs at least one client".into()));
    };
    if params.iter().any(|p| p.arch != first.arch) {
        return Err(Error::Shape("client models have different architectures".into()));
    }
    let us: Vec<&[f64]> = params.iter().map(|p| p.u.as_slice()).collect();
    let vs: Vec<&[f64]> = params.iter().map(|p| p.v.as_slice()).collect();
    Ok(ModelParams {
        arch: first.arch,
        u: weighted_mean(&us, sizes)?,
        v: weighted_mean(&vs, sizes)?,
    })
}
