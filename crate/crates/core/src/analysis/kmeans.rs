use std::collections::HashMap;
use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            for (i, &v) in d2.iter().enumerate() {
                if v > 0.0 && r < v {
                    chosen = i;
                    break;
                }
                r -= v;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding. Stops when an assignment step
/// changes nothing or after `max_iters` steps. A cluster left empty is moved
/// onto the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mut rng = stream(seed, Stream::Eval, &[k as u64]);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            inertia += d;
            dists.push(d);
        }
        trace.push(inertia);
        iterations += 1;
        if !changed || iterations > max_iters {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centroids[j] = points[far].clone();
                dists[far] = 0.0;
            }
        }
    }
    let inertia = *trace.last().unwrap_or(&0.0);
    Ok(ClusterResult {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Fraction of points whose cluster's majority label equals their own.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::InvalidInput("purity of an empty set".into()));
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignments.len() as f64)
}

/// Writes `index,cluster,label` rows.
pub fn write_assignments_csv<W: Write>(mut w: W, assignments: &[usize], labels: &[usize]) -> Result<()> {
    writeln!(w, "index,cluster,label")?;
    for (i, (a, l)) in assignments.iter().zip(labels).enumerate() {
        writeln!(w, "{i},{a},{l}")?;
    }
    Ok(())
}
