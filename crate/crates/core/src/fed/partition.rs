use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Number of clients in the extreme split: six single-class clients plus
/// one client holding every class.
pub const EXTREME_CLIENTS: usize = 7;
const BIASED_CLIENTS: usize = 6;

/// One client's private shard. `indices` point back into the pool the
/// shard was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub indices: Vec<usize>,
    pub data: LabeledImages,
}

impl ClientDataset {
    pub fn n_k(&self) -> usize {
        self.data.len()
    }

    pub fn histogram(&self) -> Vec<usize> {
        self.data.histogram()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Nid1,
    Nid2,
    LongTailNid1,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Nid1 => "nid1",
            Scheme::Nid2 => "nid2",
            Scheme::LongTailNid1 => "longtail_nid1",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nid1" => Ok(Scheme::Nid1),
            "nid2" => Ok(Scheme::Nid2),
            "longtail_nid1" | "longtail" => Ok(Scheme::LongTailNid1),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected nid1, nid2 or longtail_nid1)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub alpha: f64,
    pub rho: f64,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.rho >= 1.0) {
            return Err(Error::Config(format!("rho must be at least 1, got {}", self.rho)));
        }
        if self.scheme == Scheme::Nid2 && self.clients != EXTREME_CLIENTS {
            return Err(Error::Config(format!(
                "nid2 uses exactly {EXTREME_CLIENTS} clients, got {}",
                self.clients
            )));
        }
        if self.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        Ok(())
    }

    /// Applies the scheme to `pool`. For the long-tail scheme the pool is
    /// first subsampled, so the returned shards index into the long-tailed
    /// pool, which is returned alongside.
    pub fn apply(&self, pool: &LabeledImages) -> Result<(LabeledImages, Vec<ClientDataset>)> {
        self.validate()?;
        match self.scheme {
            Scheme::Nid1 => Ok((pool.clone(), partition_dirichlet(pool, self.clients, self.alpha, self.seed)?)),
            Scheme::Nid2 => Ok((pool.clone(), partition_extreme(pool, self.seed)?)),
            Scheme::LongTailNid1 => {
                let lt = make_long_tail(pool, self.rho, self.seed)?;
                let shards = partition_dirichlet(&lt, self.clients, self.alpha, self.seed)?;
                Ok((lt, shards))
            }
        }
    }
}

fn shards_from_indices(pool: &LabeledImages, parts: Vec<Vec<usize>>) -> Vec<ClientDataset> {
    parts
        .into_iter()
        .enumerate()
        .map(|(id, indices)| ClientDataset {
            id,
            data: pool.subset(&indices),
            indices,
        })
        .collect()
}

/// Splits `n` items by proportions `p` using largest-remainder rounding, so
/// the counts always sum to `n`. Ties go to the lower index.
pub fn largest_remainder(n: usize, p: &[f64]) -> Vec<usize> {
    let total: f64 = p.iter().sum();
    let exact: Vec<f64> = p.iter().map(|&x| x / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet concentration: {e}")))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = p.iter().sum();
    if s > 0.0 && s.is_finite() {
        for x in &mut p {
            *x /= s;
        }
    } else {
        // every draw underflowed: all mass on one uniformly chosen client
        p.iter_mut().for_each(|x| *x = 0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    Ok(p)
}

/// Index sets of a Dirichlet label-skew split.
pub fn dirichlet_indices<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if labels.len() < k {
        return Err(Error::Infeasible(format!(
            "{} samples cannot fill {k} clients",
            labels.len()
        )));
    }
    let mut parts = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let p = dirichlet(k, alpha, rng)?;
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let counts = largest_remainder(members.len(), &p);
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            parts[client].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        let largest = (0..k).max_by_key(|&i| (parts[i].len(), std::cmp::Reverse(i))).unwrap_or(0);
        let moved = parts[largest].pop().ok_or_else(|| Error::Infeasible("no sample left to move".into()))?;
        parts[empty].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Dirichlet(alpha) label-skew split over `k` clients.
pub fn partition_dirichlet(data: &LabeledImages, k: usize, alpha: f64, seed: u64) -> Result<Vec<ClientDataset>> {
    let mut rng = stream(seed, Stream::Partition, &[0]);
    let parts = dirichlet_indices(&data.labels, data.num_classes, k, alpha, &mut rng)?;
    Ok(shards_from_indices(data, parts))
}

/// Index sets of the extreme split. Each biased client receives half (rounded
/// up) of its class; the last client receives everything else.
pub fn extreme_indices<R: Rng + ?Sized>(labels: &[usize], num_classes: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if num_classes < BIASED_CLIENTS {
        return Err(Error::Infeasible(format!(
            "the extreme split needs at least {BIASED_CLIENTS} classes, got {num_classes}"
        )));
    }
    let by_class: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some(c) = by_class.iter().position(|m| m.is_empty()) {
        return Err(Error::Infeasible(format!("class {c} has no samples; the unbiased client needs every class")));
    }
    let chosen = sample(rng, num_classes, BIASED_CLIENTS).into_vec();
    let mut parts = vec![Vec::new(); EXTREME_CLIENTS];
    let mut rest = Vec::new();
    for (c, members) in by_class.into_iter().enumerate() {
        let mut members = members;
        members.shuffle(rng);
        match chosen.iter().position(|&x| x == c) {
            Some(client) => {
                if members.len() < 2 {
                    return Err(Error::Infeasible(format!(
                        "class {c} needs two samples to serve both a biased and the unbiased client"
                    )));
                }
                let take = members.len().div_ceil(2);
                parts[client].extend_from_slice(&members[..take]);
                rest.extend_from_slice(&members[take..]);
            }
            None => rest.extend(members),
        }
    }
    parts[BIASED_CLIENTS] = rest;
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Six single-class clients (distinct random classes) plus one client that
/// spans all classes.
pub fn partition_extreme(data: &LabeledImages, seed: u64) -> Result<Vec<ClientDataset>> {
    let mut rng = stream(seed, Stream::Partition, &[1]);
    let parts = extreme_indices(&data.labels, data.num_classes, &mut rng)?;
    Ok(shards_from_indices(data, parts))
}

/// Per-class counts of the exponential long-tail profile:
/// class `j` keeps `round(n_max * rho^(-j / (C - 1)))`.
pub fn long_tail_counts(n_max: usize, rho: f64, num_classes: usize) -> Vec<usize> {
    if num_classes == 1 {
        return vec![n_max];
    }
    (0..num_classes)
        .map(|j| (n_max as f64 * rho.powf(-(j as f64) / (num_classes - 1) as f64)).round() as usize)
        .collect()
}

/// Index set of the long-tailed subsample, in ascending order.
pub fn long_tail_indices<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(rho >= 1.0) {
        return Err(Error::Config(format!("rho must be at least 1, got {rho}")));
    }
    let by_class: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let counts = long_tail_counts(n_max, rho, num_classes);
    let mut keep = Vec::new();
    for (c, (members, &want)) in by_class.iter().zip(&counts).enumerate() {
        if members.len() < want {
            return Err(Error::Infeasible(format!(
                "class {c} has {} samples, the long-tail profile needs {want}",
                members.len()
            )));
        }
        keep.extend(sample(rng, members.len(), want).into_iter().map(|i| members[i]));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Subsamples `data` into an exponential long-tail profile with max/min
/// class ratio `rho`.
pub fn make_long_tail(data: &LabeledImages, rho: f64, seed: u64) -> Result<LabeledImages> {
    let mut rng = stream(seed, Stream::Partition, &[2]);
    let keep = long_tail_indices(&data.labels, data.num_classes, rho, &mut rng)?;
    Ok(data.subset(&keep))
}
