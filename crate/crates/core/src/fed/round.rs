use std::time::{Duration, Instant};

use super::aggregate::aggregate;
use super::local::{gather_pixels, local_update, FrozenBackbone, LocalConfig};
use super::model::ModelParams;
use super::partition::ClientDataset;
use crate::analysis::{linear_probe, ProbeConfig};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::objective::{LossBreakdown, Mode};
use crate::rng::{stream, Stream};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Mean loss terms of every client over its local batches, in client order.
    pub client_losses: Vec<LossBreakdown>,
    /// Top-1 accuracy of the aggregated model on the test set. In
    /// self-supervised mode this is the accuracy of a linear probe trained on
    /// the probe split over the encoder's embeddings.
    pub accuracy: f64,
    pub duration: Duration,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub seed: u64,
    pub local: LocalConfig,
    pub execution: Execution,
    pub probe: ProbeConfig,
}

/// Everything a training run reads.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub clients: &'a [ClientDataset],
    pub test: &'a LabeledImages,
    /// Labeled server-side split; trains the probe in self-supervised mode.
    pub probe: &'a LabeledImages,
    pub frozen: &'a FrozenBackbone,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub reports: Vec<RoundReport>,
    pub global: ModelParams,
}

/// Encoder embeddings of every sample (`n x d`).
pub fn embed(params: &ModelParams, data: &LabeledImages) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let fwd = params.forward(&gather_pixels(data, idx), idx.len())?;
        out.extend((0..idx.len()).map(|i| fwd.z_row(i).to_vec()));
    }
    Ok(out)
}

/// Top-1 accuracy of the classifier head.
pub fn evaluate(params: &ModelParams, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let fwd = params.forward(&gather_pixels(data, idx), idx.len())?;
        for (i, &k) in idx.iter().enumerate() {
            let row = fwd.logits_row(i);
            let pred = argmax(row);
            if pred == data.labels[k] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Accuracy of a linear probe fitted on `train` embeddings and scored on `test`.
pub fn probe_accuracy(params: &ModelParams, train: &LabeledImages, test: &LabeledImages, cfg: &ProbeConfig) -> Result<f64> {
    let a = embed(params, train)?;
    let b = embed(params, test)?;
    linear_probe(&a, &train.labels, &b, &test.labels, train.num_classes, cfg)
}

/// Federated training: every round broadcasts the global model, runs all
/// clients' local updates, aggregates by shard size and evaluates.
pub fn run_training(fed: Federation<'_>, cfg: &TrainingConfig, init: ModelParams) -> Result<TrainingOutcome> {
    cfg.local.validate()?;
    if fed.clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if let Some(c) = fed.clients.iter().find(|c| c.data.is_empty()) {
        return Err(Error::InvalidInput(format!("client {} has no data", c.id)));
    }
    let sizes: Vec<usize> = fed.clients.iter().map(ClientDataset::n_k).collect();
    let mut global = init;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let results = cfg.execution.map_range(fed.clients.len(), |k| {
            let client = &fed.clients[k];
            let mut rng = stream(cfg.seed, Stream::Client, &[round as u64, client.id as u64]);
            local_update(client, &global, fed.frozen, &cfg.local, &mut rng)
        });
        let mut locals = Vec::with_capacity(results.len());
        let mut client_losses = Vec::with_capacity(results.len());
        for r in results {
            let outcome = r?;
            client_losses.push(LossBreakdown::mean(&outcome.trace));
            locals.push(outcome.params);
        }
        global = aggregate(&locals, &sizes)?;
        let accuracy = match cfg.local.mode {
            Mode::Supervised => evaluate(&global, fed.test)?,
            Mode::SelfSupervised => probe_accuracy(&global, fed.probe, fed.test, &cfg.probe)?,
        };
        log::info!("round {round}: accuracy {accuracy:.4}");
        reports.push(RoundReport {
            round,
            client_losses,
            accuracy,
            duration: start.elapsed(),
        });
    }
    Ok(TrainingOutcome { reports, global })
}
