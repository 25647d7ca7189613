use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use super::config::{BaselineMethod, DatasetSource, ExperimentConfig};
use super::idx::{load_idx, resize_nearest};
use super::synthetic::generate_synthetic_dataset;
use crate::analysis::ProbeConfig;
use crate::data::LabeledImages;
use crate::diffusion::{
    denoiser_container, denoiser_from_container, train_denoiser, Container, DenoiserConfig, DenoiserNet,
    NoiseSchedule, PretrainConfig, Taps,
};
use crate::error::{Error, Result};
use crate::fed::{
    run_training, Federation, FrozenBackbone, LocalConfig, ModelArch, ModelParams, PartitionSpec, PcaScope,
    RoundReport, TrainingConfig,
};
use crate::objective::{Ablation, LossBreakdown, LossWeights, Mode};
use crate::representation::{conditional_taps, denoising_taps, PcaBasis, PromptEmbedding, PromptId};
use crate::rng::{stream, Stream};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "round,client,tdcl,ndcr,ce,total,accuracy";

/// The three disjoint parts of a dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    /// Held-out, class-balanced evaluation set.
    pub test: LabeledImages,
    /// Server-side split used to pre-train the backbone (and the probe).
    pub probe: LabeledImages,
    /// Everything the clients share out.
    pub pool: LabeledImages,
}

/// Stratified split: per class, the first `test_fraction` of a shuffled
/// member list goes to test, the next `probe_fraction` of the remainder to
/// the probe split and the rest to the pool.
pub fn split_dataset(data: &LabeledImages, test_fraction: f64, probe_fraction: f64, seed: u64) -> Result<DataSplits> {
    let mut rng = stream(seed, Stream::Split, &[]);
    let (mut test, mut probe, mut pool) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..data.num_classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_probe = ((n - n_test) as f64 * probe_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        probe.extend_from_slice(&members[n_test..n_test + n_probe]);
        pool.extend_from_slice(&members[n_test + n_probe..]);
    }
    for v in [&mut test, &mut probe, &mut pool] {
        v.sort_unstable();
    }
    if test.is_empty() || probe.is_empty() || pool.is_empty() {
        return Err(Error::Config("dataset too small for the test/probe/client split".into()));
    }
    Ok(DataSplits {
        test: data.subset(&test),
        probe: data.subset(&probe),
        pool: data.subset(&pool),
    })
}

/// Loads or generates the configured dataset at the configured image size.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledImages> {
    match &cfg.dataset {
        DatasetSource::Synthetic => {
            generate_synthetic_dataset(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.data_seed)
        }
        DatasetSource::Idx { images, labels } => {
            let raw = load_idx(images, labels)?;
            let images = raw.images.iter().map(|i| resize_nearest(i, cfg.image_size)).collect();
            LabeledImages::new(images, raw.labels, raw.num_classes)
        }
    }
}

pub fn pretrain_config(cfg: &ExperimentConfig) -> PretrainConfig {
    PretrainConfig {
        steps: cfg.pretrain_steps,
        batch: cfg.pretrain_batch,
        lr: cfg.pretrain_lr,
        ..PretrainConfig::default()
    }
}

/// Pre-trains the denoiser and prompt table on the probe split. Only the
/// data seed keys the randomness, so every run over the same data shares
/// one backbone.
pub fn pretrain_backbone(cfg: &ExperimentConfig, probe: &LabeledImages) -> Result<(DenoiserNet, PromptEmbedding, NoiseSchedule)> {
    let schedule = NoiseSchedule::linear_scaled(cfg.diffusion_steps)?;
    let mut rng = stream(cfg.data_seed, Stream::Pretrain, &[]);
    let dcfg = DenoiserConfig::desk(cfg.image_size, cfg.d, cfg.denoiser_width);
    let mut net = DenoiserNet::new(dcfg, &mut rng)?;
    let mut table = PromptEmbedding::new(probe.num_classes, cfg.d, &mut rng);
    if cfg.pretrain_steps > 0 {
        let trace = train_denoiser(&mut net, &mut table, probe, &schedule, &pretrain_config(cfg), &mut rng)?;
        let tail = &trace[trace.len().saturating_sub(50)..];
        log::info!(
            "denoiser pre-trained: final loss {:.4}",
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok((net, table, schedule))
}

/// Cache manifest entries that must match for a cached backbone to be
/// reused.
fn backbone_fingerprint(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let source = match &cfg.dataset {
        DatasetSource::Synthetic => "synthetic".to_string(),
        DatasetSource::Idx { images, .. } => images.display().to_string(),
    };
    vec![
        ("data".into(), source),
        ("data_seed".into(), cfg.data_seed.to_string()),
        ("per_class".into(), cfg.per_class.to_string()),
        ("pretrain_steps".into(), cfg.pretrain_steps.to_string()),
        ("pretrain_batch".into(), cfg.pretrain_batch.to_string()),
        ("pretrain_lr".into(), cfg.pretrain_lr.to_string()),
        ("test_fraction".into(), cfg.test_fraction.to_string()),
        ("probe_fraction".into(), cfg.probe_fraction.to_string()),
    ]
}

/// Returns the backbone from `cfg.backbone_cache` when it exists and was
/// built from the same data and pre-training settings; otherwise trains it
/// and writes the cache.
pub fn obtain_backbone(cfg: &ExperimentConfig, probe: &LabeledImages) -> Result<(DenoiserNet, PromptEmbedding, NoiseSchedule)> {
    let fingerprint = backbone_fingerprint(cfg);
    if let Some(path) = &cfg.backbone_cache {
        if path.exists() {
            let c = Container::read_from(BufReader::new(File::open(path)?))?;
            let matches = fingerprint
                .iter()
                .all(|(k, v)| c.meta(&format!("src.{k}")).map(|x| x == v).unwrap_or(false));
            let (net, table, steps) = denoiser_from_container(&c)?;
            let shape_ok = net.cond_width() == cfg.d
                && steps == cfg.diffusion_steps
                && *net.config() == DenoiserConfig::desk(cfg.image_size, cfg.d, cfg.denoiser_width);
            if matches && shape_ok {
                log::info!("reusing backbone from {}", path.display());
                return Ok((net, table, NoiseSchedule::linear_scaled(steps)?));
            }
            log::info!("backbone cache {} is stale; retraining", path.display());
        }
    }
    let (net, table, schedule) = pretrain_backbone(cfg, probe)?;
    if let Some(path) = &cfg.backbone_cache {
        let mut c = denoiser_container(&net, &table, &schedule);
        for (k, v) in fingerprint {
            c.meta.push((format!("src.{k}"), v));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        c.write_to(BufWriter::new(File::create(path)?))?;
        // the cache stores f32; reload so fresh and cached runs agree bit-for-bit
        let c = Container::read_from(BufReader::new(File::open(path)?))?;
        let (net, table, steps) = denoiser_from_container(&c)?;
        return Ok((net, table, NoiseSchedule::linear_scaled(steps)?));
    }
    Ok((net, table, schedule))
}

/// PCA basis shared by all clients, fitted on probe-split taps: clean images
/// under their class prompt with a zero condition, plus noised copies under
/// the generic object prompt.
pub fn fit_server_basis(
    net: &DenoiserNet,
    table: &PromptEmbedding,
    schedule: &NoiseSchedule,
    probe: &LabeledImages,
    d: usize,
    t_step: usize,
    seed: u64,
) -> Result<PcaBasis> {
    let images: Vec<_> = probe.images.iter().collect();
    let prompts: Vec<PromptId> = probe.labels.iter().map(|&l| PromptId::Class(l)).collect();
    let conds = vec![0.0; images.len() * net.cond_width()];
    let clean = conditional_taps(net, &images, &conds, &prompts, table)?;
    let mut rng = stream(seed, Stream::Eval, &[t_step as u64]);
    let generic = vec![PromptId::GenericObject; images.len()];
    let noised = denoising_taps(net, &images, &generic, t_step, schedule, table, &mut rng)?;
    let taps: [&Taps; 2] = [&clean, &noised];
    PcaBasis::fit_taps(&taps, d)
}

pub fn local_config(cfg: &ExperimentConfig, num_classes: usize) -> LocalConfig {
    let neg_pool: Vec<PromptId> = (0..num_classes).map(PromptId::Class).collect();
    LocalConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        tau: cfg.tau,
        t_step: cfg.t_step(),
        mode: cfg.mode,
        ablation: cfg.ablation,
        weights: LossWeights {
            tdcl: cfg.w_tdcl,
            ndcr: cfg.w_ndcr,
            ce: cfg.w_ce,
        },
        neg_pool_size: cfg.neg_pool_size.min(neg_pool.len()),
        neg_pool,
        prox_mu: (cfg.ablation == Ablation::Baseline && cfg.baseline_method == BaselineMethod::FedProx)
            .then_some(cfg.fedprox_mu),
        u_decay: cfg.u_decay,
        grad_clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
        pca_scope: cfg.pca_scope,
    }
}

/// Data and backbone shared across the arms of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: DataSplits,
    pub frozen: FrozenBackbone,
}

/// Builds the dataset splits and the frozen backbone (with the shared PCA
/// basis when the config asks for one).
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = load_dataset(cfg)?;
    let splits = split_dataset(&data, cfg.test_fraction, cfg.probe_fraction, cfg.data_seed)?;
    let (net, table, schedule) = obtain_backbone(cfg, &splits.probe)?;
    let shared_basis = match cfg.pca_scope {
        PcaScope::Server => Some(fit_server_basis(
            &net,
            &table,
            &schedule,
            &splits.probe,
            cfg.d,
            cfg.t_step(),
            cfg.data_seed,
        )?),
        PcaScope::ClientRound => None,
    };
    Ok(Prepared {
        splits,
        frozen: FrozenBackbone {
            net,
            table,
            schedule,
            shared_basis,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_round: usize,
    pub mean: LossBreakdown,
}

impl Summary {
    pub fn from_reports(reports: &[RoundReport]) -> Result<Self> {
        let last = reports
            .last()
            .ok_or_else(|| Error::InvalidInput("no rounds to summarize".into()))?;
        let mut best = (0, f64::NEG_INFINITY);
        for r in reports {
            if r.accuracy > best.1 {
                best = (r.round, r.accuracy);
            }
        }
        let all: Vec<LossBreakdown> = reports.iter().flat_map(|r| r.client_losses.iter().copied()).collect();
        Ok(Self {
            final_acc: last.accuracy,
            best_acc: best.1,
            best_round: best.0,
            mean: LossBreakdown::mean(&all),
        })
    }

    pub fn render(&self) -> String {
        format!(
            "final_acc={}\nbest_acc={}\nbest_round={}\nmean_tdcl={}\nmean_ndcr={}\nmean_ce={}\nmean_total={}\n",
            self.final_acc,
            self.best_acc,
            self.best_round,
            self.mean.tdcl,
            self.mean.ndcr,
            self.mean.ce,
            self.mean.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub global: ModelParams,
}

/// Writes the per-round metrics: one row per client (accuracy empty) then
/// one global row (`client = -1`) holding the mean client losses and the
/// global accuracy.
pub fn write_metrics<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in reports {
        for (k, l) in r.client_losses.iter().enumerate() {
            writeln!(w, "{},{},{},{},{},{},", r.round, k, l.tdcl, l.ndcr, l.ce, l.total)?;
        }
        let m = LossBreakdown::mean(&r.client_losses);
        writeln!(w, "{},-1,{},{},{},{},{}", r.round, m.tdcl, m.ndcr, m.ce, m.total, r.accuracy)?;
    }
    Ok(())
}

fn write_curve(path: &Path, values: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round,value")?;
    for (r, v) in values {
        writeln!(w, "{r},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy-vs-round and loss-vs-round CSVs (`round,value`).
pub fn emit_plot_data(reports: &[RoundReport], out_dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no rounds to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    write_curve(&out_dir.join("curve_accuracy.csv"), reports.iter().map(|r| (r.round, r.accuracy)))?;
    let means: Vec<(usize, LossBreakdown)> = reports
        .iter()
        .map(|r| (r.round, LossBreakdown::mean(&r.client_losses)))
        .collect();
    let terms: [(&str, fn(&LossBreakdown) -> f64); 4] = [
        ("total", |l| l.total),
        ("tdcl", |l| l.tdcl),
        ("ndcr", |l| l.ndcr),
        ("ce", |l| l.ce),
    ];
    for (name, get) in terms {
        write_curve(
            &out_dir.join(format!("curve_loss_{name}.csv")),
            means.iter().map(|(r, l)| (*r, get(l))),
        )?;
    }
    Ok(())
}

/// Runs federated training for `cfg` on already prepared data/backbone and
/// writes every output file into `cfg.out_dir`.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = PartitionSpec {
        scheme: cfg.scenario,
        alpha: cfg.alpha,
        rho: cfg.rho,
        clients: cfg.clients,
        seed: cfg.seed,
    };
    let (_, clients) = spec.apply(&prep.splits.pool)?;
    let num_classes = prep.splits.pool.num_classes;
    let input_dim = prep.splits.pool.images[0].len();
    let arch = ModelArch {
        input_dim,
        hidden: cfg.hidden,
        d: cfg.d,
        classes: num_classes,
    };
    let init = ModelParams::init(arch, &mut stream(cfg.seed, Stream::ModelInit, &[]));
    let tcfg = TrainingConfig {
        rounds: cfg.rounds,
        seed: cfg.seed,
        local: local_config(cfg, num_classes),
        execution: cfg.execution(),
        probe: ProbeConfig {
            epochs: cfg.probe_epochs,
            ..ProbeConfig::default()
        },
    };
    let fed = Federation {
        clients: &clients,
        test: &prep.splits.test,
        probe: &prep.splits.probe,
        frozen: &prep.frozen,
    };
    let outcome = run_training(fed, &tcfg, init)?;
    let summary = Summary::from_reports(&outcome.reports)?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
    write_metrics(&mut w, &outcome.reports)?;
    w.flush()?;
    fs::write(out.join("summary.txt"), summary.render())?;
    fs::write(out.join("config.txt"), cfg.serialize())?;
    if !outcome.reports.is_empty() {
        emit_plot_data(&outcome.reports, out)?;
    }
    outcome
        .global
        .to_container()
        .write_to(BufWriter::new(File::create(out.join("global.ckpt"))?))?;
    Ok(ExperimentResult {
        reports: outcome.reports,
        summary,
        global: outcome.global,
    })
}

/// Full pipeline: data, backbone, training, outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

/// Runs `{baseline, tdcl_only, ndcr_only, full}` on one shared backbone,
/// each into `out_dir/<ablation>/`, and writes `out_dir/ablation.csv`.
pub fn run_ablation_matrix(cfg: &ExperimentConfig) -> Result<Vec<(Ablation, ExperimentResult)>> {
    cfg.validate()?;
    if cfg.mode == Mode::SelfSupervised {
        return Err(Error::Config("the ablation matrix needs supervised mode (baseline has no objective otherwise)".into()));
    }
    let prep = prepare(cfg)?;
    let order = [Ablation::Baseline, Ablation::TdclOnly, Ablation::NdcrOnly, Ablation::Full];
    let mut results = Vec::with_capacity(order.len());
    for ab in order {
        let mut arm = cfg.clone();
        arm.ablation = ab;
        arm.out_dir = cfg.out_dir.join(ab.as_str());
        log::info!("ablation arm {ab}");
        results.push((ab, run_prepared(&arm, &prep)?));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join("ablation.csv"))?);
    writeln!(w, "ablation,tdcl,ndcr,final_acc,best_acc")?;
    for (ab, r) in &results {
        writeln!(
            w,
            "{},{},{},{},{}",
            ab,
            u8::from(ab.tdcl()),
            u8::from(ab.ndcr()),
            r.summary.final_acc,
            r.summary.best_acc
        )?;
    }
    w.flush()?;
    Ok(results)
}
