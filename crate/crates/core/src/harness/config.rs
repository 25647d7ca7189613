use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fed::{PcaScope, Scheme, EXTREME_CLIENTS};
use crate::objective::{Ablation, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    FedAvg,
    FedProx,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::FedAvg => "fedavg",
            BaselineMethod::FedProx => "fedprox",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(BaselineMethod::FedAvg),
            "fedprox" => Ok(BaselineMethod::FedProx),
            other => Err(Error::Config(format!(
                "unknown baseline method `{other}` (expected fedavg or fedprox)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Idx { images: PathBuf, labels: PathBuf },
}

/// Every knob of an experiment. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scheme,
    pub alpha: f64,
    pub rho: f64,
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub d: usize,
    pub tau: f64,
    pub t_frac: f64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub baseline_method: BaselineMethod,
    pub fedprox_mu: f64,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub out_dir: PathBuf,

    // dataset shape
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub probe_fraction: f64,

    // client model
    pub hidden: usize,

    // objective extensions
    pub w_tdcl: f64,
    pub w_ndcr: f64,
    pub w_ce: f64,
    pub neg_pool_size: usize,
    pub u_decay: f64,
    pub grad_clip: f64,
    pub pca_scope: PcaScope,

    // frozen backbone
    pub diffusion_steps: usize,
    pub denoiser_width: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub backbone_cache: Option<PathBuf>,

    pub probe_epochs: usize,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scheme::Nid1,
            alpha: 0.2,
            rho: 10.0,
            clients: 10,
            rounds: 30,
            epochs: 2,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            d: 64,
            tau: 0.06,
            t_frac: 0.15,
            mode: Mode::Supervised,
            ablation: Ablation::Full,
            baseline_method: BaselineMethod::FedAvg,
            fedprox_mu: 0.01,
            seed: 0,
            dataset: DatasetSource::Synthetic,
            out_dir: PathBuf::from("runs/default"),
            num_classes: 10,
            per_class: 100,
            image_size: 16,
            data_seed: 0,
            test_fraction: 0.2,
            probe_fraction: 0.2,
            hidden: 128,
            w_tdcl: 1.0,
            w_ndcr: 1.0,
            w_ce: 1.0,
            neg_pool_size: 8,
            u_decay: 0.9,
            grad_clip: 0.0,
            pca_scope: PcaScope::ClientRound,
            diffusion_steps: 100,
            denoiser_width: 1,
            pretrain_steps: 1500,
            pretrain_batch: 32,
            pretrain_lr: 0.02,
            backbone_cache: None,
            probe_epochs: 300,
            parallel: true,
        }
    }
}

/// Keys in serialization order.
pub const KEYS: &[&str] = &[
    "scenario",
    "alpha",
    "rho",
    "clients",
    "rounds",
    "epochs",
    "batch",
    "lr",
    "momentum",
    "weight_decay",
    "d",
    "tau",
    "t_frac",
    "mode",
    "ablation",
    "baseline_method",
    "fedprox_mu",
    "seed",
    "dataset",
    "idx_images",
    "idx_labels",
    "out_dir",
    "num_classes",
    "per_class",
    "image_size",
    "data_seed",
    "test_fraction",
    "probe_fraction",
    "hidden",
    "w_tdcl",
    "w_ndcr",
    "w_ce",
    "neg_pool_size",
    "u_decay",
    "grad_clip",
    "pca_scope",
    "diffusion_steps",
    "denoiser_width",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "backbone_cache",
    "probe_epochs",
    "parallel",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Sets one key from its textual value. Does not validate cross-field
    /// constraints; see [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "scenario" => self.scenario = value.parse()?,
            "alpha" => self.alpha = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "clients" => self.clients = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "t_frac" => self.t_frac = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "baseline_method" => self.baseline_method = value.parse()?,
            "fedprox_mu" => self.fedprox_mu = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetSource::Synthetic,
                    "idx" => match &self.dataset {
                        DatasetSource::Idx { .. } => self.dataset.clone(),
                        DatasetSource::Synthetic => DatasetSource::Idx {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                        },
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "unknown dataset `{other}` (expected synthetic or idx)"
                        )))
                    }
                }
            }
            "idx_images" | "idx_labels" => {
                let (mut images, mut labels) = match &self.dataset {
                    DatasetSource::Idx { images, labels } => (images.clone(), labels.clone()),
                    DatasetSource::Synthetic => (PathBuf::new(), PathBuf::new()),
                };
                if key == "idx_images" {
                    images = PathBuf::from(value);
                } else {
                    labels = PathBuf::from(value);
                }
                self.dataset = DatasetSource::Idx { images, labels };
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "num_classes" => self.num_classes = num(key, value)?,
            "per_class" => self.per_class = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "probe_fraction" => self.probe_fraction = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "w_tdcl" => self.w_tdcl = num(key, value)?,
            "w_ndcr" => self.w_ndcr = num(key, value)?,
            "w_ce" => self.w_ce = num(key, value)?,
            "neg_pool_size" => self.neg_pool_size = num(key, value)?,
            "u_decay" => self.u_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "pca_scope" => self.pca_scope = value.parse()?,
            "diffusion_steps" => self.diffusion_steps = num(key, value)?,
            "denoiser_width" => self.denoiser_width = num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = num(key, value)?,
            "backbone_cache" => {
                self.backbone_cache = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "probe_epochs" => self.probe_epochs = num(key, value)?,
            "parallel" => self.parallel = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`KEYS`] order; the idx paths appear only for
    /// an IDX dataset.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::with_capacity(KEYS.len());
        for &k in KEYS {
            let v = match k {
                "scenario" => self.scenario.to_string(),
                "alpha" => self.alpha.to_string(),
                "rho" => self.rho.to_string(),
                "clients" => self.clients.to_string(),
                "rounds" => self.rounds.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch" => self.batch.to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "d" => self.d.to_string(),
                "tau" => self.tau.to_string(),
                "t_frac" => self.t_frac.to_string(),
                "mode" => self.mode.to_string(),
                "ablation" => self.ablation.to_string(),
                "baseline_method" => self.baseline_method.to_string(),
                "fedprox_mu" => self.fedprox_mu.to_string(),
                "seed" => self.seed.to_string(),
                "dataset" => match self.dataset {
                    DatasetSource::Synthetic => "synthetic".into(),
                    DatasetSource::Idx { .. } => "idx".into(),
                },
                "idx_images" | "idx_labels" => match &self.dataset {
                    DatasetSource::Idx { images, labels } => {
                        let p = if k == "idx_images" { images } else { labels };
                        p.display().to_string()
                    }
                    DatasetSource::Synthetic => continue,
                },
                "out_dir" => self.out_dir.display().to_string(),
                "num_classes" => self.num_classes.to_string(),
                "per_class" => self.per_class.to_string(),
                "image_size" => self.image_size.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "test_fraction" => self.test_fraction.to_string(),
                "probe_fraction" => self.probe_fraction.to_string(),
                "hidden" => self.hidden.to_string(),
                "w_tdcl" => self.w_tdcl.to_string(),
                "w_ndcr" => self.w_ndcr.to_string(),
                "w_ce" => self.w_ce.to_string(),
                "neg_pool_size" => self.neg_pool_size.to_string(),
                "u_decay" => self.u_decay.to_string(),
                "grad_clip" => self.grad_clip.to_string(),
                "pca_scope" => self.pca_scope.to_string(),
                "diffusion_steps" => self.diffusion_steps.to_string(),
                "denoiser_width" => self.denoiser_width.to_string(),
                "pretrain_steps" => self.pretrain_steps.to_string(),
                "pretrain_batch" => self.pretrain_batch.to_string(),
                "pretrain_lr" => self.pretrain_lr.to_string(),
                "backbone_cache" => self
                    .backbone_cache
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                "probe_epochs" => self.probe_epochs.to_string(),
                "parallel" => self.parallel.to_string(),
                _ => unreachable!("every key in KEYS is handled"),
            };
            out.push((k, v));
        }
        out
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Parses `key = value` lines (`#` starts a comment) over the defaults
    /// and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let explicit = cfg.apply_text(text)?;
        cfg.finish(explicit.iter().any(|k| k == "clients"))?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`; returns the keys set.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1))
            })?;
            let k = k.trim();
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
            keys.push(k.to_string());
        }
        Ok(keys)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Resolves scenario-dependent defaults, then validates. With the
    /// extreme split the client count is fixed; an explicit different count
    /// is rejected.
    pub fn finish(&mut self, clients_explicit: bool) -> Result<()> {
        if self.scenario == Scheme::Nid2 {
            if clients_explicit && self.clients != EXTREME_CLIENTS {
                return Err(Error::Config(format!(
                    "scenario nid2 uses exactly {EXTREME_CLIENTS} clients (6 single-class + 1 full); got clients = {}",
                    self.clients
                )));
            }
            self.clients = EXTREME_CLIENTS;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("tau", self.tau),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("fedprox_mu", self.fedprox_mu),
            ("w_tdcl", self.w_tdcl),
            ("w_ndcr", self.w_ndcr),
            ("w_ce", self.w_ce),
            ("grad_clip", self.grad_clip),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be non-negative, got {v}")));
            }
        }
        let counts = [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("d", self.d),
            ("per_class", self.per_class),
            ("hidden", self.hidden),
            ("diffusion_steps", self.diffusion_steps),
            ("denoiser_width", self.denoiser_width),
            ("pretrain_batch", self.pretrain_batch),
            ("neg_pool_size", self.neg_pool_size),
            ("probe_epochs", self.probe_epochs),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be at least 1")));
            }
        }
        if !(self.rho >= 1.0) {
            return Err(Error::Config(format!("`rho` must be at least 1, got {}", self.rho)));
        }
        if !(self.t_frac > 0.0 && self.t_frac <= 1.0) {
            return Err(Error::Config(format!("`t_frac` must be in (0, 1], got {}", self.t_frac)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("`momentum` must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.u_decay) {
            return Err(Error::Config(format!("`u_decay` must be in [0, 1), got {}", self.u_decay)));
        }
        for (k, v) in [("test_fraction", self.test_fraction), ("probe_fraction", self.probe_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("`{k}` must be in (0, 1), got {v}")));
            }
        }
        if self.d < 4 {
            return Err(Error::Config(format!("`d` must be at least 4 to split across three layers, got {}", self.d)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("`num_classes` must be at least 2".into()));
        }
        if self.scenario == Scheme::Nid2 && self.clients != EXTREME_CLIENTS {
            return Err(Error::Config(format!("scenario nid2 requires clients = {EXTREME_CLIENTS}")));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "`image_size` must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.mode == Mode::SelfSupervised && self.ablation == Ablation::Baseline {
            return Err(Error::Config(
                "self-supervised mode needs at least one representation term (ablation != baseline)".into(),
            ));
        }
        if let DatasetSource::Idx { images, labels } = &self.dataset {
            if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                return Err(Error::Config("dataset = idx needs idx_images and idx_labels".into()));
            }
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Noising step of the denoising representation.
    pub fn t_step(&self) -> usize {
        crate::representation::default_step(self.t_frac, self.diffusion_steps)
    }
}
