//! Two-network co-training with pluggable label-noise cleaners.
//!
//! Every run starts with a cross-entropy warm-up of both networks. Each
//! following epoch has two stages per network `r`:
//!
//! 1. the losses of the *other* network are modeled with a loss mixture,
//!    which supervises an update of prototype bank `r` and the projector of
//!    network `r`; the updated bank of the other network then re-divides the
//!    data for network `r`,
//! 2. network `r` minimizes the vicinal risk on the partition chosen by the
//!    cleaner mode (the mixture partition while the prototypes warm up).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cpc::{self, CpcUpdateReport, PrototypeBank, Role};
use crate::datagen::{self, BlobGenerator, CleanDataset, NoisyDataset};
use crate::error::{Error, Result};
use crate::eval::{self, KsReport};
use crate::gmm::{self, CleanerSource, GmmCleaning, GmmFit, GmmOptions};
use crate::nnet::{self, Architecture, Gradients, Network, ParamGroups, Sgd, SgdConfig, Upstream};
use crate::rng::{self, stream, Rng};
use crate::semisup::{self, EvrBreakdown, MixConfig, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanerMode {
    GmmAgn,
    GmmAwr,
    CpcAgn,
    CpcAwr,
}

impl CleanerMode {
    pub const ALL: [CleanerMode; 4] = [
        CleanerMode::GmmAgn,
        CleanerMode::GmmAwr,
        CleanerMode::CpcAgn,
        CleanerMode::CpcAwr,
    ];

    pub fn uses_cpc(self) -> bool {
        matches!(self, CleanerMode::CpcAgn | CleanerMode::CpcAwr)
    }

    /// Whether the loss mixture feeding this mode is fitted per class.
    pub fn class_aware_gmm(self) -> bool {
        matches!(self, CleanerMode::GmmAwr | CleanerMode::CpcAwr)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CleanerMode::GmmAgn => "gmm_agn",
            CleanerMode::GmmAwr => "gmm_awr",
            CleanerMode::CpcAgn => "cpc_agn",
            CleanerMode::CpcAwr => "cpc_awr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Where the prototype cleaner gets its clean/noise supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpcSupervision {
    /// Partition of the loss mixture (the full method).
    #[default]
    Gmm,
    /// Ablation: a sample is clean when its most similar prototype is the
    /// one of its label; no loss mixture is involved.
    SelfLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Benchmark label used in reports.
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Optional per-class training counts (imbalance); overrides `n_per_class`.
    pub class_counts: Option<Vec<usize>>,
    pub n_test_per_class: usize,
    /// Separations are spaced linearly from min to max across classes
    /// unless given explicitly.
    pub separation_min: f64,
    pub separation_max: f64,
    pub separations: Option<Vec<f64>>,
    /// Seed of the data and noise draws; fixed across training seeds.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "blobs".into(),
            num_classes: 8,
            dim: 16,
            n_per_class: 100,
            class_counts: None,
            n_test_per_class: 200,
            separation_min: 2.0,
            separation_max: 6.0,
            separations: None,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn separations(&self) -> Vec<f64> {
        self.separations.clone().unwrap_or_else(|| {
            datagen::linear_separations(self.num_classes, self.separation_min, self.separation_max)
        })
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.n_per_class; self.num_classes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChoice {
    None,
    Symmetric,
    Asymmetric,
}

/// Target of each flipped class when no explicit map is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// `0→1, 2→3, …`
    #[default]
    Next,
    /// Each even class flips to the class with the nearest center.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseChoice,
    pub rate: f64,
    /// `[from, to]` pairs; defaults to flips over half the classes chosen
    /// by `pairing`.
    pub class_map: Option<Vec<[usize; 2]>>,
    pub pairing: Pairing,
    /// Symmetric noise draws replacements from the other classes only.
    pub exclude_true: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseChoice::Symmetric,
            rate: 0.5,
            class_map: None,
            pairing: Pairing::Next,
            exclude_true: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub proj_dim: usize,
    pub proj_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            proj_dim: 16,
            proj_hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Total epochs including the network warm-up.
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Prototype warm-up as a fraction of `epochs`, counted after the
    /// network warm-up.
    pub cpc_warmup: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda_u: f64,
    /// Weight of the uniform-prior term in the stage-two loss.
    pub lambda_r: f64,
    /// Weight of the negative-entropy penalty added to the warm-up loss;
    /// keeps warm-up predictions from turning overconfident.
    pub warmup_penalty: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by 0.1 from this fraction of `epochs` on.
    pub lr_drop_at: f64,
    pub mix_alpha: f64,
    pub temperature: f64,
    pub fold_lambda: bool,
    /// Drop confident-set members from the noise term of the cleaner loss.
    pub exclude_confident_from_noise: bool,
    /// Average both networks at test time (otherwise network 0 only).
    pub ensemble_inference: bool,
    pub cpc_supervision: CpcSupervision,
    pub gmm: GmmOptions,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 10,
            cpc_warmup: 0.05,
            tau: 0.5,
            alpha: 1.0,
            lambda_u: 0.0,
            lambda_r: 1.0,
            warmup_penalty: 0.0,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_at: 0.5,
            mix_alpha: 4.0,
            temperature: 0.5,
            fold_lambda: true,
            exclude_confident_from_noise: true,
            ensemble_inference: true,
            cpc_supervision: CpcSupervision::Gmm,
            gmm: GmmOptions::default(),
        }
    }
}

impl TrainerConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn cpc_warmup_epochs(&self) -> usize {
        (self.cpc_warmup * self.epochs as f64).round() as usize
    }

    /// First epoch whose stage-two partition comes from the prototypes.
    pub fn cpc_gate_epoch(&self) -> usize {
        self.warmup_epochs + self.cpc_warmup_epochs()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) >= self.lr_drop_at * self.epochs as f64 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    pub fn mix(&self) -> MixConfig {
        MixConfig {
            mix_alpha: self.mix_alpha,
            temperature: self.temperature,
            fold_lambda: self.fold_lambda,
        }
    }
}

/// Everything a single training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub cleaner_mode: CleanerMode,
    pub seed: u64,
}

/// A configuration value that violates the schema.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn cfg_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err(cfg_err("dataset.num_classes", "need at least 2 classes"));
        }
        if d.dim < 2 {
            return Err(cfg_err("dataset.dim", "need at least 2 dimensions"));
        }
        if d.n_per_class < 2 {
            return Err(cfg_err("dataset.n_per_class", "need at least 2 samples per class"));
        }
        if d.n_test_per_class < 1 {
            return Err(cfg_err("dataset.n_test_per_class", "must be positive"));
        }
        if let Some(c) = &d.class_counts {
            if c.len() != d.num_classes || c.iter().any(|&n| n < 2) {
                return Err(cfg_err(
                    "dataset.class_counts",
                    "need one count of at least 2 per class",
                ));
            }
        }
        match &d.separations {
            Some(s) if s.len() != d.num_classes || s.iter().any(|v| !(*v > 0.0)) => {
                return Err(cfg_err(
                    "dataset.separations",
                    "need one positive separation per class",
                ))
            }
            None if !(d.separation_min > 0.0 && d.separation_max >= d.separation_min) => {
                return Err(cfg_err(
                    "dataset.separation_min",
                    "need 0 < separation_min <= separation_max",
                ))
            }
            _ => {}
        }

        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.rate) {
            return Err(cfg_err("noise.rate", format!("{} outside [0, 1]", n.rate)));
        }
        if let Some(map) = &n.class_map {
            if n.kind != NoiseChoice::Asymmetric {
                return Err(cfg_err("noise.class_map", "only valid for asymmetric noise"));
            }
            let mut domain = std::collections::BTreeSet::new();
            for &[from, to] in map {
                if from >= d.num_classes || to >= d.num_classes || from == to {
                    return Err(cfg_err("noise.class_map", format!("invalid pair [{from}, {to}]")));
                }
                if !domain.insert(from) {
                    return Err(cfg_err("noise.class_map", format!("class {from} mapped twice")));
                }
            }
            if domain.len() >= d.num_classes {
                return Err(cfg_err("noise.class_map", "domain must be a strict subset of classes"));
            }
        }

        let arch = self.architecture();
        if let Err(e) = arch.validate() {
            return Err(cfg_err("model.proj_dim", e.to_string()));
        }

        let t = &self.trainer;
        if t.epochs < 1 {
            return Err(cfg_err("trainer.epochs", "must be positive"));
        }
        if t.warmup_epochs < 1 || t.warmup_epochs >= t.epochs {
            return Err(cfg_err("trainer.warmup_epochs", "need 1 <= warmup_epochs < epochs"));
        }
        if !(0.0..1.0).contains(&t.cpc_warmup) || t.cpc_gate_epoch() >= t.epochs {
            return Err(cfg_err(
                "trainer.cpc_warmup",
                "prototype warm-up must end before the last epoch",
            ));
        }
        if !(t.tau > 0.0 && t.tau < 1.0) {
            return Err(cfg_err("trainer.tau", format!("{} outside (0, 1)", t.tau)));
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return Err(cfg_err("trainer.alpha", "must be finite and nonnegative"));
        }
        if !(t.lambda_u >= 0.0 && t.lambda_u.is_finite()) {
            return Err(cfg_err("trainer.lambda_u", "must be finite and nonnegative"));
        }
        if !(t.lambda_r >= 0.0 && t.lambda_r.is_finite()) {
            return Err(cfg_err("trainer.lambda_r", "must be finite and nonnegative"));
        }
        if !(t.warmup_penalty >= 0.0 && t.warmup_penalty.is_finite()) {
            return Err(cfg_err("trainer.warmup_penalty", "must be finite and nonnegative"));
        }
        if t.batch_size < 1 {
            return Err(cfg_err("trainer.batch_size", "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(cfg_err("trainer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(cfg_err("trainer.momentum", "must be in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(cfg_err("trainer.weight_decay", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&t.lr_drop_at) {
            return Err(cfg_err("trainer.lr_drop_at", "must be in [0, 1]"));
        }
        if !(t.mix_alpha > 0.0) {
            return Err(cfg_err("trainer.mix_alpha", "must be positive"));
        }
        if !(t.temperature > 0.0) {
            return Err(cfg_err("trainer.temperature", "must be positive"));
        }
        if t.gmm.max_iter < 1 {
            return Err(cfg_err("trainer.gmm.max_iter", "must be positive"));
        }
        if !(t.gmm.tol >= 0.0) {
            return Err(cfg_err("trainer.gmm.tol", "must be nonnegative"));
        }
        if !(t.gmm.sigma_floor > 0.0) {
            return Err(cfg_err("trainer.gmm.sigma_floor", "must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.dataset.dim,
            hidden: self.model.hidden.clone(),
            num_classes: self.dataset.num_classes,
            proj_dim: self.model.proj_dim,
            proj_hidden: self.model.proj_hidden.clone(),
        }
    }
}

/// Training and test data of a run.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: NoisyDataset,
    pub test: CleanDataset,
}

pub fn build_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let d = &cfg.dataset;
    let gen = BlobGenerator::new(d.num_classes, d.dim, &d.separations(), d.seed)?;
    let clean = gen.sample(&d.train_counts(), d.seed)?;
    let test = gen.sample(&vec![d.n_test_per_class.max(2); d.num_classes], rng::mix(d.seed, 1))?;
    let n = &cfg.noise;
    let train = match n.kind {
        NoiseChoice::None => NoisyDataset::clean(clean),
        NoiseChoice::Symmetric => {
            datagen::inject_symmetric_with(&clean, n.rate, n.exclude_true, d.seed)?
        }
        NoiseChoice::Asymmetric => {
            let map: BTreeMap<usize, usize> = match &n.class_map {
                Some(pairs) => pairs.iter().map(|&[a, b]| (a, b)).collect(),
                None => match n.pairing {
                    Pairing::Next => datagen::default_pair_map(d.num_classes),
                    Pairing::Nearest => datagen::nearest_pair_map(gen.centers()),
                },
            };
            datagen::inject_asymmetric(&clean, n.rate, &map, d.seed)?
        }
    };
    Ok(Benchmark { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub source: CleanerSource,
    /// Network whose outputs scored the partition.
    pub scored_by: Option<usize>,
    pub clean: usize,
    pub noise: usize,
    /// Fraction of the clean set whose label is actually correct.
    pub clean_precision: Option<f64>,
    /// Set when the mixture degenerated and the previous partition was reused.
    pub reused_previous: bool,
}

/// Per-network measurements of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NetEpoch {
    /// Mean cross-entropy on observed labels over the training set.
    pub train_loss: f64,
    /// Cleaner AUC of the scores that partition data for this network.
    pub auc: BTreeMap<String, f64>,
    pub partition: Option<PartitionStats>,
    pub gmm_fit: Option<GmmFit>,
    pub gmm_class_fits: Option<Vec<GmmFit>>,
    pub cpc: Option<CpcUpdateReport>,
    pub confident: Option<usize>,
    /// Ten-bin histogram of prototype clean scores over [0, 1].
    pub cpc_score_histogram: Option<Vec<u32>>,
    pub evr: Option<EvrBreakdown>,
    /// Divergence and decision agreement between the mixture posterior and
    /// the prototype score.
    pub kld: Option<f64>,
    pub consistency: Option<f64>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub test_accuracy: f64,
    pub nets: Vec<NetEpoch>,
    /// Loss heterogeneity at the end of the network warm-up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub cleaner_mode: CleanerMode,
    pub cpc_supervision: CpcSupervision,
    pub seed: u64,
    pub epochs: usize,
    pub final_test_accuracy: f64,
    /// Mean over networks and over the last third of epochs.
    pub final_third_auc: BTreeMap<String, f64>,
    pub warmup_ks: Option<KsReport>,
}

pub struct RunOutput {
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub networks: [Network; 2],
    pub banks: Option<[PrototypeBank; 2]>,
}

/// Per-network forward pass over the whole training set.
struct Snapshot {
    losses: Vec<f64>,
    probs: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

fn snapshot(net: &Network, data: &NoisyDataset) -> Result<Snapshot> {
    let n = data.len();
    let mut s = Snapshot {
        losses: Vec::with_capacity(n),
        probs: Vec::with_capacity(n),
        embeddings: Vec::with_capacity(n),
    };
    for i in 0..n {
        let out = net.forward(data.feature(i))?;
        s.losses.push(-out.log_probs[data.observed_labels()[i]]);
        s.probs.push(out.probs);
        s.embeddings.push(out.embedding);
    }
    Ok(s)
}

fn histogram(values: &[f64], bins: usize) -> Vec<u32> {
    let mut h = vec![0u32; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

fn clean_precision(p: &Partition, corrupted: &[bool]) -> Option<f64> {
    if p.clean().is_empty() {
        return None;
    }
    let ok = p.clean().iter().filter(|&&(i, _)| !corrupted[i]).count();
    Some(ok as f64 / p.clean().len() as f64)
}

/// Warm-up objective on one batch: mean cross-entropy plus `penalty` times
/// the mean negative entropy of the predictions. Gradients cover the
/// backbone and classifier.
pub fn warmup_loss_and_grads(
    net: &Network,
    inputs: &[&[f64]],
    labels: &[usize],
    penalty: f64,
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() {
        return Err(Error::Empty("warm-up batch"));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = net.zero_grads();
    let mut total = 0.0;
    for (&x, &y) in inputs.iter().zip(labels) {
        let out = net.forward(x)?;
        total += -out.log_probs[y] * scale;
        let mut d = out.probs.iter().map(|p| p * scale).collect::<Vec<_>>();
        d[y] -= scale;
        if penalty != 0.0 {
            // d/dz_j of Σ p log p is p_j (log p_j − Σ p log p).
            let neg_h: f64 = out.probs.iter().zip(&out.log_probs).map(|(p, lp)| p * lp).sum();
            total += penalty * neg_h * scale;
            for ((g, p), lp) in d.iter_mut().zip(&out.probs).zip(&out.log_probs) {
                *g += penalty * scale * p * (lp - neg_h);
            }
        }
        net.backward_into(
            &out,
            Upstream {
                d_logits: Some(&d),
                d_embedding: None,
            },
            true,
            &mut grads,
        )?;
    }
    Ok((total, grads))
}

/// One warm-up epoch over all observed labels; returns the mean objective.
pub fn warmup_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    data: &NoisyDataset,
    batch_size: usize,
    lr: f64,
    penalty: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|&i| data.feature(i)).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.observed_labels()[i]).collect();
        let (loss, grads) = warmup_loss_and_grads(net, &inputs, &labels, penalty)?;
        total += loss * chunk.len() as f64;
        opt.step_with_lr(net, &grads, ParamGroups::CLASSIFIER_PATH, lr)?;
    }
    let mean = total / data.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("warm-up loss".into()));
    }
    Ok(mean)
}

/// Runs `epochs` warm-up epochs on both networks with distinct shuffles.
#[allow(clippy::too_many_arguments)]
pub fn warmup(
    nets: &mut [Network; 2],
    opts: &mut [Sgd; 2],
    data: &NoisyDataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    penalty: f64,
    seed: u64,
) -> Result<()> {
    if epochs < 1 {
        return Err(Error::param("epochs", "warm-up needs at least one epoch"));
    }
    let mut rngs = [
        rng::seeded(rng::mix(seed, 0), stream::SHUFFLE),
        rng::seeded(rng::mix(seed, 1), stream::SHUFFLE),
    ];
    for _ in 0..epochs {
        for r in 0..2 {
            warmup_epoch(&mut nets[r], &mut opts[r], data, batch_size, lr, penalty, &mut rngs[r])?;
        }
    }
    Ok(())
}

/// Stage two: one pass of vicinal-risk training for `net` on `partition`,
/// with `other` helping to build soft targets.
#[allow(clippy::too_many_arguments)]
pub fn epoch_stage2(
    net: &mut Network,
    opt: &mut Sgd,
    other: &Network,
    data: &NoisyDataset,
    partition: &Partition,
    cfg: &TrainerConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<EvrBreakdown> {
    if partition.clean().is_empty() {
        return Err(Error::Empty("clean partition"));
    }
    let mix = cfg.mix();
    let b = cfg.batch_size;
    let mut clean: Vec<(usize, f64)> = partition.clean().to_vec();
    clean.shuffle(rng);
    let mut noise: Vec<usize> = partition.noise().to_vec();
    noise.shuffle(rng);
    let iterations = clean.len().div_ceil(b);
    let mut noise_cursor = 0;
    let mut sum = EvrBreakdown {
        labeled: 0.0,
        unlabeled: 0.0,
        lambda_u: cfg.lambda_u,
        prior: 0.0,
        lambda_r: cfg.lambda_r,
        total: 0.0,
    };
    for it in 0..iterations {
        let lab_batch = &clean[it * b..((it + 1) * b).min(clean.len())];
        let mut unl_batch = Vec::with_capacity(lab_batch.len());
        if !noise.is_empty() {
            for _ in 0..lab_batch.len() {
                if noise_cursor == noise.len() {
                    noise.shuffle(rng);
                    noise_cursor = 0;
                }
                unl_batch.push(noise[noise_cursor]);
                noise_cursor += 1;
            }
        }
        let labeled_in: Vec<(&[f64], usize, f64)> = lab_batch
            .iter()
            .map(|&(i, w)| (data.feature(i), data.observed_labels()[i], w))
            .collect();
        let unlabeled_in: Vec<&[f64]> = unl_batch.iter().map(|&i| data.feature(i)).collect();
        let (labeled, unlabeled) =
            semisup::make_targets(net, other, &labeled_in, &unlabeled_in, mix.temperature)?;
        let batch = semisup::build_vicinal_batch(&labeled, &unlabeled, &mix, rng)?;
        let step = semisup::evr_step(net, opt, &batch, cfg.lambda_u, cfg.lambda_r, lr)?;
        sum.labeled += step.labeled;
        sum.unlabeled += step.unlabeled;
        sum.prior += step.prior;
        sum.total += step.total;
    }
    let k = iterations as f64;
    sum.labeled /= k;
    sum.unlabeled /= k;
    sum.prior /= k;
    sum.total /= k;
    Ok(sum)
}

/// Stage-one output for one network.
pub struct Stage1 {
    /// Loss-mixture scores for the partition of this network (from the other
    /// network's losses), class-agnostic and class-aware.
    pub gmm_agn: Option<GmmCleaning>,
    pub gmm_awr: Option<GmmCleaning>,
    /// Mixture partition in the flavor the cleaner mode uses.
    pub gmm_partition: Option<Partition>,
    pub cpc_scores: Option<Vec<f64>>,
    pub cpc_partition: Option<Partition>,
    pub cpc_report: Option<CpcUpdateReport>,
    pub confident: Option<usize>,
}

/// Owns the state of a run and advances it one epoch at a time.
pub struct Trainer {
    cfg: RunConfig,
    data: Benchmark,
    nets: [Network; 2],
    opts: [Sgd; 2],
    banks: Option<[PrototypeBank; 2]>,
    shuffle_rngs: [Rng; 2],
    cpc_rngs: [Rng; 2],
    previous: [Option<Partition>; 2],
    epoch: usize,
    warmup_ks: Option<KsReport>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()
            .map_err(|e| Error::param("config", e.to_string()))?;
        let data = build_benchmark(&cfg)?;
        let arch = cfg.architecture();
        let nets = [
            Network::new(arch.clone(), &mut rng::seeded(rng::mix(cfg.seed, 0), stream::INIT))?,
            Network::new(arch, &mut rng::seeded(rng::mix(cfg.seed, 1), stream::INIT))?,
        ];
        let sgd = cfg.trainer.sgd();
        let opts = [Sgd::new(&nets[0], sgd), Sgd::new(&nets[1], sgd)];
        let per_net = |s: u64| {
            [
                rng::seeded(rng::mix(cfg.seed, 0), s),
                rng::seeded(rng::mix(cfg.seed, 1), s),
            ]
        };
        Ok(Self {
            shuffle_rngs: per_net(stream::SHUFFLE),
            cpc_rngs: per_net(stream::CPC),
            cfg,
            data,
            nets,
            opts,
            banks: None,
            previous: [None, None],
            epoch: 0,
            warmup_ks: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn benchmark(&self) -> &Benchmark {
        &self.data
    }

    pub fn networks(&self) -> &[Network; 2] {
        &self.nets
    }

    pub fn banks(&self) -> Option<&[PrototypeBank; 2]> {
        self.banks.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.trainer.epochs
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        let nets: Vec<&Network> = if self.cfg.trainer.ensemble_inference {
            self.nets.iter().collect()
        } else {
            vec![&self.nets[0]]
        };
        eval::test_accuracy(&nets, &self.data.test)
    }

    /// Partition source for stage two of the current epoch.
    pub fn stage2_source(&self, epoch: usize) -> CleanerSource {
        let t = &self.cfg.trainer;
        let mode = self.cfg.cleaner_mode;
        if mode.uses_cpc()
            && (t.cpc_supervision == CpcSupervision::SelfLabel || epoch >= t.cpc_gate_epoch())
        {
            CleanerSource::Cpc
        } else if mode.class_aware_gmm() {
            CleanerSource::GmmAware
        } else {
            CleanerSource::GmmAgnostic
        }
    }

    pub fn step(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let record = if epoch < self.cfg.trainer.warmup_epochs {
            self.warmup_step(epoch)
        } else {
            self.main_step(epoch)
        }
        .map_err(|e| match e {
            Error::Aborted { .. } => e,
            other => Error::Aborted {
                epoch,
                reason: other.to_string(),
            },
        })?;
        self.epoch += 1;
        Ok(record)
    }

    fn warmup_step(&mut self, epoch: usize) -> Result<EpochRecord> {
        let t = &self.cfg.trainer;
        let lr = t.lr_at(epoch);
        let mut nets_out = Vec::with_capacity(2);
        for r in 0..2 {
            let loss = warmup_epoch(
                &mut self.nets[r],
                &mut self.opts[r],
                &self.data.train,
                t.batch_size,
                lr,
                t.warmup_penalty,
                &mut self.shuffle_rngs[r],
            )?;
            nets_out.push(NetEpoch {
                train_loss: loss,
                ..NetEpoch::default()
            });
        }
        let mut ks = None;
        if epoch + 1 == t.warmup_epochs {
            let snap = snapshot(&self.nets[0], &self.data.train)?;
            let report = eval::ks_heterogeneity(
                &snap.losses,
                self.data.train.observed_labels(),
                self.data.train.corrupted(),
                self.data.train.num_classes(),
            )?;
            self.warmup_ks = Some(report.clone());
            ks = Some(report);
        }
        Ok(EpochRecord {
            epoch,
            stage: Stage::Warmup,
            lr,
            test_accuracy: self.test_accuracy()?,
            nets: nets_out,
            ks,
        })
    }

    fn gmm_for(&self, losses: &[f64], class_aware: bool, epoch: usize) -> Result<Option<GmmCleaning>> {
        let data = &self.data.train;
        match gmm::gmm_clean_scores(
            losses,
            data.observed_labels(),
            data.num_classes(),
            class_aware,
            &self.cfg.trainer.gmm,
            rng::mix(self.cfg.seed, epoch as u64),
        ) {
            Ok(c) => Ok(Some(c)),
            Err(Error::DegenerateFit) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn main_step(&mut self, epoch: usize) -> Result<EpochRecord> {
        let t = self.cfg.trainer.clone();
        let mode = self.cfg.cleaner_mode;
        let lr = t.lr_at(epoch);
        let n = self.data.train.len();
        let labels = self.data.train.observed_labels().to_vec();
        let corrupted = self.data.train.corrupted().to_vec();
        let is_clean: Vec<bool> = corrupted.iter().map(|c| !c).collect();
        let k = self.data.train.num_classes();

        let snaps = [
            snapshot(&self.nets[0], &self.data.train)?,
            snapshot(&self.nets[1], &self.data.train)?,
        ];

        // Mixture cleaners: partition for network r is fitted on the losses
        // of network 1 - r.
        let mut stage1: Vec<Stage1> = Vec::with_capacity(2);
        for r in 0..2 {
            let losses = &snaps[1 - r].losses;
            let agn = self.gmm_for(losses, false, epoch)?;
            let awr = self.gmm_for(losses, true, epoch)?;
            let chosen = if mode.class_aware_gmm() { &awr } else { &agn };
            let gmm_partition = chosen
                .as_ref()
                .map(|c| gmm::partition_from_scores(&c.scores, t.tau))
                .transpose()?
                .map(|p| p.scored_by_network(1 - r));
            stage1.push(Stage1 {
                gmm_agn: agn,
                gmm_awr: awr,
                gmm_partition,
                cpc_scores: None,
                cpc_partition: None,
                cpc_report: None,
                confident: None,
            });
        }

        if mode.uses_cpc() {
            self.cpc_stage(epoch, lr, &snaps, &labels, &mut stage1)?;
        }

        // Stage two.
        let source = self.stage2_source(epoch);
        let mut nets_out: Vec<NetEpoch> = Vec::with_capacity(2);
        for r in 0..2 {
            let s1 = &stage1[r];
            let (partition, reused) = match source {
                CleanerSource::Cpc => (s1.cpc_partition.clone(), false),
                _ => match &s1.gmm_partition {
                    Some(p) => (Some(p.clone()), false),
                    None => (self.previous[r].clone(), true),
                },
            };
            let partition = match partition {
                Some(p) => p,
                None => {
                    return Err(Error::Aborted {
                        epoch,
                        reason: "degenerate loss mixture with no previous partition".into(),
                    })
                }
            };
            partition.validate(n)?;
            // Cross-network isolation: a network never trains on its own cleaner.
            assert_eq!(partition.scored_by(), Some(1 - r), "partition provenance");
            let (head, tail) = self.nets.split_at_mut(1);
            let (net, other) = if r == 0 {
                (&mut head[0], &tail[0])
            } else {
                (&mut tail[0], &head[0])
            };
            let evr = epoch_stage2(
                net,
                &mut self.opts[r],
                other,
                &self.data.train,
                &partition,
                &t,
                lr,
                &mut self.shuffle_rngs[r],
            )
            .map_err(|e| Error::Aborted {
                epoch,
                reason: format!("stage two of network {r}: {e}"),
            })?;

            let mut auc = BTreeMap::new();
            let mut put = |name: &str, scores: &[f64]| -> Result<()> {
                match eval::auc(scores, &is_clean) {
                    Ok(a) => {
                        auc.insert(name.to_string(), a);
                        Ok(())
                    }
                    Err(Error::SingleClass(_)) => Ok(()),
                    Err(e) => Err(e),
                }
            };
            if let Some(c) = &s1.gmm_agn {
                put(CleanerSource::GmmAgnostic.as_str(), &c.scores.q_clean)?;
            }
            if let Some(c) = &s1.gmm_awr {
                put(CleanerSource::GmmAware.as_str(), &c.scores.q_clean)?;
            }
            if let Some(q) = &s1.cpc_scores {
                put(CleanerSource::Cpc.as_str(), q)?;
            }
            let supervising = if mode.class_aware_gmm() { &s1.gmm_awr } else { &s1.gmm_agn };
            let (kld, consistency) = match (supervising, &s1.cpc_scores) {
                (Some(g), Some(q)) => (
                    Some(eval::kld_bernoulli(&g.scores.q_clean, q)?),
                    Some(eval::consistency_rate(&g.scores.q_clean, q, t.tau)?),
                ),
                _ => (None, None),
            };
            let reused_previous = reused && source != CleanerSource::Cpc;
            nets_out.push(NetEpoch {
                train_loss: snaps[r].losses.iter().sum::<f64>() / n as f64,
                auc,
                partition: Some(PartitionStats {
                    source: partition.source(),
                    scored_by: partition.scored_by(),
                    clean: partition.clean().len(),
                    noise: partition.noise().len(),
                    clean_precision: clean_precision(&partition, &corrupted),
                    reused_previous,
                }),
                gmm_fit: s1.gmm_agn.as_ref().map(|c| c.fits.global),
                gmm_class_fits: s1.gmm_awr.as_ref().map(|c| c.fits.per_class.clone()),
                cpc: s1.cpc_report,
                confident: s1.confident,
                cpc_score_histogram: s1.cpc_scores.as_ref().map(|q| histogram(q, 10)),
                evr: Some(evr),
                kld,
                consistency,
            });
            if !reused_previous {
                self.previous[r] = Some(partition);
            }
        }
        let _ = k;
        Ok(EpochRecord {
            epoch,
            stage: Stage::Main,
            lr,
            test_accuracy: self.test_accuracy()?,
            nets: nets_out,
            ks: None,
        })
    }

    /// Updates both prototype banks and scores the data with them.
    fn cpc_stage(
        &mut self,
        epoch: usize,
        lr: f64,
        snaps: &[Snapshot; 2],
        labels: &[usize],
        stage1: &mut [Stage1],
    ) -> Result<()> {
        let t = self.cfg.trainer.clone();
        let k = self.data.train.num_classes();
        let n = labels.len();
        let d = self.cfg.model.proj_dim;

        if self.banks.is_none() {
            let mut banks = [
                PrototypeBank::new(k, d, t.tau, t.alpha)?,
                PrototypeBank::new(k, d, t.tau, t.alpha)?,
            ];
            for r in 0..2 {
                let members = match (&stage1[r].gmm_partition, t.cpc_supervision) {
                    (Some(p), CpcSupervision::Gmm) => p.clean_mask(),
                    _ => vec![true; n],
                };
                banks[r].init_from_embeddings(&snaps[r].embeddings, labels, &members)?;
            }
            self.banks = Some(banks);
        }

        let inputs: Vec<&[f64]> = (0..n).map(|i| self.data.train.feature(i)).collect();
        let banks = self.banks.as_mut().expect("banks initialized");
        for r in 0..2 {
            let (partition, confident) = match t.cpc_supervision {
                CpcSupervision::Gmm => {
                    let Some(p) = stage1[r].gmm_partition.clone().or_else(|| self.previous[r].clone())
                    else {
                        continue;
                    };
                    let clean: Vec<usize> = p.clean().iter().map(|&(i, _)| i).collect();
                    let conf = cpc::select_confident(p.noise(), &clean, labels, &snaps[r].probs, k);
                    (p, conf)
                }
                CpcSupervision::SelfLabel => {
                    let mask = cpc::self_label_mask(&banks[r], &snaps[r].embeddings, labels);
                    let q: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                    let p = Partition::from_scores(&q, 0.5, CleanerSource::Cpc)?;
                    let clean: Vec<usize> = p.clean().iter().map(|&(i, _)| i).collect();
                    let conf = cpc::select_confident(p.noise(), &clean, labels, &snaps[r].probs, k);
                    (p, conf)
                }
            };
            let roles: Vec<Role> =
                cpc::assign_roles(n, &partition, &confident, t.alpha, t.exclude_confident_from_noise);
            let report = cpc::update(
                &mut banks[r],
                &mut self.nets[r],
                &mut self.opts[r],
                &inputs,
                labels,
                &roles,
                t.batch_size,
                lr,
                &mut self.cpc_rngs[r],
            )
            .map_err(|e| Error::Aborted {
                epoch,
                reason: format!("prototype update of bank {r}: {e}"),
            })?;
            stage1[r].cpc_report = Some(report);
            stage1[r].confident = Some(if t.alpha == 0.0 { 0 } else { confident.members.len() });
        }

        // Re-divide with the updated banks: network r is scored by the
        // other network's embeddings and bank.
        for r in 0..2 {
            let o = 1 - r;
            let embeddings = (0..n)
                .map(|i| Ok(self.nets[o].forward(inputs[i])?.embedding))
                .collect::<Result<Vec<_>>>()?;
            let (scores, partition) = cpc::partition_cpc(&banks[o], &embeddings, labels, t.tau)?;
            stage1[r].cpc_scores = Some(scores.q_clean);
            stage1[r].cpc_partition = Some(partition.scored_by_network(o));
        }
        Ok(())
    }

    fn into_output(self, records: Vec<EpochRecord>) -> Result<RunOutput> {
        let final_test_accuracy = self.test_accuracy()?;
        let summary = summarize(&self.cfg, &records, final_test_accuracy, self.warmup_ks.clone());
        Ok(RunOutput {
            records,
            summary,
            networks: self.nets,
            banks: self.banks,
        })
    }
}

/// Mean of each cleaner's AUC over networks and the last third of epochs.
pub fn final_third_auc(records: &[EpochRecord]) -> BTreeMap<String, f64> {
    let main: Vec<&EpochRecord> = records.iter().filter(|r| r.stage == Stage::Main).collect();
    let tail = &main[main.len() - main.len() / 3..];
    let tail = if main.len() >= 3 { tail } else { &main[..] };
    window_auc(tail)
}

/// Mean AUC per cleaner over the given records and both networks.
pub fn window_auc(records: &[&EpochRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        for net in &r.nets {
            for (name, v) in &net.auc {
                let e = acc.entry(name.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

pub fn summarize(
    cfg: &RunConfig,
    records: &[EpochRecord],
    final_test_accuracy: f64,
    warmup_ks: Option<KsReport>,
) -> RunSummary {
    RunSummary {
        name: cfg.dataset.name.clone(),
        cleaner_mode: cfg.cleaner_mode,
        cpc_supervision: cfg.trainer.cpc_supervision,
        seed: cfg.seed,
        epochs: records.len(),
        final_test_accuracy,
        final_third_auc: final_third_auc(records),
        warmup_ks,
    }
}

/// Trains to completion, handing every record to `sink` as soon as it is
/// produced. On failure the sink has seen every completed epoch.
pub fn run(
    cfg: &RunConfig,
    mut sink: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.trainer.epochs);
    while !trainer.is_done() {
        let record = trainer.step()?;
        sink(&record)?;
        records.push(record);
    }
    trainer.into_output(records)
}

/// Cross-entropy of every training sample under `net`.
pub fn training_losses(net: &Network, data: &NoisyDataset) -> Result<Vec<f64>> {
    (0..data.len())
        .map(|i| {
            let p = net.predict(data.feature(i))?;
            Ok(nnet::ce_loss(&p, data.observed_labels()[i]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(mode: CleanerMode) -> RunConfig {
        RunConfig {
            dataset: DatasetConfig {
                num_classes: 3,
                dim: 4,
                n_per_class: 30,
                n_test_per_class: 20,
                ..DatasetConfig::default()
            },
            noise: NoiseConfig {
                kind: NoiseChoice::Symmetric,
                rate: 0.4,
                ..NoiseConfig::default()
            },
            model: ModelConfig {
                hidden: vec![16, 16],
                proj_dim: 4,
                proj_hidden: vec![],
            },
            trainer: TrainerConfig {
                epochs: 8,
                warmup_epochs: 2,
                cpc_warmup: 0.25,
                batch_size: 16,
                ..TrainerConfig::default()
            },
            cleaner_mode: mode,
            seed: 3,
        }
    }

    #[test]
    fn gating_switches_at_prototype_warmup() {
        let cfg = tiny_config(CleanerMode::CpcAgn);
        let out = run(&cfg, |_| Ok(())).unwrap();
        let gate = cfg.trainer.cpc_gate_epoch();
        assert_eq!(gate, 4);
        for rec in &out.records {
            for (r, net) in rec.nets.iter().enumerate() {
                match rec.stage {
                    Stage::Warmup => assert!(net.partition.is_none()),
                    Stage::Main => {
                        let p = net.partition.as_ref().unwrap();
                        let want = if rec.epoch < gate {
                            CleanerSource::GmmAgnostic
                        } else {
                            CleanerSource::Cpc
                        };
                        assert_eq!(p.source, want, "epoch {}", rec.epoch);
                        assert_eq!(p.scored_by, Some(1 - r));
                        assert_eq!(p.clean + p.noise, 90);
                    }
                }
            }
        }
        assert_eq!(out.records.len(), cfg.trainer.epochs);
    }

    #[test]
    fn gmm_modes_never_use_prototypes() {
        for mode in [CleanerMode::GmmAgn, CleanerMode::GmmAwr] {
            let cfg = tiny_config(mode);
            let out = run(&cfg, |_| Ok(())).unwrap();
            assert!(out.banks.is_none());
            for rec in out.records.iter().filter(|r| r.stage == Stage::Main) {
                for net in &rec.nets {
                    assert!(!net.auc.contains_key("cpc"));
                    assert!(net.auc.contains_key("gmm_agn"));
                }
            }
        }
    }

    #[test]
    fn warmup_networks_diverge() {
        let cfg = tiny_config(CleanerMode::GmmAgn);
        let mut tr = Trainer::new(cfg).unwrap();
        tr.step().unwrap();
        assert_ne!(tr.networks()[0].params(), tr.networks()[1].params());
    }

    #[test]
    fn empty_clean_partition_aborts_stage_two() {
        let cfg = tiny_config(CleanerMode::GmmAgn);
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let p = Partition::from_scores(&vec![0.0; 90], 0.5, CleanerSource::GmmAgnostic).unwrap();
        let (a, b) = tr.nets.split_at_mut(1);
        let err = epoch_stage2(
            &mut a[0],
            &mut tr.opts[0],
            &b[0],
            &tr.data.train,
            &p,
            &cfg.trainer,
            0.01,
            &mut rng::seeded(0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn empty_noise_set_is_supervised_training() {
        let cfg = tiny_config(CleanerMode::GmmAgn);
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let p = Partition::from_scores(&vec![1.0; 90], 0.5, CleanerSource::GmmAgnostic).unwrap();
        let (a, b) = tr.nets.split_at_mut(1);
        let evr = epoch_stage2(
            &mut a[0],
            &mut tr.opts[0],
            &b[0],
            &tr.data.train,
            &p,
            &cfg.trainer,
            0.01,
            &mut rng::seeded(0, 0),
        )
        .unwrap();
        assert_eq!(evr.unlabeled, 0.0);
        assert!(evr.labeled > 0.0);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = tiny_config(CleanerMode::CpcAgn);
        cfg.trainer.tau = 1.5;
        assert_eq!(cfg.validate().unwrap_err().field, "trainer.tau");
        let mut cfg = tiny_config(CleanerMode::CpcAgn);
        cfg.trainer.cpc_warmup = 0.9;
        assert_eq!(cfg.validate().unwrap_err().field, "trainer.cpc_warmup");
        let mut cfg = tiny_config(CleanerMode::CpcAgn);
        cfg.model.proj_dim = 16;
        assert_eq!(cfg.validate().unwrap_err().field, "model.proj_dim");
    }

    #[test]
    fn lr_drops_at_half() {
        let t = TrainerConfig::default();
        assert_eq!(t.lr_at(49), 0.02);
        assert!((t.lr_at(50) - 0.002).abs() < 1e-15);
    }
}
