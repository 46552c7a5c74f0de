//! A small multilayer perceptron with three parts: a ReLU backbone producing
//! a feature vector, a linear classifier head, and a projector that maps the
//! feature to a unit-norm embedding. Gradients are computed by hand.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense layer `y = W x + b`, weights stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform fan-in initialization, bound `1/sqrt(in_dim)`.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| draw()).collect(),
            bias: (0..out_dim).map(|_| draw()).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine, want_dx: bool) -> Vec<f64> {
        let mut dx = if want_dx {
            vec![0.0; self.in_dim]
        } else {
            Vec::new()
        };
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = o * self.in_dim..(o + 1) * self.in_dim;
            for (g, v) in grad.weights[row.clone()].iter_mut().zip(x) {
                *g += d * v;
            }
            if want_dx {
                for (acc, w) in dx.iter_mut().zip(&self.weights[row]) {
                    *acc += d * w;
                }
            }
        }
        dx
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Layer sizes of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub proj_dim: usize,
    /// Hidden widths inside the projector; empty means a single affine map.
    #[serde(default)]
    pub proj_hidden: Vec<usize>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("hidden", "need at least one non-empty layer"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "need at least 2 classes"));
        }
        let feat = self.feature_dim();
        if self.proj_dim == 0 || self.proj_dim >= feat {
            return Err(Error::param(
                "proj_dim",
                format!(
                    "embedding size {} must be in [1, feature size {feat})",
                    self.proj_dim
                ),
            ));
        }
        if self.proj_hidden.contains(&0) {
            return Err(Error::param("proj_hidden", "zero-width layer"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }
}

/// The parameter blocks of a network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub backbone: Vec<Affine>,
    pub classifier: Affine,
    pub projector: Vec<Affine>,
}

pub type Gradients = ParamSet;

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.iter().map(Affine::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
            projector: self.projector.iter().map(Affine::zeros_like).collect(),
        }
    }

    fn layers(&self, groups: ParamGroups) -> impl Iterator<Item = &Affine> {
        let backbone = groups.backbone.then_some(self.backbone.iter());
        let classifier = groups.classifier.then_some(&self.classifier);
        let projector = groups.projector.then_some(self.projector.iter());
        backbone
            .into_iter()
            .flatten()
            .chain(classifier)
            .chain(projector.into_iter().flatten())
    }

    fn layers_mut(&mut self, groups: ParamGroups) -> impl Iterator<Item = &mut Affine> {
        let backbone = groups.backbone.then_some(self.backbone.iter_mut());
        let classifier = groups.classifier.then_some(&mut self.classifier);
        let projector = groups.projector.then_some(self.projector.iter_mut());
        backbone
            .into_iter()
            .flatten()
            .chain(classifier)
            .chain(projector.into_iter().flatten())
    }

    /// Flat view of the selected parameters, in a fixed order.
    pub fn values(&self, groups: ParamGroups) -> impl Iterator<Item = &f64> {
        self.layers(groups).flat_map(Affine::values)
    }

    pub fn values_mut(&mut self, groups: ParamGroups) -> impl Iterator<Item = &mut f64> {
        self.layers_mut(groups).flat_map(Affine::values_mut)
    }

    pub fn all_finite(&self, groups: ParamGroups) -> bool {
        self.values(groups).all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut(ParamGroups::ALL) {
            *v *= factor;
        }
    }

    /// `self += other` over every block.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (a, b) in self
            .values_mut(ParamGroups::ALL)
            .zip(other.values(ParamGroups::ALL))
        {
            *a += b;
        }
    }
}

/// Which parameter blocks an operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    pub backbone: bool,
    pub classifier: bool,
    pub projector: bool,
}

impl ParamGroups {
    pub const ALL: Self = Self {
        backbone: true,
        classifier: true,
        projector: true,
    };
    /// Backbone and classifier head: what cross-entropy style training updates.
    pub const CLASSIFIER_PATH: Self = Self {
        backbone: true,
        classifier: true,
        projector: false,
    };
    pub const PROJECTOR: Self = Self {
        backbone: false,
        classifier: false,
        projector: true,
    };
    pub const BACKBONE: Self = Self {
        backbone: true,
        classifier: false,
        projector: false,
    };
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `acts[0]` is the input; `acts[l+1]` the post-ReLU output of backbone layer `l`.
    backbone_acts: Vec<Vec<f64>>,
    /// Projector inputs per layer followed by the raw (pre-normalization) output.
    projector_acts: Vec<Vec<f64>>,
    proj_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub feature: Vec<f64>,
    pub embedding: Vec<f64>,
    pub cache: ForwardCache,
}

/// Gradients flowing into the network outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub d_logits: Option<&'a [f64]>,
    pub d_embedding: Option<&'a [f64]>,
}

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    arch: Architecture,
    params: ParamSet,
    #[serde(skip)]
    version: u64,
}

impl Network {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut width = arch.input_dim;
        let mut backbone = Vec::with_capacity(arch.hidden.len());
        for &h in &arch.hidden {
            backbone.push(Affine::init(width, h, rng));
            width = h;
        }
        let classifier = Affine::init(width, arch.num_classes, rng);
        let mut projector = Vec::new();
        let mut pw = width;
        for &h in arch.proj_hidden.iter().chain(std::iter::once(&arch.proj_dim)) {
            projector.push(Affine::init(pw, h, rng));
            pw = h;
        }
        Ok(Self {
            arch,
            params: ParamSet {
                backbone,
                classifier,
                projector,
            },
            version: 0,
        })
    }

    /// Network with every weight and bias set to zero.
    pub fn zeroed(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::new(arch, rng)?;
        for v in net.params.values_mut(ParamGroups::ALL) {
            *v = 0.0;
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for tests and finite-difference checks. Bumps the
    /// version so outstanding caches are invalidated.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.zeros_like()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOut> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Shape {
                context: "network input",
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        let mut backbone_acts = Vec::with_capacity(self.params.backbone.len() + 1);
        backbone_acts.push(x.to_vec());
        for layer in &self.params.backbone {
            let mut z = layer.forward(backbone_acts.last().unwrap());
            relu_inplace(&mut z);
            backbone_acts.push(z);
        }
        let feature = backbone_acts.last().unwrap().clone();
        let logits = self.params.classifier.forward(&feature);
        let log_probs = log_softmax(&logits);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();

        let mut projector_acts = Vec::with_capacity(self.params.projector.len() + 1);
        projector_acts.push(feature.clone());
        let last = self.params.projector.len() - 1;
        for (j, layer) in self.params.projector.iter().enumerate() {
            let mut u = layer.forward(projector_acts.last().unwrap());
            if j < last {
                relu_inplace(&mut u);
            }
            projector_acts.push(u);
        }
        let raw = projector_acts.last().unwrap();
        let proj_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let embedding = raw.iter().map(|v| v / proj_norm).collect();

        Ok(ForwardOut {
            logits,
            probs,
            log_probs,
            feature,
            embedding,
            cache: ForwardCache {
                version: self.version,
                backbone_acts,
                projector_acts,
                proj_norm,
            },
        })
    }

    /// Softmax output only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    /// Accumulates exact gradients of a loss whose derivatives with respect
    /// to the logits and/or the embedding are given in `upstream`. With
    /// `stop_at_projector_input` the projector path does not reach the
    /// backbone.
    pub fn backward_into(
        &self,
        out: &ForwardOut,
        upstream: Upstream<'_>,
        stop_at_projector_input: bool,
        grads: &mut Gradients,
    ) -> Result<()> {
        let cache = &out.cache;
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        let feat_dim = self.arch.feature_dim();
        let mut d_feature: Option<Vec<f64>> = None;

        if let Some(d_logits) = upstream.d_logits {
            check_len("logit gradient", self.arch.num_classes, d_logits.len())?;
            let dx = self.params.classifier.backward(
                &out.feature,
                d_logits,
                &mut grads.classifier,
                true,
            );
            d_feature = Some(dx);
        }

        if let Some(d_emb) = upstream.d_embedding {
            check_len("embedding gradient", self.arch.proj_dim, d_emb.len())?;
            let e = &out.embedding;
            let proj = e.iter().zip(d_emb).map(|(a, b)| a * b).sum::<f64>();
            let mut d = d_emb
                .iter()
                .zip(e)
                .map(|(g, ei)| (g - ei * proj) / cache.proj_norm)
                .collect::<Vec<_>>();
            let n_layers = self.params.projector.len();
            for j in (0..n_layers).rev() {
                if j + 1 < n_layers {
                    relu_mask(&mut d, &cache.projector_acts[j + 1]);
                }
                let want_dx = j > 0 || !stop_at_projector_input;
                d = self.params.projector[j].backward(
                    &cache.projector_acts[j],
                    &d,
                    &mut grads.projector[j],
                    want_dx,
                );
            }
            if !stop_at_projector_input {
                match d_feature.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    None => d_feature = Some(d),
                }
            }
        }

        if let Some(mut d) = d_feature {
            debug_assert_eq!(d.len(), feat_dim);
            for l in (0..self.params.backbone.len()).rev() {
                relu_mask(&mut d, &cache.backbone_acts[l + 1]);
                d = self.params.backbone[l].backward(
                    &cache.backbone_acts[l],
                    &d,
                    &mut grads.backbone[l],
                    l > 0,
                );
            }
        }
        Ok(())
    }

    pub fn backward(
        &self,
        out: &ForwardOut,
        upstream: Upstream<'_>,
        stop_at_projector_input: bool,
    ) -> Result<Gradients> {
        let mut grads = self.zero_grads();
        self.backward_into(out, upstream, stop_at_projector_input, &mut grads)?;
        Ok(grads)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        let text = serde_json::to_string(&ckpt).expect("network serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let net = ckpt.network;
        net.arch.validate()?;
        net.check_shapes().map_err(bad)?;
        Ok(net)
    }

    fn check_shapes(&self) -> std::result::Result<(), String> {
        let mut width = self.arch.input_dim;
        let layer_ok = |l: &Affine, i: usize, o: usize| {
            l.in_dim == i && l.out_dim == o && l.weights.len() == i * o && l.bias.len() == o
        };
        if self.params.backbone.len() != self.arch.hidden.len() {
            return Err("backbone depth differs from architecture".into());
        }
        for (l, &h) in self.params.backbone.iter().zip(&self.arch.hidden) {
            if !layer_ok(l, width, h) {
                return Err("backbone layer shape mismatch".into());
            }
            width = h;
        }
        if !layer_ok(&self.params.classifier, width, self.arch.num_classes) {
            return Err("classifier shape mismatch".into());
        }
        let widths: Vec<usize> = self
            .arch
            .proj_hidden
            .iter()
            .copied()
            .chain([self.arch.proj_dim])
            .collect();
        if self.params.projector.len() != widths.len() {
            return Err("projector depth differs from architecture".into());
        }
        for (l, &h) in self.params.projector.iter().zip(&widths) {
            if !layer_ok(l, width, h) {
                return Err("projector layer shape mismatch".into());
            }
            width = h;
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "protoclean-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    network: Network,
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose ReLU output was inactive.
fn relu_mask(d: &mut [f64], post_act: &[f64]) {
    for (g, a) in d.iter_mut().zip(post_act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Vector-Jacobian product of softmax: maps `dL/dp` to `dL/dlogits`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum::<f64>();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Cross-entropy `-ln p[label]`.
pub fn ce_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

/// Cross-entropy against a soft target, from log-probabilities.
pub fn soft_ce(log_probs: &[f64], target: &[f64]) -> f64 {
    -log_probs
        .iter()
        .zip(target)
        .map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One momentum step over flat slices: `v ← μv + g + λw`, `w ← w − lr·v`.
pub fn momentum_update(w: &mut [f64], v: &mut [f64], g: &[f64], cfg: &SgdConfig, lr: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
        *w -= lr * *v;
    }
}

/// Momentum SGD with weight decay; the learning rate can be overridden per
/// step for schedules.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(net: &Network, config: SgdConfig) -> Self {
        Self {
            config,
            velocity: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, groups: ParamGroups) -> Result<()> {
        self.step_with_lr(net, grads, groups, self.config.lr)
    }

    pub fn step_with_lr(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        groups: ParamGroups,
        lr: f64,
    ) -> Result<()> {
        if let Some(bad) = grads.values(groups).position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        let cfg = self.config;
        let params = net.params_mut();
        for ((w, v), g) in params
            .values_mut(groups)
            .zip(self.velocity.values_mut(groups))
            .zip(grads.values(groups))
        {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
        if !params.all_finite(groups) {
            return Err(Error::NonFinite("parameters after SGD step".into()));
        }
        Ok(())
    }
}
