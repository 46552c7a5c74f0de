//! Class-prototype cleaner.
//!
//! Each class `k` owns a prototype `c_k` in the projector's embedding space.
//! A sample `(x, y)` is scored clean with `sigmoid(v′ · c_y)`, where `v′` is
//! the unit-norm projector embedding of `x`. Prototypes and the projector are
//! trained from a loss-mixture partition of the same epoch:
//!
//! * clean-set samples pull `c_y` toward `v′` and push every other prototype
//!   away with weight `1/K`,
//! * noise-set samples push `c_y` (their observed label) away,
//! * confidently predicted noise samples pull the prototype of the predicted
//!   class toward `v′`, weighted by `alpha`.
//!
//! Gradients never reach the backbone.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{CleanerScores, CleanerSource};
use crate::nnet::{momentum_update, Network, ParamGroups, Sgd, SgdConfig, Upstream};
use crate::rng::Rng;
use crate::semisup::Partition;

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// `-ln sigmoid(s)`.
fn neg_log_sigmoid(s: f64) -> f64 {
    softplus(-s)
}

/// `-ln(1 - sigmoid(s))`.
fn neg_log_one_minus_sigmoid(s: f64) -> f64 {
    softplus(s)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    num_classes: usize,
    dim: usize,
    /// Row `k` is `c_k`.
    prototypes: Vec<f64>,
    #[serde(skip)]
    velocity: Vec<f64>,
    tau: f64,
    alpha: f64,
    lambda_neg: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, dim: usize, tau: f64, alpha: f64) -> Result<Self> {
        if num_classes < 1 || dim < 1 {
            return Err(Error::param("prototypes", "need at least one class and dimension"));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::param("tau", format!("{tau} outside (0, 1)")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::param("alpha", "must be finite and nonnegative"));
        }
        Ok(Self {
            num_classes,
            dim,
            prototypes: vec![0.0; num_classes * dim],
            velocity: vec![0.0; num_classes * dim],
            tau,
            alpha,
            lambda_neg: 1.0 / num_classes as f64,
        })
    }

    /// Sets `c_k` to the mean embedding of the samples labeled `k` in
    /// `members`, falling back to all samples labeled `k`, then to zero.
    pub fn init_from_embeddings(
        &mut self,
        embeddings: &[Vec<f64>],
        labels: &[usize],
        members: &[bool],
    ) -> Result<()> {
        if embeddings.len() != labels.len() || members.len() != labels.len() {
            return Err(Error::Shape {
                context: "prototype initialization",
                expected: labels.len(),
                got: embeddings.len().min(members.len()),
            });
        }
        let d = self.dim;
        let mut sums = vec![0.0; self.num_classes * d];
        let mut counts = vec![0usize; self.num_classes];
        let mut all_sums = vec![0.0; self.num_classes * d];
        let mut all_counts = vec![0usize; self.num_classes];
        for ((e, &y), &m) in embeddings.iter().zip(labels).zip(members) {
            if e.len() != d {
                return Err(Error::Shape {
                    context: "embedding",
                    expected: d,
                    got: e.len(),
                });
            }
            for (s, v) in all_sums[y * d..(y + 1) * d].iter_mut().zip(e) {
                *s += v;
            }
            all_counts[y] += 1;
            if m {
                for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(e) {
                    *s += v;
                }
                counts[y] += 1;
            }
        }
        for k in 0..self.num_classes {
            let (src, n) = if counts[k] > 0 {
                (&sums, counts[k])
            } else {
                (&all_sums, all_counts[k])
            };
            for j in 0..d {
                self.prototypes[k * d + j] = if n > 0 { src[k * d + j] / n as f64 } else { 0.0 };
            }
        }
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda_neg(&self) -> f64 {
        self.lambda_neg
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [f64] {
        &mut self.prototypes
    }

    /// Inner products `v′ · c_k` for every class.
    pub fn similarities(&self, embedding: &[f64]) -> Vec<f64> {
        self.prototypes
            .chunks_exact(self.dim)
            .map(|c| dot(embedding, c))
            .collect()
    }

    /// Applies one momentum step to the prototypes.
    pub fn apply_gradient(&mut self, grad: &[f64], cfg: &SgdConfig, lr: f64) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("prototype gradient entry {i}")));
        }
        if self.velocity.len() != self.prototypes.len() {
            self.velocity = vec![0.0; self.prototypes.len()];
        }
        momentum_update(&mut self.prototypes, &mut self.velocity, grad, cfg, lr);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&BankFile {
            format: BANK_FORMAT.into(),
            version: 1,
            bank: self.clone(),
        })
        .expect("bank serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file: BankFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if file.format != BANK_FORMAT || file.version != 1 {
            return Err(bad("unsupported bank format".into()));
        }
        let mut bank = file.bank;
        if bank.prototypes.len() != bank.num_classes * bank.dim {
            return Err(bad("prototype matrix shape mismatch".into()));
        }
        bank.velocity = vec![0.0; bank.prototypes.len()];
        Ok(bank)
    }
}

const BANK_FORMAT: &str = "protoclean-prototypes";

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    bank: PrototypeBank,
}

/// `sigmoid(v′ · c_label)`.
pub fn clean_score(embedding: &[f64], bank: &PrototypeBank, label: usize) -> Result<f64> {
    if label >= bank.num_classes {
        return Err(Error::param(
            "label",
            format!("{label} outside [0, {})", bank.num_classes),
        ));
    }
    if embedding.len() != bank.dim {
        return Err(Error::Shape {
            context: "embedding",
            expected: bank.dim,
            got: embedding.len(),
        });
    }
    Ok(sigmoid(dot(embedding, bank.prototype(label))))
}

/// A sample as seen by the cleaner losses.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub embedding: &'a [f64],
    pub label: usize,
}

/// A loss value with gradients for the prototypes (`K×d`, row-major) and
/// for each member's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcLoss {
    pub value: f64,
    pub grad_prototypes: Vec<f64>,
    pub grad_embeddings: Vec<Vec<f64>>,
}

impl CpcLoss {
    fn zero(bank: &PrototypeBank, n: usize) -> Self {
        Self {
            value: 0.0,
            grad_prototypes: vec![0.0; bank.prototypes.len()],
            grad_embeddings: vec![vec![0.0; bank.dim]; n],
        }
    }

    /// Adds `weight · ds` to the gradients of member `i` and prototype `k`.
    fn push_similarity_grad(&mut self, bank: &PrototypeBank, i: usize, e: &[f64], k: usize, ds: f64) {
        let d = bank.dim;
        let c = bank.prototype(k);
        for (g, cv) in self.grad_embeddings[i].iter_mut().zip(c) {
            *g += ds * cv;
        }
        for (g, ev) in self.grad_prototypes[k * d..(k + 1) * d].iter_mut().zip(e) {
            *g += ds * ev;
        }
    }
}

fn check_members(bank: &PrototypeBank, members: &[Member<'_>]) -> Result<()> {
    for m in members {
        if m.label >= bank.num_classes {
            return Err(Error::param("label", format!("{} outside [0, {})", m.label, bank.num_classes)));
        }
        if m.embedding.len() != bank.dim {
            return Err(Error::Shape {
                context: "embedding",
                expected: bank.dim,
                got: m.embedding.len(),
            });
        }
    }
    Ok(())
}

/// Clean-set loss: mean of `−[ln σ(v′c_y) + (1/K) Σ_{k≠y} ln(1−σ(v′c_k))]`.
/// An empty set contributes zero.
pub fn loss_clean_set(members: &[Member<'_>], bank: &PrototypeBank) -> Result<CpcLoss> {
    check_members(bank, members)?;
    let mut out = CpcLoss::zero(bank, members.len());
    if members.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / members.len() as f64;
    for (i, m) in members.iter().enumerate() {
        for (k, s) in bank.similarities(m.embedding).into_iter().enumerate() {
            let (loss, ds) = if k == m.label {
                (neg_log_sigmoid(s), sigmoid(s) - 1.0)
            } else {
                (
                    bank.lambda_neg * neg_log_one_minus_sigmoid(s),
                    bank.lambda_neg * sigmoid(s),
                )
            };
            out.value += scale * loss;
            out.push_similarity_grad(bank, i, m.embedding, k, scale * ds);
        }
    }
    Ok(out)
}

/// Noise-set loss: mean of `−ln(1−σ(v′c_y))` with `y` the observed label.
pub fn loss_noise_set(members: &[Member<'_>], bank: &PrototypeBank) -> Result<CpcLoss> {
    check_members(bank, members)?;
    let mut out = CpcLoss::zero(bank, members.len());
    if members.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / members.len() as f64;
    for (i, m) in members.iter().enumerate() {
        let s = dot(m.embedding, bank.prototype(m.label));
        out.value += scale * neg_log_one_minus_sigmoid(s);
        out.push_similarity_grad(bank, i, m.embedding, m.label, scale * sigmoid(s));
    }
    Ok(out)
}

/// Confident-set loss: mean of `−ln σ(v′c_k)` with `k` the pseudo-label,
/// passed in `Member::label`.
pub fn loss_confident_set(members: &[Member<'_>], bank: &PrototypeBank) -> Result<CpcLoss> {
    check_members(bank, members)?;
    let mut out = CpcLoss::zero(bank, members.len());
    if members.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / members.len() as f64;
    for (i, m) in members.iter().enumerate() {
        let s = dot(m.embedding, bank.prototype(m.label));
        out.value += scale * neg_log_sigmoid(s);
        out.push_similarity_grad(bank, i, m.embedding, m.label, scale * (sigmoid(s) - 1.0));
    }
    Ok(out)
}

/// Noise-set samples admitted with a pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidentSet {
    /// `(sample index, pseudo-label)`.
    pub members: Vec<(usize, usize)>,
    /// Per-class admission threshold. A class without clean members uses the
    /// mean over the whole clean set; `+∞` when the clean set is empty.
    pub thresholds: Vec<f64>,
}

/// A noise sample joins when its top predicted probability exceeds the mean
/// confidence for that class over clean-set samples labeled with it.
pub fn select_confident(
    noise: &[usize],
    clean: &[usize],
    labels: &[usize],
    predictions: &[Vec<f64>],
    num_classes: usize,
) -> ConfidentSet {
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for &i in clean {
        let y = labels[i];
        sums[y] += predictions[i][y];
        counts[y] += 1;
    }
    let total: usize = counts.iter().sum();
    let overall = if total == 0 {
        f64::INFINITY
    } else {
        sums.iter().sum::<f64>() / total as f64
    };
    let thresholds: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { overall } else { s / c as f64 })
        .collect();
    let members = noise
        .iter()
        .filter_map(|&i| {
            let p = &predictions[i];
            let k = argmax(p);
            (p[k] > thresholds[k]).then_some((i, k))
        })
        .collect();
    ConfidentSet {
        members,
        thresholds,
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// How one sample enters the cleaner objective in an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Role {
    pub clean: bool,
    pub noise: bool,
    pub pseudo_label: Option<usize>,
}

/// Per-sample roles from a partition and confident set. With `alpha == 0`
/// the confident set is dropped entirely; with `exclude_confident` admitted
/// samples leave the noise term.
pub fn assign_roles(
    n: usize,
    partition: &Partition,
    confident: &ConfidentSet,
    alpha: f64,
    exclude_confident: bool,
) -> Vec<Role> {
    let mut roles = vec![Role::default(); n];
    for &(i, _) in partition.clean() {
        roles[i].clean = true;
    }
    for &i in partition.noise() {
        roles[i].noise = true;
    }
    if alpha != 0.0 {
        for &(i, k) in &confident.members {
            roles[i].pseudo_label = Some(k);
            if exclude_confident {
                roles[i].noise = false;
            }
        }
    }
    roles
}

/// Decomposed cleaner objective `L = L_clean + L_noise + α·L_conf`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcObjective {
    pub clean: f64,
    pub noise: f64,
    pub confident: f64,
    pub total: f64,
    pub grad_prototypes: Vec<f64>,
    pub grad_embeddings: Vec<Vec<f64>>,
}

/// Evaluates the full objective on a set of samples with their roles.
pub fn cpc_objective(
    embeddings: &[&[f64]],
    labels: &[usize],
    roles: &[Role],
    bank: &PrototypeBank,
) -> Result<CpcObjective> {
    let n = embeddings.len();
    let mut idx_c = Vec::new();
    let mut idx_n = Vec::new();
    let mut idx_p = Vec::new();
    let mut mem_c = Vec::new();
    let mut mem_n = Vec::new();
    let mut mem_p = Vec::new();
    for i in 0..n {
        let r = roles[i];
        if r.clean {
            idx_c.push(i);
            mem_c.push(Member { embedding: embeddings[i], label: labels[i] });
        }
        if r.noise {
            idx_n.push(i);
            mem_n.push(Member { embedding: embeddings[i], label: labels[i] });
        }
        if let Some(k) = r.pseudo_label {
            idx_p.push(i);
            mem_p.push(Member { embedding: embeddings[i], label: k });
        }
    }
    let lc = loss_clean_set(&mem_c, bank)?;
    let ln = loss_noise_set(&mem_n, bank)?;
    let lp = loss_confident_set(&mem_p, bank)?;
    let alpha = bank.alpha;
    let mut grad_prototypes = lc.grad_prototypes.clone();
    for ((g, a), b) in grad_prototypes.iter_mut().zip(&ln.grad_prototypes).zip(&lp.grad_prototypes) {
        *g += a + alpha * b;
    }
    let mut grad_embeddings = vec![vec![0.0; bank.dim]; n];
    let scatter = |dst: &mut Vec<Vec<f64>>, idx: &[usize], src: &[Vec<f64>], w: f64| {
        for (&i, g) in idx.iter().zip(src) {
            for (d, v) in dst[i].iter_mut().zip(g) {
                *d += w * v;
            }
        }
    };
    scatter(&mut grad_embeddings, &idx_c, &lc.grad_embeddings, 1.0);
    scatter(&mut grad_embeddings, &idx_n, &ln.grad_embeddings, 1.0);
    if alpha != 0.0 {
        scatter(&mut grad_embeddings, &idx_p, &lp.grad_embeddings, alpha);
    }
    let total = lc.value + ln.value + alpha * lp.value;
    if !total.is_finite() {
        return Err(Error::NonFinite("cleaner objective".into()));
    }
    Ok(CpcObjective {
        clean: lc.value,
        noise: ln.value,
        confident: lp.value,
        total,
        grad_prototypes,
        grad_embeddings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CpcUpdateReport {
    pub clean: f64,
    pub noise: f64,
    pub confident: f64,
    pub total: f64,
    pub batches: usize,
}

/// One pass of mini-batch SGD over all samples with a role, updating the
/// prototypes and the projector. The backbone and classifier are not touched.
#[allow(clippy::too_many_arguments)]
pub fn update(
    bank: &mut PrototypeBank,
    net: &mut Network,
    projector_opt: &mut Sgd,
    inputs: &[&[f64]],
    labels: &[usize],
    roles: &[Role],
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<CpcUpdateReport> {
    let mut order: Vec<usize> = (0..inputs.len())
        .filter(|&i| {
            let r = roles[i];
            r.clean || r.noise || r.pseudo_label.is_some()
        })
        .collect();
    order.shuffle(rng);
    let mut report = CpcUpdateReport::default();
    let cfg = projector_opt.config;
    for chunk in order.chunks(batch_size.max(1)) {
        let outs = chunk
            .iter()
            .map(|&i| net.forward(inputs[i]))
            .collect::<Result<Vec<_>>>()?;
        let embeddings: Vec<&[f64]> = outs.iter().map(|o| o.embedding.as_slice()).collect();
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let batch_roles: Vec<Role> = chunk.iter().map(|&i| roles[i]).collect();
        let obj = cpc_objective(&embeddings, &batch_labels, &batch_roles, bank)?;
        let mut grads = net.zero_grads();
        for (out, g) in outs.iter().zip(&obj.grad_embeddings) {
            net.backward_into(
                out,
                Upstream {
                    d_logits: None,
                    d_embedding: Some(g),
                },
                true,
                &mut grads,
            )?;
        }
        projector_opt.step_with_lr(net, &grads, ParamGroups::PROJECTOR, lr)?;
        bank.apply_gradient(&obj.grad_prototypes, &cfg, lr)?;
        report.clean += obj.clean;
        report.noise += obj.noise;
        report.confident += obj.confident;
        report.total += obj.total;
        report.batches += 1;
    }
    if report.batches > 0 {
        let b = report.batches as f64;
        report.clean /= b;
        report.noise /= b;
        report.confident /= b;
        report.total /= b;
    }
    Ok(report)
}

/// Scores every sample against the prototype of its observed label.
pub fn cpc_scores(
    bank: &PrototypeBank,
    embeddings: &[Vec<f64>],
    labels: &[usize],
) -> Result<CleanerScores> {
    let q_clean = embeddings
        .iter()
        .zip(labels)
        .map(|(e, &y)| clean_score(e, bank, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(CleanerScores {
        q_clean,
        source: CleanerSource::Cpc,
    })
}

/// Partition by `sigmoid(v′ · c_y) > tau`.
pub fn partition_cpc(
    bank: &PrototypeBank,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> Result<(CleanerScores, Partition)> {
    let scores = cpc_scores(bank, embeddings, labels)?;
    let partition = Partition::from_scores(&scores.q_clean, tau, CleanerSource::Cpc)?;
    Ok((scores, partition))
}

/// Self-labeling without a loss mixture: a sample counts as clean when the
/// most similar prototype is the one of its observed label.
pub fn self_label_mask(bank: &PrototypeBank, embeddings: &[Vec<f64>], labels: &[usize]) -> Vec<bool> {
    embeddings
        .iter()
        .zip(labels)
        .map(|(e, &y)| argmax(&bank.similarities(e)) == y)
        .collect()
}
