//! Stage-two training: labeled/unlabeled partitions, soft-target construction,
//! mixup into a vicinal batch, and the vicinal-risk gradient step.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::CleanerSource;
use crate::nnet::{softmax_backward, soft_ce, Gradients, Network, ParamGroups, Sgd, Upstream};
use crate::rng::Rng;

/// Clean/noise split of a training set. Clean members carry a weight in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    clean: Vec<(usize, f64)>,
    noise: Vec<usize>,
    source: CleanerSource,
    /// Index of the network whose outputs produced the scores, if any.
    scored_by: Option<usize>,
}

impl Partition {
    /// `q > tau` goes to the clean set with weight `q`; the rest is noise.
    pub fn from_scores(q_clean: &[f64], tau: f64, source: CleanerSource) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::param("tau", format!("{tau} outside (0, 1)")));
        }
        let mut clean = Vec::new();
        let mut noise = Vec::new();
        for (i, &q) in q_clean.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::param("q_clean", format!("score {q} at {i} outside [0, 1]")));
            }
            if q > tau {
                clean.push((i, q));
            } else {
                noise.push(i);
            }
        }
        Ok(Self {
            clean,
            noise,
            source,
            scored_by: None,
        })
    }

    pub fn scored_by_network(mut self, net: usize) -> Self {
        self.scored_by = Some(net);
        self
    }

    pub fn clean(&self) -> &[(usize, f64)] {
        &self.clean
    }

    pub fn noise(&self) -> &[usize] {
        &self.noise
    }

    pub fn source(&self) -> CleanerSource {
        self.source
    }

    pub fn scored_by(&self) -> Option<usize> {
        self.scored_by
    }

    pub fn len(&self) -> usize {
        self.clean.len() + self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Membership mask, `true` for clean.
    pub fn clean_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &(i, _) in &self.clean {
            mask[i] = true;
        }
        mask
    }

    /// Checks disjointness, coverage of `0..n` and weight range.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::Shape {
                context: "partition size",
                expected: n,
                got: self.len(),
            });
        }
        let mut seen = vec![false; n];
        let all = self.clean.iter().map(|&(i, _)| i).chain(self.noise.iter().copied());
        for i in all {
            if i >= n || seen[i] {
                return Err(Error::param("partition", format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if let Some(&(i, w)) = self.clean.iter().find(|&&(_, w)| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::param("partition", format!("weight {w} of sample {i} outside (0, 1]")));
        }
        Ok(())
    }
}

/// `p_k^{1/T} / Σ_j p_j^{1/T}`.
pub fn sharpen(p: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    // Work in log space so small temperatures do not underflow.
    let logs: Vec<f64> = p.iter().map(|v| v.ln() / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / p.len() as f64; p.len()];
    }
    let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn mean_probs(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Co-refined target for a clean sample: `w·onehot(y) + (1−w)·p_avg`, sharpened.
pub fn refine_label(label: usize, weight: f64, p_avg: &[f64], temperature: f64) -> Vec<f64> {
    let mixed: Vec<f64> = p_avg
        .iter()
        .enumerate()
        .map(|(k, p)| (1.0 - weight) * p + if k == label { weight } else { 0.0 })
        .collect();
    sharpen(&mixed, temperature)
}

/// Guessed target for an unlabeled sample from both networks' predictions.
pub fn guess_label(p_a: &[f64], p_b: &[f64], temperature: f64) -> Vec<f64> {
    sharpen(&mean_probs(p_a, p_b), temperature)
}

/// Draws `λ ~ Beta(a, a)`, optionally folded to `max(λ, 1−λ)`.
pub fn sample_mix_lambda(a: f64, fold: bool, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(a, a).map_err(|e| Error::param("mix_alpha", e.to_string()))?;
    let l: f64 = beta.sample(rng);
    Ok(if fold { l.max(1.0 - l) } else { l })
}

/// Convex combination of two (input, target) pairs.
pub fn mixup_pair(
    x_i: &[f64],
    y_i: &[f64],
    x_j: &[f64],
    y_j: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
            .collect::<Vec<_>>()
    };
    (mix(x_i, x_j), mix(y_i, y_j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VicinalBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// `true` for members of X′ (mixed from a clean anchor).
    pub labeled: Vec<bool>,
    pub lambdas: Vec<f64>,
}

impl VicinalBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    /// Beta(a, a) shape.
    pub mix_alpha: f64,
    pub temperature: f64,
    /// Fold λ to max(λ, 1−λ) so the anchor dominates.
    pub fold_lambda: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            mix_alpha: 4.0,
            temperature: 0.5,
            fold_lambda: true,
        }
    }
}

/// Mixes anchors (labeled first, then unlabeled) with partners drawn from a
/// shuffled copy of the concatenated set. Anchor order is preserved.
pub fn build_vicinal_batch(
    labeled: &[(Vec<f64>, Vec<f64>)],
    unlabeled: &[(Vec<f64>, Vec<f64>)],
    cfg: &MixConfig,
    rng: &mut Rng,
) -> Result<VicinalBatch> {
    let all: Vec<&(Vec<f64>, Vec<f64>)> = labeled.iter().chain(unlabeled).collect();
    let mut partners: Vec<usize> = (0..all.len()).collect();
    partners.shuffle(rng);
    let mut batch = VicinalBatch {
        inputs: Vec::with_capacity(all.len()),
        targets: Vec::with_capacity(all.len()),
        labeled: Vec::with_capacity(all.len()),
        lambdas: Vec::with_capacity(all.len()),
    };
    for (a, &j) in partners.iter().enumerate() {
        let lambda = sample_mix_lambda(cfg.mix_alpha, cfg.fold_lambda, rng)?;
        let (xi, yi) = all[a];
        let (xj, yj) = all[j];
        let (x, y) = mixup_pair(xi, yi, xj, yj, lambda);
        batch.inputs.push(x);
        batch.targets.push(y);
        batch.labeled.push(a < labeled.len());
        batch.lambdas.push(lambda);
    }
    Ok(batch)
}

/// Soft targets for a mini-batch: refined labels for the clean part and
/// guessed labels for the noisy part. `own` is the network being trained.
pub fn make_targets(
    own: &Network,
    other: &Network,
    clean: &[(&[f64], usize, f64)],
    noisy: &[&[f64]],
    temperature: f64,
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut labeled = Vec::with_capacity(clean.len());
    for &(x, y, w) in clean {
        let p = mean_probs(&own.predict(x)?, &other.predict(x)?);
        labeled.push((x.to_vec(), refine_label(y, w, &p, temperature)));
    }
    let mut unlabeled = Vec::with_capacity(noisy.len());
    for &x in noisy {
        let t = guess_label(&own.predict(x)?, &other.predict(x)?, temperature);
        unlabeled.push((x.to_vec(), t));
    }
    Ok((labeled, unlabeled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvrBreakdown {
    /// Mean soft cross-entropy over X′.
    pub labeled: f64,
    /// Mean squared error over U′ (averaged over samples and classes).
    pub unlabeled: f64,
    pub lambda_u: f64,
    /// `KL(uniform ‖ mean prediction)` over the whole mixed batch.
    #[serde(default)]
    pub prior: f64,
    #[serde(default)]
    pub lambda_r: f64,
    pub total: f64,
}

/// Vicinal risk `L_X′ + λ_u·L_U′ + λ_r·KL(π ‖ p̄)` and its gradient with
/// respect to backbone and classifier. `π` is uniform and `p̄` the mean
/// prediction over the batch; the last term keeps every class predicted.
pub fn evr_loss_and_grads(
    net: &Network,
    batch: &VicinalBatch,
    lambda_u: f64,
    lambda_r: f64,
) -> Result<(EvrBreakdown, Gradients)> {
    if !(lambda_u >= 0.0) {
        return Err(Error::param("lambda_u", "must be nonnegative"));
    }
    if !(lambda_r >= 0.0) {
        return Err(Error::param("lambda_r", "must be nonnegative"));
    }
    let n_x = batch.labeled.iter().filter(|&&l| l).count();
    let n_u = batch.len() - n_x;
    if n_x == 0 {
        return Err(Error::Empty("vicinal labeled set"));
    }
    let classes = net.arch().num_classes;
    let k = classes as f64;
    let n = batch.len() as f64;
    let outs = batch
        .inputs
        .iter()
        .map(|x| net.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let mut p_bar = vec![0.0; classes];
    for o in &outs {
        for (m, p) in p_bar.iter_mut().zip(&o.probs) {
            *m += p / n;
        }
    }
    let prior: f64 = p_bar.iter().map(|m| -(k * m).ln() / k).sum();
    let mut grads = net.zero_grads();
    let (mut l_x, mut l_u) = (0.0, 0.0);
    for ((out, t), &is_labeled) in outs.iter().zip(&batch.targets).zip(&batch.labeled) {
        let mut d_logits: Vec<f64> = if is_labeled {
            l_x += soft_ce(&out.log_probs, t) / n_x as f64;
            out.probs
                .iter()
                .zip(t)
                .map(|(p, y)| (p - y) / n_x as f64)
                .collect()
        } else {
            let sq: f64 = out.probs.iter().zip(t).map(|(p, y)| (p - y).powi(2)).sum();
            l_u += sq / (n_u as f64 * k);
            let d_probs: Vec<f64> = out
                .probs
                .iter()
                .zip(t)
                .map(|(p, y)| lambda_u * 2.0 * (p - y) / (n_u as f64 * k))
                .collect();
            softmax_backward(&out.probs, &d_probs)
        };
        if lambda_r != 0.0 {
            // ∂/∂p_c of Σ π log(π/p̄) is −π_c / (n p̄_c).
            let d_probs: Vec<f64> = p_bar.iter().map(|m| -lambda_r / (k * n * m)).collect();
            for (d, g) in d_logits.iter_mut().zip(softmax_backward(&out.probs, &d_probs)) {
                *d += g;
            }
        }
        if d_logits.iter().all(|d| *d == 0.0) {
            continue;
        }
        net.backward_into(
            out,
            Upstream {
                d_logits: Some(&d_logits),
                d_embedding: None,
            },
            true,
            &mut grads,
        )?;
    }
    let breakdown = EvrBreakdown {
        labeled: l_x,
        unlabeled: l_u,
        lambda_u,
        prior,
        lambda_r,
        total: l_x + lambda_u * l_u + lambda_r * prior,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("vicinal risk".into()));
    }
    Ok((breakdown, grads))
}

/// One SGD step on the vicinal risk. The projector is left untouched.
pub fn evr_step(
    net: &mut Network,
    opt: &mut Sgd,
    batch: &VicinalBatch,
    lambda_u: f64,
    lambda_r: f64,
    lr: f64,
) -> Result<EvrBreakdown> {
    let (breakdown, grads) = evr_loss_and_grads(net, batch, lambda_u, lambda_r)?;
    opt.step_with_lr(net, &grads, ParamGroups::CLASSIFIER_PATH, lr)?;
    Ok(breakdown)
}
