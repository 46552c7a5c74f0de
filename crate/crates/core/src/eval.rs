//! Measurements: cleaner AUC, two-sample KS tests of per-class loss
//! heterogeneity, agreement between two cleaners, and test accuracy.

use serde::{Deserialize, Serialize};

use crate::datagen::CleanDataset;
use crate::error::{Error, Result};
use crate::nnet::Network;

/// Probability that a clean sample outscores a noisy one, ties counting
/// one half. Computed by sorting; the pair count is kept in integers so the
/// result is exact.
pub fn auc(scores: &[f64], is_clean: &[bool]) -> Result<f64> {
    if scores.len() != is_clean.len() {
        return Err(Error::Shape {
            context: "auc labels",
            expected: scores.len(),
            got: is_clean.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let n_pos = is_clean.iter().filter(|&&c| c).count() as u64;
    let n_neg = is_clean.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U statistic of the clean group
    let mut doubled_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&g| is_clean[g]).count() as u64;
        let neg = group.len() as u64 - pos;
        doubled_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2 j² λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed series converges fast for small λ.
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut cdf = 0.0;
        let mut k = 1;
        loop {
            let term = y.powi(k * k);
            cdf += term;
            if term < 1e-17 {
                break;
            }
            k += 2;
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test. The p-value uses the asymptotic
/// distribution at `(√nₑ + 0.12 + 0.11/√nₑ)·D` with `nₑ = nm/(n+m)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("ks_two_sample"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ks_two_sample input".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = a[i].min(b[j]);
        while i < n && a[i] <= t {
            i += 1;
        }
        while j < m && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    let p_value = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
    })
}

/// Per-class KS tests of class-vs-global loss distributions, separately
/// for the clean and the noisy subpopulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub clean: Vec<Option<KsResult>>,
    pub noise: Vec<Option<KsResult>>,
    /// Fraction of tested classes with p < 0.05.
    pub clean_significant_fraction: f64,
    pub noise_significant_fraction: f64,
}

/// Classes are grouped by observed label; a subpopulation with fewer than
/// two samples is skipped.
pub fn ks_heterogeneity(
    losses: &[f64],
    labels: &[usize],
    corrupted: &[bool],
    num_classes: usize,
) -> Result<KsReport> {
    let per_group = |want_corrupted: bool| -> Result<(Vec<Option<KsResult>>, f64)> {
        let global: Vec<f64> = losses
            .iter()
            .zip(corrupted)
            .filter(|(_, &c)| c == want_corrupted)
            .map(|(&l, _)| l)
            .collect();
        let mut results = Vec::with_capacity(num_classes);
        let (mut tested, mut significant) = (0usize, 0usize);
        for k in 0..num_classes {
            let class: Vec<f64> = losses
                .iter()
                .zip(labels)
                .zip(corrupted)
                .filter(|((_, &y), &c)| y == k && c == want_corrupted)
                .map(|((&l, _), _)| l)
                .collect();
            if class.len() < 2 || global.len() < 2 {
                results.push(None);
                continue;
            }
            let r = ks_two_sample(&class, &global)?;
            tested += 1;
            if r.p_value < 0.05 {
                significant += 1;
            }
            results.push(Some(r));
        }
        let frac = if tested == 0 { 0.0 } else { significant as f64 / tested as f64 };
        Ok((results, frac))
    };
    let (clean, clean_significant_fraction) = per_group(false)?;
    let (noise, noise_significant_fraction) = per_group(true)?;
    Ok(KsReport {
        clean,
        noise,
        clean_significant_fraction,
        noise_significant_fraction,
    })
}

pub const KLD_EPS: f64 = 1e-6;

/// Mean of `KL(Bern(q′ᵢ) ‖ Bern(qᵢ))` with both clamped to `[ε, 1−ε]`.
pub fn kld_bernoulli(q_prime: &[f64], q: &[f64]) -> Result<f64> {
    if q_prime.len() != q.len() {
        return Err(Error::Shape {
            context: "kld_bernoulli",
            expected: q_prime.len(),
            got: q.len(),
        });
    }
    if q.is_empty() {
        return Err(Error::Empty("kld_bernoulli"));
    }
    let clamp = |v: f64| v.clamp(KLD_EPS, 1.0 - KLD_EPS);
    let total: f64 = q_prime
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (clamp(a), clamp(b));
            a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
        })
        .sum();
    Ok((total / q.len() as f64).max(0.0))
}

/// Fraction of samples on which thresholding both score vectors at `tau`
/// gives the same clean/noise decision.
pub fn consistency_rate(q_prime: &[f64], q: &[f64], tau: f64) -> Result<f64> {
    if q_prime.len() != q.len() {
        return Err(Error::Shape {
            context: "consistency_rate",
            expected: q_prime.len(),
            got: q.len(),
        });
    }
    if q.is_empty() {
        return Err(Error::Empty("consistency_rate"));
    }
    let agree = q_prime
        .iter()
        .zip(q)
        .filter(|(&a, &b)| (a > tau) == (b > tau))
        .count();
    Ok(agree as f64 / q.len() as f64)
}

/// Ensemble prediction: mean softmax of the given networks.
pub fn ensemble_probs(networks: &[&Network], x: &[f64]) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for net in networks {
        let p = net.predict(x)?;
        match acc.as_mut() {
            Some(a) => a.iter_mut().zip(&p).for_each(|(s, v)| *s += v),
            None => acc = Some(p),
        }
    }
    let mut acc = acc.ok_or(Error::Empty("ensemble"))?;
    let n = networks.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Accuracy of the argmax of the averaged softmax against true labels.
pub fn test_accuracy(networks: &[&Network], test: &CleanDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let p = ensemble_probs(networks, test.feature(i))?;
        if crate::cpc::argmax(&p) == test.true_labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
