//! Two-component 1-D Gaussian mixtures over per-sample losses. The component
//! with the smaller mean models clean samples; its posterior is the clean
//! probability of a sample.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::semisup::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub mu0: f64,
    pub sigma0: f64,
    pub phi0: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub phi1: f64,
    /// The components could not be told apart (all inputs coincided, one
    /// component emptied, or the means ended closer than the sigma floor);
    /// the fit carries no clean/noise information.
    pub degenerate: bool,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl GmmFit {
    fn single_point(value: f64, floor: f64, n: usize) -> Self {
        Self {
            mu0: value,
            sigma0: floor,
            phi0: 1.0,
            mu1: value,
            sigma1: floor,
            phi1: 0.0,
            degenerate: true,
            log_likelihood: n as f64 * log_normal_pdf(value, value, floor),
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Convergence threshold on the change of the mean log-likelihood.
    pub tol: f64,
    pub sigma_floor: f64,
    /// Min-max normalize losses to [0, 1] before fitting (cleaner level).
    pub normalize: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            sigma_floor: 1e-4,
            normalize: true,
        }
    }
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Weighted mean and floored standard deviation.
fn moments(values: impl Iterator<Item = (f64, f64)> + Clone, floor: f64) -> (f64, f64, f64) {
    let mass: f64 = values.clone().map(|(_, w)| w).sum();
    let mean = values.clone().map(|(x, w)| w * x).sum::<f64>() / mass;
    let var = values.map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / mass;
    (mass, mean, var.sqrt().max(floor))
}

/// Fits a two-component mixture by EM, initialized by splitting the sorted
/// losses at the median. The seed only breaks ties in that sort.
pub fn fit_gmm_1d(losses: &[f64], opts: &GmmOptions, seed: u64) -> Result<GmmFit> {
    let n = losses.len();
    if n < 4 {
        return Err(Error::param("losses", format!("need at least 4 values, got {n}")));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss {i}")));
    }
    if losses.iter().any(|&l| l < 0.0) {
        return Err(Error::param("losses", "must be nonnegative"));
    }
    if !(opts.sigma_floor > 0.0) {
        return Err(Error::param("sigma_floor", "must be positive"));
    }
    let floor = opts.sigma_floor;
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Ok(GmmFit::single_point(losses[0], floor, n));
    }

    let mut rng = rng::seeded(seed, stream::GMM);
    let mut order: Vec<(f64, u64, usize)> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, rng.random::<u64>(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = n / 2;
    let side = |range: std::ops::Range<usize>| {
        let vals = order[range].iter().map(|&(l, _, _)| (l, 1.0));
        moments(vals, floor)
    };
    let (m0, mut mu0, mut s0) = side(0..half);
    let (m1, mut mu1, mut s1) = side(half..n);
    let mut phi0 = m0 / n as f64;
    let mut phi1 = m1 / n as f64;

    let mut resp = vec![0.0; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    let mut iterations = 0;
    let mut collapsed = false;
    for it in 0..opts.max_iter.max(1) {
        iterations = it + 1;
        // E-step
        ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(losses) {
            let a0 = phi0.ln() + log_normal_pdf(x, mu0, s0);
            let a1 = phi1.ln() + log_normal_pdf(x, mu1, s1);
            let total = log_add_exp(a0, a1);
            *r = (a0 - total).exp();
            ll += total;
        }
        debug_assert!(
            ll >= prev_ll - 1e-9 * ll.abs().max(1.0),
            "EM log-likelihood decreased: {prev_ll} -> {ll}"
        );
        if (ll - prev_ll).abs() / n as f64 <= opts.tol {
            break;
        }
        prev_ll = ll;

        // M-step
        let w0 = losses.iter().zip(&resp).map(|(&x, &r)| (x, r));
        let w1 = losses.iter().zip(&resp).map(|(&x, &r)| (x, 1.0 - r));
        let mass0: f64 = resp.iter().sum();
        let mass1 = n as f64 - mass0;
        if mass0 < 1e-9 || mass1 < 1e-9 {
            collapsed = true;
            break;
        }
        let (_, a_mu, a_s) = moments(w0, floor);
        let (_, b_mu, b_s) = moments(w1, floor);
        mu0 = a_mu;
        s0 = a_s;
        mu1 = b_mu;
        s1 = b_s;
        phi0 = mass0 / n as f64;
        phi1 = 1.0 - phi0;
    }

    if mu0 > mu1 {
        std::mem::swap(&mut mu0, &mut mu1);
        std::mem::swap(&mut s0, &mut s1);
        std::mem::swap(&mut phi0, &mut phi1);
    }
    if collapsed || mu1 - mu0 < floor {
        let mean = losses.iter().sum::<f64>() / n as f64;
        let mut fit = GmmFit::single_point(mean, floor, n);
        fit.iterations = iterations;
        return Ok(fit);
    }
    Ok(GmmFit {
        mu0,
        sigma0: s0,
        phi0,
        mu1,
        sigma1: s1,
        phi1,
        degenerate: false,
        log_likelihood: ll,
        iterations,
    })
}

/// Posterior probability that `loss` came from the small-mean component.
pub fn posterior_clean(fit: &GmmFit, loss: f64) -> Result<f64> {
    if fit.degenerate {
        return Err(Error::DegenerateFit);
    }
    let a0 = fit.phi0.ln() + log_normal_pdf(loss, fit.mu0, fit.sigma0);
    let a1 = fit.phi1.ln() + log_normal_pdf(loss, fit.mu1, fit.sigma1);
    let p = 1.0 / (1.0 + (a1 - a0).exp());
    Ok(p.clamp(0.0, 1.0))
}

/// One mixture per class, falling back to the global fit where a class is
/// too small or its fit degenerates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAwareFit {
    pub global: GmmFit,
    pub per_class: Vec<GmmFit>,
    pub fallback: Vec<bool>,
    pub warnings: Vec<String>,
}

pub fn fit_class_aware(
    losses: &[f64],
    labels: &[usize],
    num_classes: usize,
    opts: &GmmOptions,
    seed: u64,
) -> Result<ClassAwareFit> {
    if losses.len() != labels.len() {
        return Err(Error::Shape {
            context: "class-aware labels",
            expected: losses.len(),
            got: labels.len(),
        });
    }
    let global = fit_gmm_1d(losses, opts, seed)?;
    let mut per_class = Vec::with_capacity(num_classes);
    let mut fallback = Vec::with_capacity(num_classes);
    let mut warnings = Vec::new();
    let mut buckets = vec![Vec::new(); num_classes];
    for (&l, &y) in losses.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::param("labels", format!("label {y} outside [0, {num_classes})")));
        }
        buckets[y].push(l);
    }
    for (k, bucket) in buckets.iter().enumerate() {
        if bucket.len() < 4 {
            warnings.push(format!(
                "class {k}: {} samples, using global fit",
                bucket.len()
            ));
            per_class.push(global);
            fallback.push(true);
            continue;
        }
        let fit = fit_gmm_1d(bucket, opts, seed)?;
        if fit.degenerate {
            warnings.push(format!("class {k}: degenerate fit, using global fit"));
            per_class.push(global);
            fallback.push(true);
        } else {
            per_class.push(fit);
            fallback.push(false);
        }
    }
    Ok(ClassAwareFit {
        global,
        per_class,
        fallback,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CleanerSource {
    #[serde(rename = "gmm_agn")]
    GmmAgnostic,
    #[serde(rename = "gmm_awr")]
    GmmAware,
    #[serde(rename = "cpc")]
    Cpc,
}

impl CleanerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CleanerSource::GmmAgnostic => "gmm_agn",
            CleanerSource::GmmAware => "gmm_awr",
            CleanerSource::Cpc => "cpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerScores {
    pub q_clean: Vec<f64>,
    pub source: CleanerSource,
}

/// Result of running a loss-mixture cleaner over a whole training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmCleaning {
    pub scores: CleanerScores,
    pub fits: ClassAwareFit,
}

/// Min-max scaling to [0, 1]; constant input maps to zeros.
pub fn normalize_losses(losses: &[f64]) -> Vec<f64> {
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; losses.len()];
    }
    losses.iter().map(|l| (l - lo) / span).collect()
}

/// Scores every sample with the class-agnostic or the class-aware mixture.
/// Returns `Err(DegenerateFit)` when the global fit carries no information.
pub fn gmm_clean_scores(
    losses: &[f64],
    labels: &[usize],
    num_classes: usize,
    class_aware: bool,
    opts: &GmmOptions,
    seed: u64,
) -> Result<GmmCleaning> {
    let owned;
    let values = if opts.normalize {
        owned = normalize_losses(losses);
        &owned
    } else {
        losses
    };
    let fits = if class_aware {
        fit_class_aware(values, labels, num_classes, opts, seed)?
    } else {
        let global = fit_gmm_1d(values, opts, seed)?;
        ClassAwareFit {
            global,
            per_class: Vec::new(),
            fallback: Vec::new(),
            warnings: Vec::new(),
        }
    };
    if fits.global.degenerate {
        return Err(Error::DegenerateFit);
    }
    let q_clean = values
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let fit = if class_aware { &fits.per_class[y] } else { &fits.global };
            posterior_clean(fit, l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GmmCleaning {
        scores: CleanerScores {
            q_clean,
            source: if class_aware {
                CleanerSource::GmmAware
            } else {
                CleanerSource::GmmAgnostic
            },
        },
        fits,
    })
}

/// Thresholds clean probabilities: `q > tau` is clean with weight `q`.
pub fn partition_from_scores(scores: &CleanerScores, tau: f64) -> Result<Partition> {
    Partition::from_scores(&scores.q_clean, tau, scores.source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn opts() -> GmmOptions {
        GmmOptions {
            normalize: false,
            ..GmmOptions::default()
        }
    }

    #[test]
    fn separated_pairs_reach_exact_fixpoint() {
        let fit = fit_gmm_1d(&[0.0, 10.0, 0.0, 10.0], &opts(), 3).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.mu0.abs() < 1e-12);
        assert!((fit.mu1 - 10.0).abs() < 1e-12);
        assert!((fit.phi0 - 0.5).abs() < 1e-12);
        assert_eq!(fit.sigma0, 1e-4);
    }

    #[test]
    fn identical_losses_are_degenerate() {
        let fit = fit_gmm_1d(&[0.7; 12], &opts(), 0).unwrap();
        assert!(fit.degenerate);
        assert!(matches!(posterior_clean(&fit, 0.7), Err(Error::DegenerateFit)));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_gmm_1d(&[1.0, 2.0, 3.0], &opts(), 0).is_err());
        assert!(fit_gmm_1d(&[1.0, 2.0, f64::NAN, 3.0], &opts(), 0).is_err());
        assert!(fit_gmm_1d(&[1.0, 2.0, -1.0, 3.0], &opts(), 0).is_err());
    }

    #[test]
    fn posterior_symmetry_and_separation() {
        let fit = GmmFit {
            mu0: 1.0,
            sigma0: 0.3,
            phi0: 0.5,
            mu1: 2.0,
            sigma1: 0.3,
            phi1: 0.5,
            degenerate: false,
            log_likelihood: 0.0,
            iterations: 0,
        };
        assert!((posterior_clean(&fit, 1.5).unwrap() - 0.5).abs() < 1e-9);
        let far = GmmFit { mu1: 20.0, ..fit };
        assert!(posterior_clean(&far, 1.0).unwrap() > 0.99);
    }

    #[test]
    fn posterior_is_monotone_for_equal_sigmas() {
        let fit = fit_gmm_1d(&[0.1, 0.2, 0.15, 0.9, 1.1, 1.0, 0.12, 0.95], &opts(), 1).unwrap();
        let equal = GmmFit {
            sigma1: fit.sigma0,
            ..fit
        };
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.01).collect();
        let post: Vec<f64> = grid.iter().map(|&l| posterior_clean(&equal, l).unwrap()).collect();
        assert!(post.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        // Debug builds assert monotonicity inside EM; this also checks that a
        // longer run ends at a likelihood no worse than a short one.
        let mut rng = rng::seeded(4, 0);
        let a = Normal::<f64>::new(0.3, 0.1).unwrap();
        let b = Normal::<f64>::new(1.5, 0.4).unwrap();
        let xs: Vec<f64> = (0..500)
            .map(|i| if i % 3 == 0 { b.sample(&mut rng) } else { a.sample(&mut rng) }.abs())
            .collect();
        let mut prev = f64::NEG_INFINITY;
        for max_iter in 1..30 {
            let fit = fit_gmm_1d(
                &xs,
                &GmmOptions {
                    max_iter,
                    tol: 0.0,
                    ..opts()
                },
                0,
            )
            .unwrap();
            assert!(fit.log_likelihood >= prev - 1e-9);
            assert!(fit.mu0 < fit.mu1);
            prev = fit.log_likelihood;
        }
    }

    #[test]
    fn class_aware_single_class_equals_global() {
        let xs = [0.1, 0.3, 0.2, 2.0, 2.2, 1.9, 0.25, 2.1];
        let ca = fit_class_aware(&xs, &[0; 8], 1, &opts(), 5).unwrap();
        let g = fit_gmm_1d(&xs, &opts(), 5).unwrap();
        assert_eq!(ca.per_class[0], g);
        assert_eq!(ca.global, g);
    }

    #[test]
    fn tiny_class_falls_back_to_global() {
        let xs = [0.1, 0.3, 0.2, 2.0, 2.2, 1.9, 0.25, 2.1];
        let labels = [0, 0, 0, 0, 0, 0, 1, 1];
        let ca = fit_class_aware(&xs, &labels, 2, &opts(), 5).unwrap();
        assert!(ca.fallback[1]);
        assert_eq!(ca.per_class[1], ca.global);
        assert_eq!(ca.warnings.len(), 1);
    }

    #[test]
    fn partition_thresholds() {
        let s = CleanerScores {
            q_clean: vec![0.9, 0.4],
            source: CleanerSource::GmmAgnostic,
        };
        let p = partition_from_scores(&s, 0.5).unwrap();
        assert_eq!(p.clean(), &[(0, 0.9)]);
        assert_eq!(p.noise(), &[1]);
        let all = CleanerScores {
            q_clean: vec![1.0; 3],
            source: CleanerSource::GmmAgnostic,
        };
        let p = partition_from_scores(&all, 0.5).unwrap();
        assert_eq!(p.clean().len(), 3);
        assert!(p.clean().iter().all(|&(_, w)| w == 1.0));
        assert!(partition_from_scores(&s, 1.0).is_err());
    }

    #[test]
    fn normalization_maps_to_unit_interval() {
        let n = normalize_losses(&[2.0, 4.0, 3.0]);
        assert_eq!(n, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_losses(&[1.0, 1.0]), vec![0.0, 0.0]);
    }
}
