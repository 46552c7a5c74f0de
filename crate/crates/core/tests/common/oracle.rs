//! Slow, obviously correct reference computations.

use protoclean::gmm::GmmFit;
use protoclean::rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

/// Mann-Whitney by brute force: clean-over-noise pairs, ties counted half.
pub fn auc_pairwise(scores: &[f64], is_clean: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !is_clean[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if is_clean[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Largest gap between the two empirical CDFs, evaluated at every sample.
pub fn ks_cdf_scan(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (cdf(a, t) - cdf(b, t)).abs())
        .fold(0.0, f64::max)
}

/// Draws from N(0.5, 0.1²) and N(3, 0.5²) in equal proportion.
pub fn sample_mixture(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed, 0);
    let a = Normal::new(0.5, 0.1).unwrap();
    let b = Normal::new(3.0, 0.5).unwrap();
    (0..n)
        .map(|_| if r.random_bool(0.5) { a.sample(&mut r) } else { b.sample(&mut r) })
        .collect()
}

/// Absolute errors of the two means and of the first mixing weight.
pub fn recovery_error(fit: &GmmFit) -> (f64, f64, f64) {
    ((fit.mu0 - 0.5).abs(), (fit.mu1 - 3.0).abs(), (fit.phi0 - 0.5).abs())
}
