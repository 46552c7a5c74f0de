//! Acceptance suite. Every check prints one PASS or FAIL line to stderr,
//! uncaptured, and fails its test when the criterion is not met.

mod common;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write as _;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{gradcheck, oracle};
use protoclean::eval;
use protoclean::gmm::{self, CleanerSource, GmmOptions};
use protoclean::rng;
use protoclean::spec::ExperimentSpec;
use protoclean::trainer::{self, CpcSupervision, EpochRecord, RunSummary, Stage};
use rand::Rng as _;

const SYMMETRIC: &str = r#"
seeds = [0, 1, 2]

[dataset]
name = "blobs8-sym80"
num_classes = 8
dim = 16
n_per_class = 100
separation_min = 2.0
separation_max = 6.0

[noise]
kind = "symmetric"
rate = 0.8

[trainer]
epochs = 100
warmup_epochs = 10
"#;

/// Forty percent of the labels of every other class flip to a fixed partner.
const ASYMMETRIC: &str = r#"
seeds = [0, 1, 2]

[dataset]
name = "blobs10-asym40"
num_classes = 10
dim = 16
n_per_class = 300
separation_min = 2.0
separation_max = 6.0

[noise]
kind = "asymmetric"
rate = 0.4

[trainer]
epochs = 100
warmup_epochs = 10
"#;

const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);

fn report(name: &str, pass: bool, detail: impl Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn spec(text: &str, overrides: &[(&str, &str)]) -> ExperimentSpec {
    let parsed: Vec<(String, toml::Value)> = overrides
        .iter()
        .map(|(k, v)| ((*k).to_string(), protoclean::spec::parse_literal(v)))
        .collect();
    ExperimentSpec::with_overrides(text, &parsed).unwrap()
}

struct Arm {
    records: Vec<Vec<EpochRecord>>,
    summaries: Vec<RunSummary>,
}

impl Arm {
    fn train(spec: &ExperimentSpec) -> Self {
        let mut arm = Arm { records: Vec::new(), summaries: Vec::new() };
        for seed in SEEDS {
            let out = trainer::run(&spec.run_config(seed), |_| Ok(())).unwrap();
            arm.records.push(out.records);
            arm.summaries.push(out.summary);
        }
        arm
    }

    /// Final-third AUC of the cleaner that drives this arm, per seed.
    fn own_auc(&self, source: CleanerSource) -> Vec<f64> {
        self.summaries.iter().map(|s| s.final_third_auc[source.as_str()]).collect()
    }

    fn accuracies(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.final_test_accuracy).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Benchmark {
    arms: BTreeMap<&'static str, Arm>,
    elapsed: Duration,
}

fn train_arms(text: &str, arms: &[(&'static str, &str, &str)]) -> Benchmark {
    let start = Instant::now();
    let arms = arms
        .iter()
        .map(|&(name, mode, supervision)| {
            let s = spec(text, &[("cleaner_mode", mode), ("trainer.cpc_supervision", supervision)]);
            (name, Arm::train(&s))
        })
        .collect();
    Benchmark { arms, elapsed: start.elapsed() }
}

fn symmetric() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        train_arms(
            SYMMETRIC,
            &[
                ("gmm_agn", "gmm_agn", "gmm"),
                ("cpc_agn", "cpc_agn", "gmm"),
                ("cpc_awr", "cpc_awr", "gmm"),
            ],
        )
    })
}

fn asymmetric() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        train_arms(
            ASYMMETRIC,
            &[
                ("gmm_agn", "gmm_agn", "gmm"),
                ("gmm_awr", "gmm_awr", "gmm"),
                ("cpc_agn", "cpc_agn", "gmm"),
                ("cpc_self", "cpc_agn", "self_label"),
            ],
        )
    })
}

#[test]
fn a_mixture_fit_recovers_known_components() {
    let (mut worst_mu, mut worst_phi, mut slowest) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let losses = oracle::sample_mixture(seed, 10_000);
        let start = Instant::now();
        let fit = gmm::fit_gmm_1d(&losses, &GmmOptions::default(), seed).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let (e0, e1, ephi) = oracle::recovery_error(&fit);
        worst_mu = worst_mu.max(e0).max(e1);
        worst_phi = worst_phi.max(ephi);
    }
    report(
        "mixture recovery",
        worst_mu <= 0.05 && worst_phi <= 0.03 && slowest < 1.0,
        format!("20 seeds, worst mean error {worst_mu:.4}, worst weight error {worst_phi:.4}, slowest fit {slowest:.3}s"),
    );
}

#[test]
fn b_gradients_match_finite_differences() {
    let configs = 12;
    let mut worst = (String::new(), 0.0f64);
    let mut checks = 0;
    for seed in 0..configs {
        for (what, e) in gradcheck::all_losses(seed) {
            checks += 1;
            if e >= worst.1 {
                worst = (format!("{what}, config {seed}"), e);
            }
        }
    }
    report(
        "gradient suite",
        worst.1 < 1e-4,
        format!("{configs} configs, {checks} checks, worst rel. error {:.2e} ({})", worst.1, worst.0),
    );
}

#[test]
fn c_auc_and_ks_match_oracles() {
    let mut r = rng::seeded(2024, 0);
    let (mut auc_mismatch, mut ks_gap) = (0, 0.0f64);
    for _ in 0..50 {
        let n = r.random_range(2..=200);
        let levels = r.random_range(2..15);
        let mut clean: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        clean[0] = true;
        clean[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        if eval::auc(&scores, &clean).unwrap() != oracle::auc_pairwise(&scores, &clean) {
            auc_mismatch += 1;
        }
        let a: Vec<f64> = (0..r.random_range(1..150)).map(|_| r.random_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..r.random_range(1..150)).map(|_| r.random_range(0..levels) as f64 + 0.5).collect();
        let got = eval::ks_two_sample(&a, &b).unwrap().statistic;
        ks_gap = ks_gap.max((got - oracle::ks_cdf_scan(&a, &b)).abs());
    }
    report(
        "AUC and KS oracles",
        auc_mismatch == 0 && ks_gap <= 1e-12,
        format!("50 inputs, {auc_mismatch} AUC mismatches, largest KS gap {ks_gap:.1e}"),
    );
}

#[test]
fn d_clean_losses_are_heterogeneous_across_classes() {
    let start = Instant::now();
    let s = spec(
        SYMMETRIC,
        &[("noise.rate", "0.6"), ("trainer.epochs", "12"), ("trainer.cpc_warmup", "0.0")],
    );
    let fractions: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let out = trainer::run(&s.run_config(seed), |_| Ok(())).unwrap();
            out.summary.warmup_ks.expect("warm-up KS report").clean_significant_fraction
        })
        .collect();
    let elapsed = start.elapsed();
    report(
        "loss heterogeneity",
        fractions.iter().all(|&f| f >= 0.5) && elapsed < Duration::from_secs(300),
        format!(
            "fraction of classes with clean-loss KS p<0.05 per seed {}, {:.0}s",
            fmt(&fractions),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn e_prototype_cleaner_wins_under_symmetric_noise() {
    let b = symmetric();
    let gmm = b.arms["gmm_agn"].own_auc(CleanerSource::GmmAgnostic);
    let agn = b.arms["cpc_agn"].own_auc(CleanerSource::Cpc);
    let awr = b.arms["cpc_awr"].own_auc(CleanerSource::Cpc);
    let wins = (0..SEEDS.len())
        .filter(|&i| agn[i] - gmm[i] >= 0.01 && awr[i] - agn[i] >= 0.01)
        .count();
    report(
        "symmetric cleaner ordering",
        wins >= 2 && b.elapsed < RUN_BUDGET,
        format!(
            "final-third AUC gmm_agn {} cpc_agn {} cpc_awr {}, ordered in {wins}/3 seeds, {:.0}s",
            fmt(&gmm),
            fmt(&agn),
            fmt(&awr),
            b.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn f_class_aware_mixture_fails_under_asymmetric_noise() {
    let b = asymmetric();
    let agn = mean(&b.arms["gmm_agn"].own_auc(CleanerSource::GmmAgnostic));
    let awr = mean(&b.arms["gmm_awr"].own_auc(CleanerSource::GmmAware));
    let cpc = mean(&b.arms["cpc_agn"].own_auc(CleanerSource::Cpc));
    report(
        "asymmetric cleaner ordering",
        awr < agn && cpc - agn >= 0.01 && b.elapsed < RUN_BUDGET,
        format!(
            "mean final-third AUC gmm_agn {agn:.4} gmm_awr {awr:.4} cpc_agn {cpc:.4}, {:.0}s",
            b.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn g_prototype_cleaner_improves_accuracy() {
    let b = asymmetric();
    let gmm = b.arms["gmm_agn"].accuracies();
    let cpc = b.arms["cpc_agn"].accuracies();
    let gain = mean(&cpc) - mean(&gmm);
    report(
        "end-to-end accuracy gain",
        gain >= 0.01,
        format!("final accuracy gmm_agn {} cpc_agn {}, gain {:+.2} points", fmt(&gmm), fmt(&cpc), 100.0 * gain),
    );
}

/// Mean of `pick` over both networks for the first and the last third of
/// the main stage.
fn thirds(records: &[EpochRecord], pick: impl Fn(&trainer::NetEpoch) -> Option<f64>) -> (f64, f64) {
    let main: Vec<&EpochRecord> = records.iter().filter(|r| r.stage == Stage::Main).collect();
    let third = main.len() / 3;
    let window = |rs: &[&EpochRecord]| {
        let v: Vec<f64> = rs.iter().flat_map(|r| r.nets.iter().filter_map(&pick)).collect();
        mean(&v)
    };
    (window(&main[..third]), window(&main[main.len() - third..]))
}

#[test]
fn h_cleaners_agree_more_as_training_proceeds() {
    let b = asymmetric();
    let arm = &b.arms["cpc_agn"];
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, records) in SEEDS.iter().zip(&arm.records) {
        let (c0, c1) = thirds(records, |n| n.consistency);
        let (k0, k1) = thirds(records, |n| n.kld);
        ok &= c1 > c0 && k1 < k0;
        lines.push(format!("seed {seed} consistency {c0:.4}->{c1:.4} kld {k0:.4}->{k1:.4}"));
    }
    report("cleaner agreement", ok, lines.join("; "));
}

#[test]
fn i_metric_logs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.toml");
    std::fs::write(&path, spec(SYMMETRIC, &[("cleaner_mode", "cpc_awr"), ("seeds", "[0]")]).to_toml_string()).unwrap();
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let status = Command::new(env!("CARGO_BIN_EXE_protoclean"))
                .args(["run", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
                .status()
                .unwrap();
            assert!(status.success());
            std::fs::read(out_dir.join("metrics_seed0.jsonl")).unwrap()
        })
        .collect();
    report(
        "determinism",
        !logs[0].is_empty() && logs[0] == logs[1],
        format!("two runs of one config and seed, {} and {} bytes of metrics, identical: {}", logs[0].len(), logs[1].len(), logs[0] == logs[1]),
    );
}

#[test]
fn j_self_labeling_ablation_does_not_help() {
    let b = asymmetric();
    let full = b.arms["cpc_agn"].accuracies();
    let ablated = b.arms["cpc_self"].accuracies();
    assert!(b.arms["cpc_self"]
        .summaries
        .iter()
        .all(|s| s.cpc_supervision == CpcSupervision::SelfLabel));
    report(
        "self-labeling ablation",
        mean(&ablated) <= mean(&full),
        format!(
            "final accuracy full {} (mean {:.4}) self-labeled {} (mean {:.4})",
            fmt(&full),
            mean(&full),
            fmt(&ablated),
            mean(&ablated)
        ),
    );
}
