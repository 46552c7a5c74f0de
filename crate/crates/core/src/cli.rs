//! `protoclean` command line: `run`, `sweep` and `report`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or spec error. Every
//! failure also prints one JSON object on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval;
use crate::spec::{self, ExperimentSpec, SpecError};
use crate::trainer::{self, CleanerMode, CpcSupervision, EpochRecord, RunSummary, Stage};

/// Root for output directories when neither the flag nor the spec names one.
pub const OUTPUT_ENV: &str = "PROTOCLEAN_OUT";

#[derive(Debug, Parser)]
#[command(name = "protoclean", version, about = "Label-noise cleaner lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed of a spec and write metrics, summaries and checkpoints.
    Run(RunArgs),
    /// Run the Cartesian product of parameter values, one directory per cell.
    Sweep(SweepArgs),
    /// Summarize metric directories into CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Experiment spec (TOML).
    spec: PathBuf,
    /// Override a spec value, e.g. `--set trainer.tau=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: spec `output_dir`, then $PROTOCLEAN_OUT/<name>, then runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Grid axis, e.g. `--grid trainer.tau=0.5,0.6,0.7`; repeatable.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// Worker threads for cells (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directories containing metric streams (searched recursively).
    dirs: Vec<PathBuf>,
    /// Write all tables into this directory instead of printing one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table printed on stdout when `--out` is absent.
    #[arg(long, default_value = "accuracy", value_parser = ["accuracy", "auc", "ablation", "ks"])]
    table: String,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    kind: &'static str,
    message: String,
    field: Option<String>,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: message.into(),
            field: None,
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            message: message.into(),
            field: None,
        }
    }

    fn report(&self) {
        let obj = serde_json::json!({
            "error": {
                "kind": self.kind,
                "field": self.field,
                "message": self.message,
            },
            "exit_code": self.code,
        });
        eprintln!("{obj}");
    }
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        Self {
            code: 2,
            kind: "spec",
            field: e.field().map(str::to_string),
            message: e.to_string(),
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let f = Failure::usage(e.to_string().trim().to_string());
            f.report();
            return f.code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            f.report();
            f.code
        }
    }
}

fn load_spec(args: &SpecArgs) -> Result<(ExperimentSpec, Vec<(String, toml::Value)>), Failure> {
    let overrides = args
        .set
        .iter()
        .map(|s| spec::parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = ExperimentSpec::load(&args.spec, &overrides)?;
    Ok((spec, overrides))
}

fn output_root(args: &SpecArgs, spec: &ExperimentSpec) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &spec.output_dir {
        return o.clone();
    }
    let base = std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(&spec.dataset.name)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (spec, _) = load_spec(&args.spec)?;
    let dir = output_root(&args.spec, &spec);
    run_spec(&spec, &dir)
}

/// Per-directory summary written after every seed finished.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirSummary {
    pub runs: Vec<RunSummary>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const SPEC_FILE: &str = "spec.toml";

pub fn metrics_file(seed: u64) -> String {
    format!("metrics_seed{seed}.jsonl")
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

/// Trains every seed of `spec` into `dir`.
pub fn run_spec_dir(spec: &ExperimentSpec, dir: &Path) -> std::result::Result<(), String> {
    run_spec(spec, dir).map_err(|f| f.message)
}

fn run_spec(spec: &ExperimentSpec, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| io_failure(dir, e))?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, spec.to_toml_string()).map_err(|e| io_failure(&spec_path, e))?;
    let mut summaries = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let cfg = spec.run_config(seed);
        let path = dir.join(metrics_file(seed));
        let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
        let mut w = BufWriter::new(file);
        let out = trainer::run(&cfg, |rec| {
            serde_json::to_writer(&mut w, rec).map_err(|e| crate::Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| crate::Error::io(&path, e))
        });
        let out = out.map_err(|e| Failure::runtime(format!("seed {seed}: {e}")))?;
        let ckpt = dir.join("checkpoints");
        for (r, net) in out.networks.iter().enumerate() {
            net.save_checkpoint(&ckpt.join(format!("seed{seed}_net{r}.json")))
                .map_err(|e| Failure::runtime(e.to_string()))?;
        }
        if let Some(banks) = &out.banks {
            for (r, bank) in banks.iter().enumerate() {
                bank.save(&ckpt.join(format!("seed{seed}_bank{r}.json")))
                    .map_err(|e| Failure::runtime(e.to_string()))?;
            }
        }
        summaries.push(out.summary);
    }
    let accs: Vec<f64> = summaries.iter().map(|s| s.final_test_accuracy).collect();
    let (m, s) = eval::mean_std(&accs);
    let summary = DirSummary {
        runs: summaries,
        accuracy_mean: m,
        accuracy_std: s,
    };
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))?;
    Ok(())
}

fn parse_grid(axes: &[String]) -> Result<Vec<(String, Vec<String>)>, Failure> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for a in axes {
        let (k, vs) = a
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("grid axis `{a}`: expected KEY=V1,V2,...")))?;
        let vals: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if k.trim().is_empty() || vals.iter().any(String::is_empty) {
            return Err(Failure::usage(format!("grid axis `{a}`: empty key or value")));
        }
        if out.iter().any(|(key, _)| key == k.trim()) {
            return Err(Failure::usage(format!("grid axis `{k}` given twice")));
        }
        out.push((k.trim().to_string(), vals));
    }
    Ok(out)
}

/// Cartesian product of the grid, first axis varying slowest.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vals) in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn cell_name(cell: &[(String, String)]) -> String {
    if cell.is_empty() {
        return "base".into();
    }
    cell.iter()
        .map(|(k, v)| {
            let v: String = v
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join("__")
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let (base, mut overrides) = load_spec(&args.spec)?;
    let root = output_root(&args.spec, &base);
    let axes = parse_grid(&args.grid)?;
    let text = fs::read_to_string(&args.spec.spec).map_err(|e| io_failure(&args.spec.spec, e))?;
    // Validate every cell before anything runs.
    let mut cells = Vec::new();
    for cell in grid_cells(&axes) {
        let n = overrides.len();
        overrides.extend(cell.iter().map(|(k, v)| (k.clone(), spec::parse_literal(v))));
        let spec = ExperimentSpec::with_overrides(&text, &overrides)?;
        overrides.truncate(n);
        cells.push((root.join(cell_name(&cell)), spec));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let results: Vec<(PathBuf, Result<(), Failure>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|(dir, spec)| {
                if dir.join(SUMMARY_FILE).exists() {
                    log::info!("skipping finished cell {}", dir.display());
                    return (dir.clone(), Ok(()));
                }
                (dir.clone(), run_spec(spec, dir))
            })
            .collect()
    });
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(d, r)| r.as_ref().err().map(|f| format!("{}: {}", d.display(), f.message)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} cells failed: {}",
            failed.len(),
            results.len(),
            failed.join("; ")
        )))
    }
}

/// Metric stream of one seed as read back from disk.
#[derive(Debug, Clone)]
pub struct SeedLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

/// All streams found in one directory with the spec they were run with.
#[derive(Debug, Clone)]
pub struct DirLog {
    pub dir: PathBuf,
    pub spec: Option<ExperimentSpec>,
    pub seeds: Vec<SeedLog>,
}

impl DirLog {
    pub fn label(&self) -> String {
        self.dir.display().to_string()
    }

    pub fn benchmark(&self) -> String {
        self.spec
            .as_ref()
            .map(|s| s.dataset.name.clone())
            .unwrap_or_else(|| self.label())
    }

    /// Cleaner arm, with the self-labeling ablation named separately.
    pub fn arm(&self) -> String {
        match &self.spec {
            Some(s) if s.cleaner_mode.uses_cpc()
                && s.trainer.cpc_supervision == CpcSupervision::SelfLabel =>
            {
                format!("{}_self_label", s.cleaner_mode.as_str())
            }
            Some(s) => s.cleaner_mode.as_str().to_string(),
            None => "unknown".into(),
        }
    }

    pub fn final_accuracies(&self) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| s.records.last().map(|r| r.test_accuracy))
            .collect()
    }
}

fn find_metric_files(root: &Path, out: &mut BTreeMap<PathBuf, Vec<(u64, PathBuf)>>) {
    let Ok(entries) = fs::read_dir(root) else {
        return;
    };
    let mut entries: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metric_files(&p, out);
        } else if let Some(seed) = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("metrics_seed"))
            .and_then(|n| n.strip_suffix(".jsonl"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            out.entry(root.to_path_buf()).or_default().push((seed, p));
        }
    }
}

/// Reads every metric stream below `roots`, skipping unreadable lines with
/// a warning. Returns the logs and the number of skipped lines.
pub fn load_logs(roots: &[PathBuf]) -> (Vec<DirLog>, usize) {
    let mut files = BTreeMap::new();
    for r in roots {
        find_metric_files(r, &mut files);
    }
    let mut skipped = 0;
    let mut logs = Vec::new();
    for (dir, mut seeds) in files {
        seeds.sort();
        let spec = fs::read_to_string(dir.join(SPEC_FILE))
            .ok()
            .and_then(|t| ExperimentSpec::from_toml_str(&t).ok());
        let mut out = Vec::new();
        for (seed, path) in seeds {
            let Ok(f) = fs::File::open(&path) else {
                log::warn!("cannot open {}", path.display());
                continue;
            };
            let mut records = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let parsed = line
                    .map_err(|e| e.to_string())
                    .and_then(|l| serde_json::from_str::<EpochRecord>(&l).map_err(|e| e.to_string()));
                match parsed {
                    Ok(r) => records.push(r),
                    Err(e) => {
                        skipped += 1;
                        log::warn!("{}:{}: skipping corrupt record: {e}", path.display(), i + 1);
                    }
                }
            }
            if !records.is_empty() {
                out.push(SeedLog { seed, records });
            }
        }
        if !out.is_empty() {
            logs.push(DirLog {
                dir,
                spec,
                seeds: out,
            });
        }
    }
    (logs, skipped)
}

fn csv_err(e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("csv: {e}"))
}

pub fn accuracy_table<W: Write>(logs: &[DirLog], w: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["config", "benchmark", "cleaner", "seeds", "accuracy_mean", "accuracy_std"])?;
    for l in logs {
        let accs = l.final_accuracies();
        let (m, s) = eval::mean_std(&accs);
        w.write_record([
            l.label(),
            l.benchmark(),
            l.arm(),
            accs.len().to_string(),
            format!("{m:.6}"),
            format!("{s:.6}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn auc_table<W: Write>(logs: &[DirLog], w: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["config", "cleaner_mode", "seed", "epoch", "network", "scorer", "auc"])?;
    for l in logs {
        for s in &l.seeds {
            for r in s.records.iter().filter(|r| r.stage == Stage::Main) {
                for (net, ne) in r.nets.iter().enumerate() {
                    for (scorer, auc) in &ne.auc {
                        w.write_record([
                            l.label(),
                            l.arm(),
                            s.seed.to_string(),
                            r.epoch.to_string(),
                            net.to_string(),
                            scorer.clone(),
                            format!("{auc:.6}"),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Cleaner arms as rows, benchmarks as columns, cells `mean ± std` accuracy.
pub fn ablation_table<W: Write>(logs: &[DirLog], w: W) -> csv::Result<()> {
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut benches: Vec<String> = Vec::new();
    let mut arms: Vec<String> = Vec::new();
    for l in logs {
        let (b, a) = (l.benchmark(), l.arm());
        if !benches.contains(&b) {
            benches.push(b.clone());
        }
        if !arms.contains(&a) {
            arms.push(a.clone());
        }
        cells.entry((a, b)).or_default().extend(l.final_accuracies());
    }
    let order = |a: &String| {
        CleanerMode::ALL
            .iter()
            .position(|m| a.starts_with(m.as_str()))
            .map(|p| (p, a.len()))
            .unwrap_or((usize::MAX, 0))
    };
    arms.sort_by_key(order);
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["cleaner".to_string()];
    header.extend(benches.iter().cloned());
    w.write_record(&header)?;
    for a in &arms {
        let mut row = vec![a.clone()];
        for b in &benches {
            row.push(match cells.get(&(a.clone(), b.clone())) {
                Some(v) if !v.is_empty() => {
                    let (m, s) = eval::mean_std(v);
                    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
                }
                _ => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ks_table<W: Write>(logs: &[DirLog], w: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["config", "seed", "subset", "significant_fraction", "classes_tested"])?;
    for l in logs {
        for s in &l.seeds {
            let Some(ks) = s.records.iter().find_map(|r| r.ks.as_ref()) else {
                continue;
            };
            for (subset, frac, tests) in [
                ("clean", ks.clean_significant_fraction, &ks.clean),
                ("noise", ks.noise_significant_fraction, &ks.noise),
            ] {
                let tested = tests.iter().filter(|t| t.is_some()).count();
                w.write_record([
                    l.label(),
                    s.seed.to_string(),
                    subset.to_string(),
                    format!("{frac:.6}"),
                    tested.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    if args.dirs.is_empty() {
        return Err(Failure::usage("report needs at least one metrics directory"));
    }
    let (logs, skipped) = load_logs(&args.dirs);
    if logs.is_empty() {
        return Err(if skipped > 0 {
            Failure::runtime(format!("all {skipped} records are corrupt"))
        } else {
            Failure::usage("no metric streams found")
        });
    }
    type Table = fn(&[DirLog], &mut dyn Write) -> csv::Result<()>;
    let tables: [(&str, Table); 4] = [
        ("accuracy", |l, w| accuracy_table(l, w)),
        ("auc", |l, w| auc_table(l, w)),
        ("ablation", |l, w| ablation_table(l, w)),
        ("ks", |l, w| ks_table(l, w)),
    ];
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            for (name, f) in tables {
                let path = dir.join(format!("{name}.csv"));
                let mut file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
                f(&logs, &mut file).map_err(csv_err)?;
            }
        }
        None => {
            let (_, f) = tables
                .iter()
                .find(|(n, _)| *n == args.table)
                .expect("clap restricts table names");
            let stdout = std::io::stdout();
            f(&logs, &mut stdout.lock()).map_err(csv_err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cartesian() {
        let axes = parse_grid(&["a=1,2".into(), "b=x,y,z".into()]).unwrap();
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 6);
        assert_eq!(cell_name(&cells[0]), "a=1__b=x");
        assert_eq!(grid_cells(&[]).len(), 1);
        assert!(parse_grid(&["a".into()]).is_err());
        assert!(parse_grid(&["a=1".into(), "a=2".into()]).is_err());
    }
}
