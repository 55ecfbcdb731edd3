use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use imbopt::diagnostics::{detect_mid, mean_stderr, MidReport, RunLog};
use imbopt::model::Model;
use imbopt::optim::train;
use imbopt::theory::battery::{run_unit, units};
use imbopt::theory::{assemble_battery, Battery, BatteryConfig};
use imbopt::{Error, SeededRng, Stream};

use crate::config::{self, ExperimentConfig};

pub enum Outcome {
    Clean,
    Violations(usize),
}

impl Outcome {
    fn from_count(n: usize) -> Self {
        if n == 0 {
            Outcome::Clean
        } else {
            Outcome::Violations(n)
        }
    }
}

/// Sizes the global rayon pool from `IMBOPT_THREADS` when set.
pub fn init_pool() -> Result<()> {
    let Ok(v) = std::env::var("IMBOPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("IMBOPT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

fn seeds_or(flag: Option<&str>, default: &[u64]) -> Result<Vec<u64>> {
    match flag {
        Some(s) => config::parse_seeds(s),
        None => Ok(default.to_vec()),
    }
}

/// Structural checks every run log must pass.
pub fn log_invariant_violations(log: &RunLog) -> Vec<String> {
    let mut out = Vec::new();
    for w in log.rows.windows(2) {
        if w[1].t <= w[0].t {
            out.push(format!("rows out of order at t = {}", w[1].t));
        }
    }
    for r in &log.rows {
        for v in r.recall_train.iter().chain(&r.recall_test) {
            if !v.is_nan() && !(0.0..=1.0).contains(v) {
                out.push(format!("recall {v} outside [0, 1] at t = {}", r.t));
            }
        }
        if r.margin.is_some_and(|m| !m.is_finite()) {
            out.push(format!("non-finite margin at t = {}", r.t));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
struct SeedResult {
    run: usize,
    algorithm: String,
    seed: u64,
    status: &'static str,
    final_macro_test_recall: f64,
    final_minority_test_recall: f64,
    mid: Option<MidReport>,
    detail: String,
    invariant_violations: Vec<String>,
    log_file: Option<String>,
}

fn stem(run: usize, alg: &str, seed: u64) -> String {
    format!("r{run}-{alg}-seed{seed}")
}

fn run_one(cfg: &ExperimentConfig, run: usize, seed: u64, out: &Path) -> Result<SeedResult> {
    let tc = &cfg.runs[run];
    let alg = tc.algorithm.name().to_string();
    let split = cfg.dataset.generate(seed).context("dataset generation")?;
    let spec = cfg.model.spec(split.train.dim(), split.train.classes());
    let model = Model::init(spec, &mut SeededRng::new(seed, Stream::Init))?;
    let minority = split.train.minority_class();
    let mut res = SeedResult {
        run,
        algorithm: alg.clone(),
        seed,
        status: "ok",
        final_macro_test_recall: f64::NAN,
        final_minority_test_recall: f64::NAN,
        mid: None,
        detail: String::new(),
        invariant_violations: Vec::new(),
        log_file: None,
    };
    match train(model, &split.train, &split.test, tc, seed) {
        Ok(outcome) => {
            let log = outcome.log;
            let file = format!("{}.csv", stem(run, &alg, seed));
            log.write_csv(&out.join(&file))?;
            let last = log.rows.last().expect("initial evaluation is always logged");
            res.final_macro_test_recall = last.macro_test_recall();
            res.final_minority_test_recall = last.recall_test[minority];
            let mid = detect_mid(&log, minority, &cfg.mid)?;
            fs::write(
                out.join(format!("{}-mid.json", stem(run, &alg, seed))),
                serde_json::to_string_pretty(&mid)?,
            )?;
            res.mid = Some(mid);
            res.invariant_violations = log_invariant_violations(&log);
            res.log_file = Some(file);
        }
        Err(Error::Divergence { step, detail }) => {
            res.status = "diverged";
            res.detail = format!("step {step}: {detail}");
        }
        Err(e) => return Err(e).with_context(|| format!("run {run} ({alg}), seed {seed}")),
    }
    Ok(res)
}

pub fn run(config_path: &Path, out: Option<PathBuf>, seeds: Option<&str>, quiet: bool) -> Result<Outcome> {
    let mut cfg = config::load_experiment(config_path)?;
    cfg.seeds = seeds_or(seeds, &cfg.seeds)?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let jobs: Vec<(usize, u64)> = (0..cfg.runs.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let start = Instant::now();
    let results = jobs
        .par_iter()
        .map(|&(r, s)| {
            let res = run_one(&cfg, r, s, &out);
            if !quiet {
                if let Ok(res) = &res {
                    eprintln!(
                        "run {r} {} seed {s}: {} (macro test recall {:.4})",
                        res.algorithm, res.status, res.final_macro_test_recall
                    );
                }
            }
            res
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv_writer(&out.join("seeds.csv"))?;
    w.write_record([
        "run",
        "algorithm",
        "seed",
        "status",
        "final_macro_test_recall",
        "final_minority_test_recall",
        "mid_present",
        "mid_depth",
        "tau",
        "log_file",
        "detail",
    ])?;
    for r in &results {
        let (present, depth, tau) = match &r.mid {
            Some(m) => (
                m.mid_present.to_string(),
                fmt(m.mid_depth),
                m.tau.map_or(String::new(), |t| t.to_string()),
            ),
            None => (String::new(), "NaN".into(), String::new()),
        };
        w.write_record([
            r.run.to_string(),
            r.algorithm.clone(),
            r.seed.to_string(),
            r.status.to_string(),
            fmt(r.final_macro_test_recall),
            fmt(r.final_minority_test_recall),
            present,
            depth,
            tau,
            r.log_file.clone().unwrap_or_default(),
            r.detail.clone(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("summary.csv"))?;
    w.write_record([
        "run",
        "algorithm",
        "seeds",
        "failed",
        "macro_test_recall_mean",
        "macro_test_recall_stderr",
        "tau_reached",
        "tau_mean",
        "tau_stderr",
        "mid_present",
    ])?;
    for (ri, tc) in cfg.runs.iter().enumerate() {
        let mine: Vec<&SeedResult> = results.iter().filter(|r| r.run == ri).collect();
        let ok: Vec<&&SeedResult> = mine.iter().filter(|r| r.status == "ok").collect();
        let recalls: Vec<f64> = ok.iter().map(|r| r.final_macro_test_recall).collect();
        let taus: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.mid.as_ref().and_then(|m| m.tau).map(|t| t as f64))
            .collect();
        let mids = ok
            .iter()
            .filter(|r| r.mid.as_ref().is_some_and(|m| m.mid_present))
            .count();
        let (rm, rs) = mean_stderr(&recalls);
        let (tm, ts) = mean_stderr(&taus);
        w.write_record([
            ri.to_string(),
            tc.algorithm.name().to_string(),
            mine.len().to_string(),
            (mine.len() - ok.len()).to_string(),
            fmt(rm),
            fmt(rs),
            taus.len().to_string(),
            fmt(tm),
            fmt(ts),
            mids.to_string(),
        ])?;
    }
    w.flush()?;

    let streams = |seed: u64| {
        let data = cfg.dataset.data_seed(seed);
        json!({
            "init": {"seed": seed, "stream_id": Stream::Init.id()},
            "batching": {"seed": seed, "stream_id": Stream::Batching.id()},
            "data": {"seed": data, "stream_id": Stream::Data.id()},
            "test_data": {"seed": data, "stream_id": Stream::TestData.id()},
        })
    };
    let manifest = json!({
        "tool": "imbopt",
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": config::SCHEMA_VERSION,
        "config": cfg,
        "seeds": cfg.seeds.iter().map(|&s| json!({"seed": s, "streams": streams(s)})).collect::<Vec<_>>(),
        "results": results,
        "elapsed_seconds": start.elapsed().as_secs_f64(),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let violations: usize = results.iter().map(|r| r.invariant_violations.len()).sum();
    for r in results.iter().filter(|r| !r.invariant_violations.is_empty()) {
        eprintln!("run {} seed {}: {}", r.run, r.seed, r.invariant_violations.join("; "));
    }
    Ok(Outcome::from_count(violations))
}

fn batteries(name: &str) -> Result<Vec<Battery>> {
    if name == "all" {
        return Ok(Battery::ALL.to_vec());
    }
    Ok(vec![name.parse::<Battery>()?])
}

pub fn theory(name: &str, out: &Path, config_path: Option<&Path>, seeds: Option<&str>, quiet: bool) -> Result<Outcome> {
    let list = batteries(name)?;
    let base = match config_path {
        Some(p) => config::load_theory(p)?,
        None => BatteryConfig::default(),
    };
    let seeds = seeds_or(seeds, &[base.seed])?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut total = 0;
    for &b in &list {
        for &seed in &seeds {
            let cfg = BatteryConfig { seed, ..base.clone() };
            let start = Instant::now();
            let parts = (0..units(b, &cfg))
                .into_par_iter()
                .map(|i| run_unit(b, &cfg, i))
                .collect::<imbopt::Result<Vec<_>>>()?;
            let table = assemble_battery(b, parts);
            let path = out.join(format!("{}_seed{seed}.csv", b.name()));
            table.write_csv(&path)?;
            let v = table.violations();
            total += v;
            if !quiet {
                eprintln!(
                    "{b} seed {seed}: {} rows, {} with hypotheses met, {v} violations ({:.1}s) -> {}",
                    table.rows.len(),
                    table.hypotheses_ok_count(),
                    start.elapsed().as_secs_f64(),
                    path.display()
                );
            }
        }
    }
    Ok(Outcome::from_count(total))
}

pub fn gen_data(config_path: &Path, out: &Path, seeds: Option<&str>, quiet: bool) -> Result<Outcome> {
    let cfg = config::load_data(config_path)?;
    let seeds = seeds_or(seeds, &cfg.seeds)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let counts = cfg.dataset.profile.counts()?;
    let ratios: Vec<f64> = counts.iter().map(|&c| counts[0] as f64 / c as f64).collect();
    let mut entries = Vec::new();
    for &seed in &seeds {
        let split = cfg.dataset.generate(seed)?;
        let (train_file, test_file) = (format!("train_seed{seed}.csv"), format!("test_seed{seed}.csv"));
        split.train.write_csv(&out.join(&train_file))?;
        split.test.write_csv(&out.join(&test_file))?;
        if split.train.counts() != counts {
            bail!(
                "generated counts {:?} differ from profile {counts:?}",
                split.train.counts()
            );
        }
        entries.push(json!({
            "seed": seed,
            "data_seed": cfg.dataset.data_seed(seed),
            "train_file": train_file,
            "test_file": test_file,
            "test_counts": split.test.counts(),
        }));
        if !quiet {
            eprintln!(
                "seed {seed}: train counts {counts:?} -> {}",
                out.join(&train_file).display()
            );
        }
    }
    let manifest = json!({
        "tool": "imbopt",
        "version": env!("CARGO_PKG_VERSION"),
        "dataset": cfg.dataset,
        "counts": counts,
        "imbalance_ratios": ratios,
        "seeds": entries,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(Outcome::Clean)
}
