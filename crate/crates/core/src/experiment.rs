//! Experiment commands: data generation, tuning, repeated runs, analysis and
//! report summaries. Every artifact path in a report is relative to the
//! output directory and no report carries timestamps, so reruns with the
//! same configuration are byte-identical.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{correlation_table, summarize, summarize_values, write_excerpt_csv, CorrelationMatrix, RunEntry, RunSet, Summary};
use crate::config::{ExperimentConfig, ReservoirConfig, SearchTarget};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, SignalRecord};
use crate::regime::{Env, EvaluatedRun, RegimeRegistry};
use crate::search::{apply_bptt_point, apply_reservoir_point, evaluate_bptt_config, evaluate_reservoir_config, random_search, write_trials_csv, Trial};
use crate::seeds::{derive_seed, Stream};
use crate::tasks::{Dataset, DatasetSplit};

pub const TOOL: &str = "multiesn";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_FILE: &str = "report.json";

const SPLITS: [&str; 3] = ["train", "validation", "test"];

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn rel(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Splits from `task.data_dir` when set, otherwise generated from the master seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    match &cfg.task.data_dir {
        Some(dir) => {
            let read = |name: &str| Dataset::read_csv(&dir.join(format!("{name}.csv")));
            Ok(DatasetSplit { train: read("train")?, validation: read("validation")?, test: read("test")? })
        }
        None => DatasetSplit::generate(cfg.task.train_len, cfg.task.val_len, cfg.task.test_len, cfg.seed),
    }
}

/// Writes each split as `<split>.csv` and `<split>.rcds`; returns relative paths.
pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out)?;
    let data = DatasetSplit::generate(cfg.task.train_len, cfg.task.val_len, cfg.task.test_len, cfg.seed)?;
    let mut paths = Vec::new();
    for (name, d) in SPLITS.iter().zip([&data.train, &data.validation, &data.test]) {
        let csv = PathBuf::from(format!("{name}.csv"));
        let bin = PathBuf::from(format!("{name}.rcds"));
        d.write_csv(&out.join(&csv))?;
        d.write_binary(&out.join(&bin))?;
        paths.push(rel(&csv));
        paths.push(rel(&bin));
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub status: String,
    pub reservoir_seeds: Vec<u64>,
    pub training_seed: Option<u64>,
    pub val_nmse: Option<f64>,
    pub test_nmse: Option<f64>,
    pub error: Option<String>,
    pub artifacts: Vec<String>,
}

impl RunRow {
    pub fn completed(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub loaded_from: Option<String>,
    /// Run id of the candidate chosen by validation NMSE.
    pub selected_run: Option<usize>,
    pub val_nmse: f64,
    pub test_nmse: f64,
    pub candidates: Vec<RunRow>,
    pub summary: Option<Summary>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub master: u64,
    /// Seeds that produced the train, validation and test inputs.
    pub data: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool: String,
    pub version: String,
    pub regime: String,
    pub config: ExperimentConfig,
    pub seeds: SeedReport,
    pub runs: Vec<RunRow>,
    pub summary: Option<Summary>,
    pub source: Option<SourceReport>,
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(RunRow::completed)
    }
}

fn write_runs_csv(rows: &[RunRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "run_id,status,val_nmse,test_nmse")?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        writeln!(w, "{},{},{},{}", r.run_id, r.status, f(r.val_nmse), f(r.test_nmse))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one run's artifacts under `out/dir` and returns its table row.
fn write_run(run: &EvaluatedRun, out: &Path, dir: &Path) -> Result<RunRow> {
    let reservoir_seeds = run.spec.nodes.iter().map(|n| n.params.seed).collect();
    let mut row = RunRow {
        run_id: run.run_id,
        status: "failed".into(),
        reservoir_seeds,
        training_seed: run.training_seed,
        val_nmse: None,
        test_nmse: None,
        error: None,
        artifacts: Vec::new(),
    };
    let (output, test_nmse, record) = match &run.outcome {
        Ok(o) => o,
        Err(e) => {
            row.error = Some(e.to_string());
            return Ok(row);
        }
    };
    std::fs::create_dir_all(out.join(dir))?;
    let mut emit = |name: &str| {
        let p = dir.join(name);
        row.artifacts.push(rel(&p));
        out.join(p)
    };
    output.network.save(&emit("network.json"))?;
    record.write_csv(&emit("signals_test.csv"))?;
    if let Some(log) = &output.log {
        log.write_csv(&emit("train_log.csv"))?;
    }
    if let Some(ck) = &output.checkpoint {
        ck.save(&emit("checkpoint.json"))?;
    }
    row.status = "ok".into();
    row.val_nmse = Some(output.val_nmse);
    row.test_nmse = Some(*test_nmse);
    Ok(row)
}

fn run_dir(prefix: &str, run: usize) -> PathBuf {
    PathBuf::from(prefix).join(format!("run_{run:02}"))
}

fn rows_summary(rows: &[RunRow]) -> Option<Summary> {
    summarize_values(&rows.iter().filter_map(|r| r.test_nmse.map(|t| (r.run_id, t))).collect::<Vec<_>>())
}

/// Runs `cfg.repetitions` repetitions of the configured regime, writes all
/// artifacts and `report.json` under `out`, and returns the report. Failed
/// repetitions are recorded in the report rather than returned as errors.
pub fn cmd_run(cfg: &ExperimentConfig, registry: &RegimeRegistry, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    let regime = registry.get(&cfg.regime)?;
    regime.validate(cfg)?;
    cfg.validate_lengths()?;
    let data = load_data(cfg)?;
    std::fs::create_dir_all(out)?;
    let env = Env { cfg, data: &data };
    let (prepared, runs) = pool(jobs)?.install(|| {
        let prepared = regime.prepare(&env);
        let runs: Vec<EvaluatedRun> = match &prepared {
            Ok(p) => (0..cfg.repetitions).into_par_iter().map(|r| env.execute(regime, p, r)).collect(),
            Err(e) => (0..cfg.repetitions)
                .map(|r| EvaluatedRun {
                    run_id: r,
                    spec: env.spec(regime.architecture(), regime.seed_offset() + r),
                    training_seed: None,
                    outcome: Err(e.clone()),
                })
                .collect(),
        };
        (prepared.unwrap_or_default(), runs)
    });

    let mut artifacts = Vec::new();
    let source = prepared.source.as_ref().map(|src| -> Result<SourceReport> {
        let mut candidates = Vec::new();
        let mut art = Vec::new();
        for c in &src.candidates {
            let row = write_run(c, out, &run_dir("source", c.run_id))?;
            art.extend(row.artifacts.iter().cloned());
            candidates.push(row);
        }
        if !candidates.is_empty() {
            let p = PathBuf::from("source").join("runs.csv");
            write_runs_csv(&candidates, &out.join(&p))?;
            art.push(rel(&p));
        }
        let p = PathBuf::from("source").join("signals_train.csv");
        std::fs::create_dir_all(out.join("source"))?;
        src.record.write_csv(&out.join(&p))?;
        art.push(rel(&p));
        let summary = rows_summary(&candidates);
        Ok(SourceReport {
            loaded_from: src.loaded_from.as_ref().map(|p| p.display().to_string()),
            selected_run: src.selected.map(|i| src.candidates[i].run_id),
            val_nmse: src.val_nmse,
            test_nmse: src.test_nmse,
            candidates,
            summary,
            artifacts: art,
        })
    });
    let source = source.transpose()?;
    if let Some(s) = &source {
        artifacts.extend(s.artifacts.iter().cloned());
    }

    let mut rows = Vec::new();
    for r in &runs {
        let row = write_run(r, out, &run_dir("", r.run_id))?;
        artifacts.extend(row.artifacts.iter().cloned());
        rows.push(row);
    }
    write_runs_csv(&rows, &out.join("runs.csv"))?;
    artifacts.push("runs.csv".into());
    artifacts.push(REPORT_FILE.into());

    let report = ExperimentReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        regime: cfg.regime.clone(),
        config: cfg.clone(),
        seeds: SeedReport { master: cfg.seed, data: vec![data.train.seed, data.validation.seed, data.test.seed] },
        summary: rows_summary(&rows),
        runs: rows,
        source,
        artifacts,
    };
    write_json(&report, &out.join(REPORT_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub tool: String,
    pub version: String,
    pub target: SearchTarget,
    pub budget: usize,
    pub failed: usize,
    /// `(trial_id, error)` for each failed trial.
    pub failures: Vec<(usize, String)>,
    pub best: Trial,
    /// The input configuration with the best point applied.
    pub tuned: ExperimentConfig,
    pub artifacts: Vec<String>,
}

/// Random search over the configured space; writes `trials.csv`,
/// `tune.json` and `tuned_config.json` (usable as `--config`).
pub fn cmd_tune(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<TuneReport> {
    cfg.validate_lengths()?;
    let space = cfg.search.space();
    let data = load_data(cfg)?;
    let base: NetworkSpec = match cfg.search.target {
        SearchTarget::Monolithic => cfg.monolithic_spec(0),
        _ => cfg.chain_spec(0),
    };
    let reseed = |seed: u64| base.reseeded(|k| derive_seed(seed, Stream::Reservoir, k as u64));
    let objective = |p: &crate::search::Point, seed: u64| match cfg.search.target {
        SearchTarget::Bptt => evaluate_bptt_config(p, &reseed(seed), &data, &crate::bptt::BpttConfig { seed, ..cfg.bptt.clone() }),
        _ => evaluate_reservoir_config(p, &reseed(seed), &data, &cfg.ridge),
    };
    let (best, trials) = pool(jobs)?.install(|| random_search(&space, cfg.search.budget, &objective, derive_seed(cfg.seed, Stream::Search, 0)))?;

    let mut tuned = cfg.clone();
    match cfg.search.target {
        SearchTarget::Bptt => tuned.bptt = apply_bptt_point(&cfg.bptt, &best.point)?,
        SearchTarget::Monolithic => {
            let spec = apply_reservoir_point(&base, &best.point)?;
            tuned.monolithic = ReservoirConfig::from_params(&spec.nodes[0].params);
        }
        SearchTarget::Engineered => {
            let spec = apply_reservoir_point(&base, &best.point)?;
            for (k, n) in spec.nodes.iter().enumerate() {
                tuned.chain[k] = ReservoirConfig::from_params(&n.params);
            }
        }
    }
    std::fs::create_dir_all(out)?;
    write_trials_csv(&space, &trials, &out.join("trials.csv"))?;
    write_json(&tuned, &out.join("tuned_config.json"))?;
    let report = TuneReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        target: cfg.search.target,
        budget: cfg.search.budget,
        failed: trials.iter().filter(|t| t.status != crate::search::TrialStatus::Ok).count(),
        failures: trials.iter().filter_map(|t| t.error.clone().map(|e| (t.id, e))).collect(),
        best,
        tuned,
        artifacts: vec!["trials.csv".into(), "tuned_config.json".into(), "tune.json".into()],
    };
    write_json(&report, &out.join("tune.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    /// `ideal` for the hand-designed targets, otherwise the reference report's run.
    pub reference: String,
    pub regime: String,
    pub runs: Vec<usize>,
    pub washout: usize,
    pub correlations: Vec<CorrelationMatrix>,
    pub summary: Option<Summary>,
    pub artifacts: Vec<String>,
}

fn load_record(report_path: &Path, row: &RunRow) -> Result<SignalRecord> {
    let base = report_path.parent().unwrap_or(Path::new("."));
    let file = row
        .artifacts
        .iter()
        .find(|a| a.ends_with("signals_test.csv"))
        .ok_or_else(|| Error::Config(format!("run {} has no test signals", row.run_id)))?;
    SignalRecord::read_csv(&base.join(file))
}

/// Correlation matrices and excerpts for chain nodes 1 and 2 of the
/// completed runs in `runs_report`. The reference is the best run of
/// `reference_report` when given, otherwise the hand-designed targets on the
/// same test input.
pub fn cmd_analyze(runs_report: &Path, reference_report: Option<&Path>, out: &Path) -> Result<AnalysisReport> {
    let report = ExperimentReport::load(runs_report)?;
    if report.config.regime == "monolithic" {
        return Err(Error::Config("analysis needs chain3 runs, got a monolithic report".into()));
    }
    let mut entries = Vec::new();
    for row in report.runs.iter().filter(|r| r.completed()) {
        entries.push(RunEntry { run_id: row.run_id, network: None, record: load_record(runs_report, row)?, test_nmse: row.test_nmse.unwrap_or(f64::NAN) });
    }
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: no completed runs", runs_report.display())));
    }
    let runs = RunSet::new(entries)?;
    let input = runs.runs()[0].record.input.clone();
    let (reference, label) = match reference_report {
        Some(path) => {
            let r = ExperimentReport::load(path)?;
            let best = r.summary.ok_or_else(|| Error::Config(format!("{}: no completed runs", path.display())))?.best_run;
            let row = r.runs.iter().find(|x| x.run_id == best).expect("best run listed");
            (load_record(path, row)?, format!("{}:run_{best:02}", r.regime))
        }
        None => (SignalRecord::engineered_targets(&input)?, "ideal".to_string()),
    };
    if reference.input != input {
        return Err(Error::Config("reference and runs were recorded on different test inputs".into()));
    }
    std::fs::create_dir_all(out)?;
    let washout = report.config.washout;
    let mut correlations = Vec::new();
    let mut artifacts = Vec::new();
    for node in [1, 2] {
        let m = correlation_table(&reference, &runs, node, washout)?;
        let name = format!("correlation_node{node}.csv");
        m.write_csv(&out.join(&name))?;
        artifacts.push(name);
        correlations.push(m);
        let name = format!("excerpt_node{node}.csv");
        write_excerpt_csv(&reference, &runs, node, washout, &out.join(&name))?;
        artifacts.push(name);
    }
    artifacts.push("analysis.json".into());
    let analysis = AnalysisReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        reference: label,
        regime: report.regime.clone(),
        runs: runs.runs().iter().map(|r| r.run_id).collect(),
        washout,
        correlations,
        summary: summarize(&runs),
        artifacts,
    };
    write_json(&analysis, &out.join("analysis.json"))?;
    Ok(analysis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub requested: usize,
    pub summary: Option<Summary>,
}

fn read_runs_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("{}: malformed row {line:?}", path.display())));
        }
        if f[1] == "ok" {
            let parse = |s: &str| s.parse().map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())));
            out.push((parse(f[0])? as usize, parse(f[3])?));
        }
    }
    Ok(out)
}

/// Summaries recomputed from each report's `runs.csv` (and `source/runs.csv`),
/// written to `out/summary.csv`.
pub fn cmd_report(reports: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for path in reports {
        let report = ExperimentReport::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let label = base.file_name().map_or(report.regime.clone(), |n| format!("{}:{}", n.to_string_lossy(), report.regime));
        if let Some(src) = &report.source {
            if !src.candidates.is_empty() {
                let values = read_runs_csv(&base.join("source").join("runs.csv"))?;
                rows.push(SummaryRow { label: format!("{label}:source"), requested: src.candidates.len(), summary: summarize_values(&values) });
            }
        }
        let values = read_runs_csv(&base.join("runs.csv"))?;
        rows.push(SummaryRow { label, requested: report.runs.len(), summary: summarize_values(&values) });
    }
    std::fs::create_dir_all(out)?;
    let mut w = BufWriter::new(std::fs::File::create(out.join("summary.csv"))?);
    writeln!(w, "label,requested,completed,mean_nmse,std_nmse,best_run,best_nmse")?;
    for r in &rows {
        match &r.summary {
            Some(s) => writeln!(w, "{},{},{},{},{},{},{}", r.label, r.requested, s.count, s.mean, s.std, s.best_run, s.best_nmse)?,
            None => writeln!(w, "{},{},0,,,,", r.label, r.requested)?,
        }
    }
    w.flush()?;
    Ok(rows)
}
