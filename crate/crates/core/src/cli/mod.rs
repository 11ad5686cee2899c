//! Batch experiment runner behind the `reludyn` binary.

pub mod config;
pub mod runner;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, ExperimentKind, SweepSpec};
pub use runner::{run_experiment, ExperimentOutcome, Manifest, RunSummary};

use crate::datasets;
use crate::error::{Error, Result};
use runner::{hitting_label, MANIFEST_FILE, SUMMARY_FILE};

pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    run_experiment(cfg, Some(out))
}

pub fn cmd_prm(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    if cfg.kind != ExperimentKind::Prm {
        return Err(Error::Config(format!("`prm` needs kind \"prm\", got {:?}", cfg.kind)));
    }
    run_experiment(cfg, Some(out))
}

/// Writes `dataset.csv` and the `dataset.json` sidecar (with the global-rate
/// constants when the config names a width and the labels are binary).
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<datasets::DatasetSidecar> {
    let spec = cfg.dataset.as_ref().ok_or_else(|| Error::Config("`dataset` is required".into()))?;
    let ds = runner::build_dataset(spec, cfg.seed)?;
    let report = if ds.is_binary() { datasets::validate_separable(&ds)? } else { datasets::validate_concentrated(&ds) };
    let constants = match (&cfg.model, ds.is_binary()) {
        (Some(model), true) => Some(datasets::compute_v(&ds, model.m as f64, cfg.delta)?),
        _ => None,
    };
    datasets::export(&ds, out, "dataset", &report, constants.as_ref())?;
    let text = fs::read_to_string(out.join("dataset.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug)]
pub struct VerifyOutcome {
    pub outcome: ExperimentOutcome,
    pub steps_match: bool,
    pub certificates_match: bool,
}

impl VerifyOutcome {
    pub fn reproduced(&self) -> bool {
        self.steps_match && self.certificates_match
    }
}

/// Re-runs the config stored in a manifest (a run directory or the manifest
/// file itself) and compares the digests.
pub fn cmd_verify(stored: &Path, out: Option<&Path>) -> Result<VerifyOutcome> {
    let path = if stored.is_dir() { stored.join(MANIFEST_FILE) } else { stored.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let outcome = run_experiment(&manifest.config, out)?;
    Ok(VerifyOutcome {
        steps_match: outcome.summary.steps_digest == manifest.steps_digest,
        certificates_match: outcome.summary.certificates_digest == manifest.certificates_digest,
        outcome,
    })
}

/// One row of `aggregate.csv`, taken verbatim from the run's summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub run: String,
    pub axes: Vec<serde_json::Value>,
    pub summary: RunSummary,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<AggregateRow>,
    pub failed: bool,
}

/// Runs every point of the sweep in a pool of `jobs` workers, each in its own
/// subdirectory `run_XXXX`, and writes `aggregate.csv`.
pub fn cmd_sweep(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    let points = spec.expand()?;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let results: Vec<Result<AggregateRow>> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(idx, (axes, cfg))| {
                let run = format!("run_{idx:04}");
                let o = run_experiment(cfg, Some(&out.join(&run)))?;
                Ok(AggregateRow { run, axes: axes.clone(), summary: o.summary })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_aggregate(&out.join(AGGREGATE_FILE), spec, &rows)?;
    let failed = rows.iter().any(|r| r.summary.failed);
    Ok(SweepOutcome { rows, failed })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

pub fn write_aggregate(path: &Path, spec: &SweepSpec, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(spec.axes.iter().map(|a| a.param.clone()));
    header.extend(
        [
            "kind",
            "status",
            "final_step",
            "measured_t",
            "t_star",
            "t_e",
            "loss_initial",
            "loss_final",
            "descent",
            "descent_bound",
            "within_hypotheses",
            "certificates_failed",
            "aborted",
            "failed",
            "steps_digest",
            "certificates_digest",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![r.run.clone()];
        rec.extend(r.axes.iter().map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        rec.push(serde_json::to_value(s.kind)?.as_str().unwrap_or_default().to_string());
        rec.push(s.status.as_ref().map_or(String::new(), status_label));
        rec.push(opt(&s.final_step));
        rec.push(s.measured_t.map_or(String::new(), hitting_label));
        rec.push(opt(&s.t_star));
        rec.push(opt(&s.t_e));
        rec.push(opt(&s.loss_initial));
        rec.push(opt(&s.loss_final));
        rec.push(opt(&s.descent));
        rec.push(opt(&s.descent_bound));
        rec.push(s.within_hypotheses.to_string());
        rec.push(s.certificates_failed.to_string());
        rec.push(s.aborted.to_string());
        rec.push(s.failed.to_string());
        rec.push(s.steps_digest.clone());
        rec.push(s.certificates_digest.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn status_label(s: &crate::training::RunStatus) -> String {
    use crate::training::RunStatus::*;
    match s {
        Completed => "completed".into(),
        ConvergedExactly { step } => format!("converged_exactly@{step}"),
        EarlyStopped { step } => format!("early_stopped@{step}"),
        Aborted { step, .. } => format!("aborted@{step}"),
    }
}

/// Human-readable report for a run directory (certificate table) or a sweep
/// directory (one line per run).
pub fn cmd_report(dir: &Path) -> Result<String> {
    let summary = dir.join(SUMMARY_FILE);
    if summary.exists() {
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(&summary)?)?;
        let certs = crate::certificates::CertificateSet::from_json(&fs::read_to_string(dir.join(runner::CERTIFICATES_FILE))?)?;
        let mut out = format!(
            "{:?} run, status {}, T {} (T* {}), descent {} (bound {}), {}\n",
            s.kind,
            s.status.as_ref().map_or("-".into(), status_label),
            s.measured_t.map_or("-".into(), hitting_label),
            opt(&s.t_star),
            opt(&s.descent),
            opt(&s.descent_bound),
            if s.failed { "FAILED" } else { "ok" }
        );
        for note in &s.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out.push_str(&certs.summary_table());
        return Ok(out);
    }
    let agg = dir.join(AGGREGATE_FILE);
    if agg.exists() {
        return Ok(fs::read_to_string(agg)?);
    }
    Err(Error::Config(format!("{} holds neither {SUMMARY_FILE} nor {AGGREGATE_FILE}", dir.display())))
}

/// Default output directory for a config file: `runs/<stem>`.
pub fn default_out(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}
