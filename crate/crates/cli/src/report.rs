use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use zslbench::eval::{EvalReport, Mode};
use zslbench::registry::{Grid, GridPoint, Hyper, Provenance, RunOutcome};
use zslbench::Scalar;

/// Wall-clock information; the only part of a report that changes between
/// identical runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timestamp {
    pub started_unix: u64,
    pub wall_seconds: f64,
}

pub struct Clock {
    started_unix: u64,
    start: Instant,
}

impl Clock {
    pub fn start() -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { started_unix, start: Instant::now() }
    }

    pub fn stop(&self) -> Timestamp {
        Timestamp { started_unix: self.started_unix, wall_seconds: self.start.elapsed().as_secs_f64() }
    }
}

/// One `run` or `cross` invocation. Field order is the serialized order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub mode: Mode,
    pub seed: u64,
    pub precision: String,
    pub retrain: bool,
    pub grid: Grid,
    pub chosen: Hyper,
    pub final_epochs: Option<usize>,
    pub results: Vec<EvalReport>,
    pub tuning: Vec<GridPoint>,
    pub provenance: Provenance,
    pub timestamp: Timestamp,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        method: &str,
        mode: Mode,
        seed: u64,
        precision: &str,
        retrain: bool,
        grid: Grid,
        outcome: RunOutcome<T>,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            method: method.to_string(),
            mode,
            seed,
            precision: precision.to_string(),
            retrain,
            grid,
            chosen: outcome.chosen,
            final_epochs: outcome.final_epochs,
            results: outcome.reports,
            tuning: outcome.tuning,
            provenance: outcome.provenance,
            timestamp,
        }
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    mode: &'a str,
    dataset: &'a str,
    split_id: &'a str,
    seed: u64,
    k: usize,
    acc_ts: f64,
    acc_tr: Option<f64>,
    h: Option<f64>,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One CSV row per (report, k).
pub fn write_summary(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in reports {
        for e in &r.results {
            w.serialize(SummaryRow {
                method: &e.method,
                mode: e.mode.as_str(),
                dataset: &r.provenance.dataset,
                split_id: &e.split_id,
                seed: e.seed,
                k: e.k,
                acc_ts: e.acc_ts,
                acc_tr: e.acc_tr,
                h: e.h,
            })?;
        }
    }
    if reports.iter().all(|r| r.results.is_empty()) {
        // keep the header even when nothing was evaluated
        w.write_record(["method", "mode", "dataset", "split_id", "seed", "k", "acc_ts", "acc_tr", "h"])?;
    }
    w.flush()?;
    Ok(())
}
