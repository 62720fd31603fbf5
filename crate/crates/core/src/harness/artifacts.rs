use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunOutput, PROMPT_GROUP};
use crate::backbone::BACKBONE_GROUPS;
use crate::checkpoint;
use crate::diagnostics::{drift_csv, drift_stats, DriftSnapshot};
use crate::error::{Error, Result};
use crate::metrics::{average_bleu, forgetting};
use crate::prompt_pool::POOL_GROUP;

pub const SNAPSHOTS_FILE: &str = "pool_snapshots.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub use_er: bool,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub avg_bleu_val: f64,
    pub avg_bleu_test: f64,
    /// Absent for single-task streams.
    pub forget_val: Option<f64>,
    pub forget_test: Option<f64>,
    pub epochs_run: Vec<usize>,
    pub backbone_unchanged: bool,
}

impl RunSummary {
    pub fn of(out: &RunOutput) -> Result<Self> {
        let v = out.config.forget_variant;
        let n = out.val.n();
        Ok(Self {
            method: out.config.method.to_string(),
            use_er: out.config.use_er,
            buffer_capacity: out.config.buffer_capacity,
            seed: out.config.seed,
            tasks: out.task_names.clone(),
            avg_bleu_val: average_bleu(&out.val)?,
            avg_bleu_test: average_bleu(&out.test)?,
            forget_val: if n >= 2 { Some(forgetting(&out.val, v)?) } else { None },
            forget_test: if n >= 2 { Some(forgetting(&out.test, v)?) } else { None },
            epochs_run: out.epochs_run.clone(),
            backbone_unchanged: out.backbone_before == out.backbone_after,
        })
    }
}

/// Writes every artifact of a finished run into `dir`, creating it.
pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&out.config)?)?;
    fs::write(dir.join("metrics_val.csv"), out.val.to_csv())?;
    fs::write(dir.join("metrics_test.csv"), out.test.to_csv())?;
    let summary = RunSummary::of(out)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut events = fs::File::create(dir.join("events.jsonl"))?;
    for e in &out.events {
        writeln!(events, "{}", serde_json::to_string(e)?)?;
    }

    let mut groups: Vec<&str> = BACKBONE_GROUPS.to_vec();
    groups.extend([PROMPT_GROUP, POOL_GROUP]);
    let mut records = checkpoint::store_records(&out.store, &groups);
    if let Some(pool) = &out.pool {
        records.extend(pool.assignment_records());
    }
    checkpoint::write(&dir.join("final.ppcl"), &records)?;

    if !out.snapshots.is_empty() {
        fs::write(dir.join(SNAPSHOTS_FILE), serde_json::to_string(&out.snapshots)?)?;
        write_diagnostics(dir, &out.snapshots, out.task_names.len())?;
    }
    Ok(summary)
}

pub fn read_snapshots(dir: &Path) -> Result<Vec<DriftSnapshot>> {
    let path = dir.join(SNAPSHOTS_FILE);
    if !path.exists() {
        return Err(Error::Contract(format!(
            "{} has no pool snapshots; only pp and pp_tf runs record them",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Per-stage PCA CSVs and the drift table under `dir/diagnostics`.
pub fn write_diagnostics(dir: &Path, snapshots: &[DriftSnapshot], n_tasks: usize) -> Result<Vec<PathBuf>> {
    let out = dir.join("diagnostics");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for (k, snap) in snapshots.iter().enumerate() {
        let p = out.join(format!("stage_{k}_{}.csv", snap.stage));
        fs::write(&p, snap.to_csv())?;
        written.push(p);
    }
    if snapshots.len() >= 2 {
        let p = out.join("drift.csv");
        fs::write(&p, drift_csv(&drift_stats(snapshots, n_tasks)?))?;
        written.push(p);
    }
    Ok(written)
}
