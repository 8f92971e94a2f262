//! Run directory: `config.json`, `metrics.jsonl`, `checkpoints/`, `final_report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dcr_core::Scalar;
use dcr_nets::{save_checkpoint, Model};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub downstream: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    /// `|v0|^2` at the end of the epoch.
    pub cav_norm_sq: f64,
    pub concept_bce: f64,
    pub condition_proxy_min: f64,
    /// Steps whose condition proxy fell below the configured floor.
    pub unstable_steps: usize,
}

/// One line of `metrics.jsonl`. Loss components are means over the epoch's steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossBreakdown,
    pub train_accuracy: f64,
    pub eval_accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary_bce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// In-memory log of a training run; the report keeps the last epoch's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    /// Method as configured.
    pub method: String,
    /// Label for reports (`erm` for a concept-removal run with `gamma = 0`).
    pub label: String,
    pub status: RunStatus,
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `(epoch, value)` for the training accuracy or a named evaluation set.
    pub fn series(&self, name: &str) -> Option<Vec<(usize, f64)>> {
        if name == "train" {
            return Some(self.epochs.iter().map(|e| (e.epoch, e.train_accuracy)).collect());
        }
        self.epochs.iter().map(|e| e.eval_accuracy.get(name).map(|&a| (e.epoch, a))).collect()
    }

    /// Reads a log back from a run directory.
    pub fn load(dir: &Path) -> Result<RunLog> {
        let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(FINAL_REPORT))?)?;
        let mut epochs = Vec::new();
        for line in fs::read_to_string(dir.join(METRICS))?.lines().filter(|l| !l.trim().is_empty()) {
            epochs.push(serde_json::from_str(line)?);
        }
        let field = |k: &str| report.get(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
        Ok(RunLog {
            method: field("method"),
            label: field("label"),
            status: serde_json::from_value(report["status"].clone())?,
            epochs,
            failure: report.get("failure").and_then(|v| v.as_str()).map(str::to_string),
        })
    }
}

pub const CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const FINAL_REPORT: &str = "final_report.json";
pub const CHECKPOINTS: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory. An existing non-empty directory is an error unless `force`,
    /// in which case its contents are removed first.
    pub fn create(root: &Path, force: bool) -> Result<RunDir> {
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            if !force {
                return Err(TrainError::Config(format!(
                    "run directory {} is not empty; pass --force to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root)?;
        }
        fs::create_dir_all(root.join(CHECKPOINTS))?;
        fs::File::create(root.join(METRICS))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<RunDir> {
        if !root.join(CONFIG).is_file() {
            return Err(TrainError::InvalidInput(format!("{} has no {CONFIG}", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINTS).join(LAST_CHECKPOINT)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        let tmp = self.root.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, self.root.join(name))?;
        Ok(())
    }

    pub fn append_metrics(&self, record: &EpochRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(self.root.join(METRICS))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn save_model<T: Scalar>(&self, model: &Model<T>, seed: u64, epoch: usize, keep: bool) -> Result<()> {
        let meta = serde_json::json!({ "epoch": epoch });
        save_checkpoint(&self.last_checkpoint(), model, seed, meta.clone())?;
        if keep {
            let path = self.root.join(CHECKPOINTS).join(format!("epoch-{epoch:04}.ckpt"));
            save_checkpoint(&path, model, seed, meta)?;
        }
        Ok(())
    }
}
