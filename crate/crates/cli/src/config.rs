//! Versioned experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dcr_datagen::DataSpec;
use dcr_nets::{list_layer_dims, ModelConfig};
use dcr_trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Accuracy on every evaluation set.
    Accuracy,
    /// Per-group and worst-group accuracy on grouped evaluation sets.
    WorstGroup,
    /// Demographic parity and equalized odds on binary grouped evaluation sets.
    Fairness,
    /// Sensitivities and TCAV scores of a CAV fitted at every probe.
    Tcav,
    /// Held-out accuracy of a linear concept classifier at every probe.
    ProbeAccuracy,
    /// Last-epoch gap between striped-train and clean-test accuracy.
    Removal,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::Accuracy, Metric::WorstGroup, Metric::Fairness, Metric::Tcav, Metric::ProbeAccuracy, Metric::Removal];

    pub fn parse(name: &str) -> Result<Metric> {
        serde_json::from_value(serde_json::Value::String(name.trim().into())).map_err(|_| {
            let known: Vec<String> = Metric::ALL.iter().map(|m| m.name()).collect();
            CliError::Validation(format!("unknown metric '{name}' (known: {})", known.join(", ")))
        })
    }

    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed for subsets, stripes and colours; independent of the training seed.
    #[serde(default)]
    pub seed: u64,
    pub train: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<DataSpec>,
    /// Named evaluation sets, scored after every epoch.
    #[serde(default)]
    pub eval: BTreeMap<String, DataSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Evaluation set holding clean test images for the removal diagnostic.
    pub clean_test_set: String,
    /// Largest train/test gap, in points, counted as a successful removal.
    pub gap_threshold: f64,
    /// Ridge strength of the concept probes; the probe's own lambda when absent.
    pub probe_lambda: Option<f64>,
    /// Cap on the balanced concept examples used to fit evaluation CAVs.
    pub max_concept_examples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            clean_test_set: "test".into(),
            gap_threshold: dcr_eval::DEFAULT_GAP_THRESHOLD,
            probe_lambda: None,
            max_concept_examples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub eval: Vec<Metric>,
    #[serde(default)]
    pub eval_options: EvalOptions,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "cpu")]
    pub device: String,
    /// Run directory, relative to the working directory.
    pub output_dir: PathBuf,
    /// Command-line overrides already applied to the fields above.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, serde_json::Value>,
}

fn cpu() -> String {
    "cpu".into()
}

/// Command-line overrides of config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub device: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.trainer.seed = seed;
            self.overrides.insert("trainer.seed".into(), seed.into());
        }
        if let Some(epochs) = o.epochs {
            self.trainer.epochs = epochs;
            self.overrides.insert("trainer.epochs".into(), epochs.into());
        }
        if let Some(device) = &o.device {
            self.device = device.clone();
            self.overrides.insert("device".into(), device.clone().into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.device != "cpu" {
            return bad(format!("device '{}' is not available; this build runs on 'cpu' only", self.device));
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty".into());
        }
        self.trainer.validate()?;
        let m = &self.model;
        let table = list_layer_dims(&m.architecture, m.num_classes, m.input_shape)?;
        let hidden = table.layers.len() - 1;
        for (i, p) in m.probe_points.iter().enumerate() {
            if p.layer == 0 || p.layer > hidden {
                return bad(format!(
                    "model.probe_points[{i}]: layer {} does not exist; {} has hidden layers 1..={hidden}",
                    p.layer,
                    m.architecture.name()
                ));
            }
        }
        if self.data.train.is_concept() {
            return bad(format!("data.train: generator '{}' produces a concept set", self.data.train.generator()));
        }
        if let Some(c) = &self.data.concept {
            if !c.is_concept() {
                return bad(format!("data.concept: generator '{}' is not a concept generator", c.generator()));
            }
        }
        for (name, spec) in &self.data.eval {
            if name == "train" || name.is_empty() {
                return bad(format!("data.eval: '{name}' is reserved"));
            }
            if spec.is_concept() {
                return bad(format!("data.eval.{name}: generator '{}' produces a concept set", spec.generator()));
            }
        }
        let t = &self.trainer;
        match t.method {
            Method::Dcr if t.gamma > 0.0 => {
                if m.probe_points.is_empty() {
                    return bad("trainer.method dcr needs at least one model.probe_points entry".into());
                }
                if self.data.concept.is_none() {
                    return bad("trainer.method dcr needs data.concept".into());
                }
            }
            Method::Adversarial if !grouped(&self.data.train) => {
                return bad(format!(
                    "trainer.method adversarial needs concept annotations; generator '{}' has none",
                    self.data.train.generator()
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Generators whose examples carry a binary attribute.
pub fn grouped(spec: &DataSpec) -> bool {
    matches!(spec, DataSpec::DroStripedMnist { .. } | DataSpec::Cmnist { .. })
}
