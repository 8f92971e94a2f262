//! Declarative dataset specs, as they appear in experiment configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{fingerprint, CacheKey, Dataset, DatasetCache};
use crate::dataset::{LabeledImageSet, Split};
use crate::error::{DataError, Result};
use crate::generators::{
    make_cmnist, make_cmnist_concept, make_concept_emnist, make_concept_mnist, make_dro_striped_mnist,
    make_striped_mnist, split_subset,
};
use crate::sources::{load_letters, load_mnist};

fn default_p_stripe() -> f64 {
    0.95
}
fn default_label_noise() -> f64 {
    0.25
}
fn default_color_corr() -> f64 {
    0.90
}
fn default_concept_size() -> usize {
    10_000
}

/// A generator and its parameters. `subset` keeps `n` training digits chosen by the data seed;
/// `exclude_subset` draws concepts only from the digits that subset left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Mnist {
        split: Split,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
    StripedMnist {
        split: Split,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
    DroStripedMnist {
        split: Split,
        #[serde(default = "default_p_stripe")]
        p_stripe: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
    ConceptMnist {
        #[serde(default = "default_concept_size")]
        size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exclude_subset: Option<usize>,
    },
    ConceptEmnist {
        #[serde(default = "default_concept_size")]
        size: usize,
    },
    Cmnist {
        split: Split,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default = "default_color_corr")]
        color_corr: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
    CmnistConcept {
        #[serde(default = "default_concept_size")]
        size: usize,
    },
}

pub const GENERATORS: &[&str] =
    &["mnist", "striped-mnist", "dro-striped-mnist", "concept-mnist", "concept-emnist", "cmnist", "cmnist-concept"];

fn rate(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DataError::InvalidParam(format!("{name} must lie in (0, 1), got {p}")));
    }
    Ok(())
}

impl DataSpec {
    pub fn generator(&self) -> &'static str {
        match self {
            DataSpec::Mnist { .. } => "mnist",
            DataSpec::StripedMnist { .. } => "striped-mnist",
            DataSpec::DroStripedMnist { .. } => "dro-striped-mnist",
            DataSpec::ConceptMnist { .. } => "concept-mnist",
            DataSpec::ConceptEmnist { .. } => "concept-emnist",
            DataSpec::Cmnist { .. } => "cmnist",
            DataSpec::CmnistConcept { .. } => "cmnist-concept",
        }
    }

    /// Range checks that do not need the source data.
    pub fn validate(&self) -> Result<()> {
        match *self {
            DataSpec::DroStripedMnist { p_stripe, .. } => rate("p_stripe", p_stripe),
            DataSpec::Cmnist { label_noise, color_corr, .. } => {
                rate("label_noise", label_noise)?;
                rate("color_corr", color_corr)
            }
            DataSpec::ConceptMnist { size, .. }
            | DataSpec::ConceptEmnist { size }
            | DataSpec::CmnistConcept { size }
                if size < 2 =>
            {
                Err(DataError::InvalidParam(format!("concept size must be at least 2, got {size}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_concept(&self) -> bool {
        matches!(self, DataSpec::ConceptMnist { .. } | DataSpec::ConceptEmnist { .. } | DataSpec::CmnistConcept { .. })
    }
}

/// A generated dataset and where it lives in the cache.
#[derive(Debug)]
pub struct Materialized {
    pub dataset: Dataset,
    pub path: Option<PathBuf>,
    pub from_cache: bool,
}

fn digits(root: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<LabeledImageSet> {
    let full = load_mnist(root, split)?;
    match subset {
        Some(n) => Ok(split_subset(&full, n, seed)?.0),
        None => Ok(full),
    }
}

/// Builds the dataset for `spec`, reusing the cache entry when one exists.
pub fn materialize(spec: &DataSpec, seed: u64, data_root: &Path, cache: Option<&DatasetCache>) -> Result<Materialized> {
    spec.validate()?;
    let base = match spec {
        DataSpec::Mnist { split, subset }
        | DataSpec::StripedMnist { split, subset }
        | DataSpec::DroStripedMnist { split, subset, .. }
        | DataSpec::Cmnist { split, subset, .. } => digits(data_root, *split, *subset, seed)?,
        DataSpec::ConceptMnist { exclude_subset, .. } => {
            let train = load_mnist(data_root, Split::Train)?;
            match exclude_subset {
                Some(n) => split_subset(&train, *n, seed)?.1,
                None => train,
            }
        }
        DataSpec::ConceptEmnist { .. } | DataSpec::CmnistConcept { .. } => load_letters(data_root, Split::Train)?,
    };
    let key = CacheKey {
        generator: spec.generator().into(),
        params: serde_json::to_value(spec).expect("spec serialises"),
        seed,
        sources: vec![fingerprint(&base)],
    };
    if let Some(c) = cache {
        if let Some(ds) = c.load(&key)? {
            return Ok(Materialized { dataset: ds, path: Some(c.path_for(&key)), from_cache: true });
        }
    }
    let dataset = generate(spec, &base, seed)?;
    let path = cache.map(|c| c.store(&key, &dataset)).transpose()?;
    Ok(Materialized { dataset, path, from_cache: false })
}

/// Runs the generator for `spec` on an already loaded base set.
pub fn generate(spec: &DataSpec, base: &LabeledImageSet, seed: u64) -> Result<Dataset> {
    Ok(match *spec {
        DataSpec::Mnist { .. } => Dataset::Labeled(LabeledImageSet { seed, ..base.clone() }),
        DataSpec::StripedMnist { .. } => Dataset::Labeled(make_striped_mnist(base, seed)?),
        DataSpec::DroStripedMnist { p_stripe, .. } => Dataset::Grouped(make_dro_striped_mnist(base, p_stripe, seed)?),
        DataSpec::ConceptMnist { size, .. } => Dataset::Concept(make_concept_mnist(base, size, seed)?),
        DataSpec::ConceptEmnist { size } => Dataset::Concept(make_concept_emnist(base, size, seed)?),
        DataSpec::Cmnist { label_noise, color_corr, .. } => {
            Dataset::Grouped(make_cmnist(base, label_noise, color_corr, seed)?)
        }
        DataSpec::CmnistConcept { size } => Dataset::Concept(make_cmnist_concept(base, size, seed)?),
    })
}
