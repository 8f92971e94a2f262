//! In-memory dataset types shared by every generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

pub const SIDE: usize = 28;
pub const PLANE: usize = SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// File prefix used by the MNIST distribution.
    pub fn idx_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptSource {
    MnistStripes,
    EmnistStripes,
    CmnistLetters,
    Custom,
}

/// Images stored as `N × C × 28 × 28` floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl LabeledImageSet {
    pub fn new(channels: usize, images: Vec<f32>, labels: Vec<u8>, num_classes: usize, split: Split) -> Result<Self> {
        let set = LabeledImageSet { channels, images, labels, num_classes, split, seed: 0 };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        check_images(self.channels, &self.images, self.labels.len())?;
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(DataError::InvalidParam(format!("label {l} outside 0..{}", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * PLANE
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, SIDE, SIDE]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.item_len()..(i + 1) * self.item_len()]
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            channels: self.channels,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            seed: self.seed,
        }
    }
}

/// Balanced concept / non-concept examples (label 1 = concept).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub channels: usize,
    pub images: Vec<f32>,
    pub concept_labels: Vec<u8>,
    pub source: ConceptSource,
    /// Row of the base set each example was drawn from.
    pub origin: Vec<u32>,
    /// Stripe angle index per example, [`NO_STRIPES`] when unstriped. Empty for colour concepts.
    pub angle_index: Vec<u8>,
    /// True when the base set was assembled without any evaluation examples.
    pub disjoint_from_eval: bool,
}

pub const NO_STRIPES: u8 = u8::MAX;

impl ConceptDataset {
    pub fn validate(&self) -> Result<()> {
        check_images(self.channels, &self.images, self.concept_labels.len())?;
        if self.concept_labels.iter().any(|&l| l > 1) {
            return Err(DataError::InvalidParam("concept labels must be 0 or 1".into()));
        }
        let pos = self.concept_labels.iter().filter(|&&l| l == 1).count();
        let neg = self.concept_labels.len() - pos;
        if pos.abs_diff(neg) > 1 {
            return Err(DataError::InvalidParam(format!("concept set unbalanced: {pos} positive, {neg} negative")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.concept_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * PLANE
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, SIDE, SIDE]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.item_len()..(i + 1) * self.item_len()]
    }
}

/// Labelled images with a binary attribute; group id is `label * 2 + attribute`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub attributes: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
}

impl GroupedDataset {
    pub fn validate(&self) -> Result<()> {
        check_images(self.channels, &self.images, self.labels.len())?;
        if self.attributes.len() != self.labels.len() {
            return Err(DataError::InvalidParam("one attribute per example required".into()));
        }
        if self.attributes.iter().any(|&a| a > 1) {
            return Err(DataError::InvalidParam("attributes must be binary".into()));
        }
        if self.labels.iter().any(|&l| l as usize >= self.num_classes) {
            return Err(DataError::InvalidParam("label outside class range".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * 2
    }

    pub fn group(&self, i: usize) -> usize {
        self.labels[i] as usize * 2 + self.attributes[i] as usize
    }

    /// Example count per `(label, attribute)`, listing every representable group.
    pub fn group_counts(&self) -> BTreeMap<(u8, u8), usize> {
        let mut counts = BTreeMap::new();
        for y in 0..self.num_classes as u8 {
            for a in 0..2 {
                counts.insert((y, a), 0);
            }
        }
        for (&y, &a) in self.labels.iter().zip(&self.attributes) {
            *counts.get_mut(&(y, a)).expect("validated label") += 1;
        }
        counts
    }

    pub fn as_labeled(&self) -> LabeledImageSet {
        LabeledImageSet {
            channels: self.channels,
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            seed: 0,
        }
    }
}

fn check_images(channels: usize, images: &[f32], n: usize) -> Result<()> {
    if channels == 0 || images.len() != n * channels * PLANE {
        return Err(DataError::InvalidParam(format!(
            "{} pixel values do not form {n} images of {channels}x28x28",
            images.len()
        )));
    }
    if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DataError::InvalidParam(format!("pixel {p} outside [0, 1]")));
    }
    Ok(())
}
