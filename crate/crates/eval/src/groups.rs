//! Per-group and worst-group accuracy.

use dcr_datagen::GroupedDataset;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: u8,
    pub attribute: u8,
    pub size: usize,
    /// `None` for an empty group.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Every `(label, attribute)` cell, in label-major order.
    pub groups: Vec<GroupRow>,
    /// Minimum accuracy over nonempty groups.
    pub worst_group_accuracy: f64,
    pub worst_group: (u8, u8),
    pub overall_accuracy: f64,
}

/// Worst-group accuracy from raw labels and binary attributes over `num_classes x 2` cells.
pub fn group_accuracy(
    predictions: &[u8],
    labels: &[u8],
    attributes: &[u8],
    num_classes: usize,
) -> Result<GroupMetrics> {
    if labels.is_empty() {
        return Err(EvalError::InvalidInput("worst-group accuracy of an empty dataset".into()));
    }
    if predictions.len() != labels.len() || attributes.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} predictions, {} labels, {} attributes",
            predictions.len(),
            labels.len(),
            attributes.len()
        )));
    }
    let mut size = vec![[0usize; 2]; num_classes];
    let mut hits = vec![[0usize; 2]; num_classes];
    for ((&p, &y), &a) in predictions.iter().zip(labels).zip(attributes) {
        if y as usize >= num_classes || a > 1 {
            return Err(EvalError::InvalidInput(format!("example with label {y}, attribute {a}")));
        }
        size[y as usize][a as usize] += 1;
        hits[y as usize][a as usize] += usize::from(p == y);
    }
    let mut groups = Vec::with_capacity(num_classes * 2);
    let mut worst = (f64::INFINITY, (0, 0));
    for y in 0..num_classes {
        for a in 0..2 {
            let n = size[y][a];
            let accuracy = (n > 0).then(|| hits[y][a] as f64 / n as f64);
            if let Some(acc) = accuracy.filter(|&acc| acc < worst.0) {
                worst = (acc, (y as u8, a as u8));
            }
            groups.push(GroupRow { label: y as u8, attribute: a as u8, size: n, accuracy });
        }
    }
    let correct: usize = hits.iter().flatten().sum();
    Ok(GroupMetrics {
        groups,
        worst_group_accuracy: worst.0,
        worst_group: worst.1,
        overall_accuracy: correct as f64 / labels.len() as f64,
    })
}

pub fn worst_group_accuracy(predictions: &[u8], grouped: &GroupedDataset) -> Result<GroupMetrics> {
    group_accuracy(predictions, &grouped.labels, &grouped.attributes, grouped.num_classes)
}
