//! Held-out accuracy of a linear concept classifier on probe activations.

use dcr_core::{fit_cav_exact, matrix::dot, Matrix, RepresentationBatch, Scalar};
use dcr_datagen::ConceptDataset;
use dcr_nets::{Depth, Model, NormMode, ProbePoint};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

pub const FIT_FRACTION: f64 = 0.7;
pub const MIN_PER_CLASS: usize = 20;
const FIT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub layer: usize,
    /// Mean of the per-class held-out accuracies.
    pub balanced_accuracy: f64,
    pub chance: f64,
    pub fit_examples: usize,
    pub heldout_examples: usize,
}

/// Seeded stratified split: `(fit, heldout)`. The fit part is trimmed to equal class counts.
pub fn stratified_split(labels: &[u8], fit_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        let slot = by_class.get_mut(l as usize).ok_or_else(|| EvalError::InvalidInput(format!("concept label {l}")))?;
        slot.push(i);
    }
    let cut = |n: usize| (n as f64 * fit_fraction).round() as usize;
    let k = cut(by_class[0].len()).min(cut(by_class[1].len()));
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for (class, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let n_fit = k.min(idx.len());
        let held_n = idx.len() - cut(idx.len()).min(idx.len());
        if n_fit < MIN_PER_CLASS || held_n < MIN_PER_CLASS {
            return Err(EvalError::Data(format!(
                "concept class {class}: {n_fit} fit and {held_n} held-out examples, need {MIN_PER_CLASS} of each"
            )));
        }
        fit.extend_from_slice(&idx[..n_fit]);
        held.extend_from_slice(&idx[idx.len() - held_n..]);
    }
    fit.sort_unstable();
    held.sort_unstable();
    Ok((fit, held))
}

/// Balanced accuracy of `sign(v.h)` against binary labels.
pub fn balanced_accuracy<T: Scalar>(h: &Matrix<T>, labels: &[u8], v: &[T]) -> Result<f64> {
    let mut hit = [0usize; 2];
    let mut count = [0usize; 2];
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        count[c] += 1;
        hit[c] += usize::from((dot(h.row(i), v) > T::zero()) == (l == 1));
    }
    if count.contains(&0) {
        return Err(EvalError::Data("balanced accuracy needs both classes".into()));
    }
    Ok(0.5 * (hit[0] as f64 / count[0] as f64 + hit[1] as f64 / count[1] as f64))
}

/// Exact CAV of `(h, labels)`, fitted in double precision.
pub fn fit_concept_vector<T: Scalar>(h: &Matrix<T>, labels: &[u8], lambda: f64) -> Result<Vec<f64>> {
    let batch = RepresentationBatch::new(h.cast::<f64>(), labels.to_vec())?;
    Ok(fit_cav_exact(&batch, lambda, FIT_TOL)?.into_vec())
}

/// Fits a ridge-logistic CAV on the fit rows and scores it on the held-out rows.
pub fn linear_probe_accuracy<T: Scalar>(
    h: &Matrix<T>,
    labels: &[u8],
    lambda: f64,
    seed: u64,
) -> Result<(f64, usize, usize)> {
    if h.rows() != labels.len() {
        return Err(EvalError::InvalidInput(format!("{} activation rows for {} labels", h.rows(), labels.len())));
    }
    let (fit, held) = stratified_split(labels, FIT_FRACTION, seed)?;
    let rows = |idx: &[usize]| Matrix::from_fn(idx.len(), h.cols(), |i, j| h[(idx[i], j)].to_f64_lossy());
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let v = fit_concept_vector(&rows(&fit), &pick(&fit), lambda)?;
    Ok((balanced_accuracy(&rows(&held), &pick(&held), &v)?, fit.len(), held.len()))
}

/// Probe activations of a concept set, running batch-norm statistics.
pub fn probe_activations<T: Scalar>(
    model: &Model<T>,
    probe: &ProbePoint,
    set: &ConceptDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Matrix<T>> {
    let idx = indices;
    let mut out = Matrix::zeros(0, model.probe_dim(probe));
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = dcr_trainer::gather::<T>(&set.images, set.shape(), chunk)?;
        let trace = model.forward(&x, NormMode::Running, Depth::Layer(probe.layer))?;
        out.append_rows(&model.probe_activations(&trace, probe)?)?;
    }
    Ok(out)
}

/// Up to `max` indices of a concept set, balanced between the classes and seeded.
pub fn balanced_subsample(labels: &[u8], max: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let k = pos.len().min(neg.len()).min(max / 2);
    let mut out: Vec<usize> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    out.sort_unstable();
    out
}

/// Balanced held-out accuracy of a CAV at `probe`, on at most `max_examples` concept examples.
pub fn concept_probe_accuracy<T: Scalar>(
    model: &Model<T>,
    probe: &ProbePoint,
    set: &ConceptDataset,
    lambda: f64,
    max_examples: usize,
    seed: u64,
) -> Result<ProbeAccuracy> {
    let idx = balanced_subsample(&set.concept_labels, max_examples, seed);
    let h = probe_activations(model, probe, set, &idx, 256)?;
    let labels: Vec<u8> = idx.iter().map(|&i| set.concept_labels[i]).collect();
    let (acc, fit_examples, heldout_examples) = linear_probe_accuracy(&h, &labels, lambda, seed)?;
    Ok(ProbeAccuracy { layer: probe.layer, balanced_accuracy: acc, chance: 0.5, fit_examples, heldout_examples })
}
