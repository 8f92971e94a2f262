//! Directional derivatives of logits along a concept vector, and TCAV scores.

use dcr_core::{Matrix, Scalar};
use dcr_datagen::LabeledImageSet;
use dcr_nets::{Depth, Model, NormMode, Pooling, ProbePoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// `S_C(x) = d f_target(h(x)) / dh . v_C` with `h` the flattened output of `layer`,
/// evaluated with running batch-norm statistics.
pub fn sensitivity<T: Scalar>(
    model: &Model<T>,
    inputs: &Tensor<T>,
    layer: usize,
    v_c: &[T],
    target: usize,
) -> Result<Vec<f64>> {
    if layer == 0 || layer > model.num_units() {
        return Err(EvalError::InvalidInput(format!("layer {layer} is not a hidden layer")));
    }
    let dim: usize = model.unit_shape(layer).iter().product();
    if v_c.len() != dim {
        return Err(EvalError::InvalidInput(format!(
            "concept vector of length {} for layer {layer} of width {dim}",
            v_c.len()
        )));
    }
    let grads = target_gradients(model, inputs, layer, target)?;
    Ok((0..grads.rows()).map(|i| dcr_core::matrix::dot(grads.row(i), v_c).to_f64_lossy()).collect())
}

/// [`sensitivity`] for a CAV fitted at a probe point. A pooled CAV moves every spatial
/// position of channel `c` by `v_c`, which shifts the pooled activation by exactly `v`.
pub fn probe_sensitivity<T: Scalar>(
    model: &Model<T>,
    inputs: &Tensor<T>,
    probe: &ProbePoint,
    v_c: &[T],
    target: usize,
) -> Result<Vec<f64>> {
    match probe.pooling {
        Pooling::None => sensitivity(model, inputs, probe.layer, v_c, target),
        Pooling::SpatialAverage => {
            let [c, h, w] = model.unit_shape(probe.layer);
            if v_c.len() != c {
                return Err(EvalError::InvalidInput(format!(
                    "pooled concept vector of length {} for {c} channels",
                    v_c.len()
                )));
            }
            let full: Vec<T> = v_c.iter().flat_map(|&x| std::iter::repeat_n(x, h * w)).collect();
            sensitivity(model, inputs, probe.layer, &full, target)
        }
    }
}

fn target_gradients<T: Scalar>(model: &Model<T>, inputs: &Tensor<T>, layer: usize, target: usize) -> Result<Matrix<T>> {
    let classes = model.config().num_classes;
    if target >= classes {
        return Err(EvalError::InvalidInput(format!("target logit {target} of a {classes}-class model")));
    }
    let trace = model.forward(inputs, NormMode::Running, Depth::Full)?;
    let dlogits = Matrix::from_fn(inputs.batch(), classes, |_, j| if j == target { T::one() } else { T::zero() });
    Ok(model.layer_gradient(&trace, layer, &dlogits)?)
}

/// Fraction of strictly positive sensitivities; exact zeros count as non-positive.
pub fn tcav_score(sensitivities: &[f64]) -> Result<f64> {
    if sensitivities.is_empty() {
        return Err(EvalError::InvalidInput("TCAV score of an empty sample".into()));
    }
    if let Some(x) = sensitivities.iter().find(|x| x.is_nan()) {
        return Err(EvalError::InvalidInput(format!("non-finite sensitivity {x}")));
    }
    Ok(sensitivities.iter().filter(|&&s| s > 0.0).count() as f64 / sensitivities.len() as f64)
}

/// Percentile bootstrap interval of the TCAV score.
pub fn tcav_bootstrap(sensitivities: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    tcav_score(sensitivities)?;
    if resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(EvalError::InvalidInput("bootstrap needs resamples > 0 and level in (0, 1)".into()));
    }
    let n = sensitivities.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| sensitivities[rng.random_range(0..n)] > 0.0).count() as f64 / n as f64)
        .collect();
    scores.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| scores[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavScore {
    pub class: u8,
    pub examples: usize,
    pub score: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub concept: String,
    pub layer: usize,
    /// Sensitivity of each example's own-class logit.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub tcav: Vec<TcavScore>,
}

/// Sensitivities of every example towards its own class, with per-class TCAV scores.
pub fn sensitivity_report<T: Scalar>(
    model: &Model<T>,
    set: &LabeledImageSet,
    probe: &ProbePoint,
    v_c: &[T],
    concept: &str,
    seed: u64,
    batch_size: usize,
) -> Result<SensitivityReport> {
    if set.is_empty() {
        return Err(EvalError::InvalidInput("sensitivity report on an empty set".into()));
    }
    let mut values = vec![0.0; set.len()];
    for class in 0..model.config().num_classes as u8 {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let x = dcr_trainer::gather::<T>(&set.images, set.shape(), chunk)?;
            for (&i, s) in chunk.iter().zip(probe_sensitivity(model, &x, probe, v_c, class as usize)?) {
                values[i] = s;
            }
        }
    }
    let mut tcav = Vec::new();
    for class in 0..model.config().num_classes as u8 {
        let s: Vec<f64> = (0..set.len()).filter(|&i| set.labels[i] == class).map(|i| values[i]).collect();
        if s.is_empty() {
            continue;
        }
        let (ci_low, ci_high) = tcav_bootstrap(&s, BOOTSTRAP_RESAMPLES, 0.95, seed.wrapping_add(class as u64))?;
        tcav.push(TcavScore {
            class,
            examples: s.len(),
            score: tcav_score(&s)?,
            ci_low,
            ci_high,
            mean_sensitivity: s.iter().sum::<f64>() / s.len() as f64,
        });
    }
    Ok(SensitivityReport { concept: concept.into(), layer: probe.layer, values, labels: set.labels.clone(), tcav })
}
