//! Epoch loops for concept removal and the two baselines.

use dcr_core::{CavError, Scalar};
use dcr_datagen::{ConceptDataset, LabeledImageSet};
use dcr_nets::{Depth, Model, NormMode};
use serde_json::json;

use crate::batch::{epoch_batches, gather, labeled_batch, Batch, ConceptSampler};
use crate::config::{Method, TrainConfig};
use crate::error::{Result, TrainError};
use crate::loss::{argmax, LinearAdversary};
use crate::optim::Optimizer;
use crate::run::{EpochRecord, LossBreakdown, ProbeRecord, RunDir, RunLog, RunStatus, FINAL_REPORT};
use crate::update::{adversarial_update, dcr_update, erm_update, init_probe_states, ProbeRuntimeState, StepMetrics};

/// A named evaluation set scored after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub set: &'a LabeledImageSet,
}

/// Trained model (from the last epoch) and its log.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: RunLog,
}

/// Predicted classes with running batch-norm statistics.
pub fn predict<T: Scalar>(model: &Model<T>, set: &LabeledImageSet, batch_size: usize) -> Result<Vec<u8>> {
    check_shape(model, set.shape(), "evaluation")?;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = gather::<T>(&set.images, set.shape(), chunk)?;
        let trace = model.forward(&x, NormMode::Running, Depth::Full)?;
        let logits = trace.logits.as_ref().expect("full pass has logits");
        out.extend((0..logits.rows()).map(|i| argmax(logits.row(i)) as u8));
    }
    Ok(out)
}

pub fn accuracy<T: Scalar>(model: &Model<T>, set: &LabeledImageSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(TrainError::InvalidInput("accuracy of an empty set".into()));
    }
    let pred = predict(model, set, batch_size)?;
    Ok(pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count() as f64 / set.len() as f64)
}

fn check_shape<T: Scalar>(model: &Model<T>, shape: [usize; 3], what: &str) -> Result<()> {
    let want = model.config().input_shape;
    if shape != want {
        return Err(TrainError::InvalidInput(format!("{what} images have shape {shape:?}, model expects {want:?}")));
    }
    Ok(())
}

/// Verifies that every probe reads a batch-normalised output: in batch mode, undoing the
/// affine map must leave each channel with zero mean and variance at most one.
pub fn check_probe_batchnorm<T: Scalar>(model: &Model<T>, probe_batch: &Batch<T>) -> Result<()> {
    let probes = &model.config().probe_points;
    let Some(depth) = probes.iter().map(|p| p.layer).max() else { return Ok(()) };
    if let Some(p) = probes.iter().find(|p| !p.has_batchnorm) {
        return Err(TrainError::Config(format!("probe at layer {} is not batch-normalised", p.layer)));
    }
    let trace = model.forward(&probe_batch.x, NormMode::Batch, Depth::Layer(depth))?;
    let params = model.params();
    let affine = |layer: usize, suffix: &str| {
        let name = format!("{}.bn.{suffix}", model.unit_name(layer));
        model.layout().iter().find(|e| e.name == name).map(|e| &params[e.offset..e.offset + e.len])
    };
    for p in probes {
        let out = trace.output(p.layer);
        let (n, c, plane) = (out.batch(), out.channels(), out.plane());
        let (gamma, beta) = (affine(p.layer, "weight"), affine(p.layer, "bias"));
        for ch in 0..c {
            let g = gamma.map_or(1.0, |g| g[ch].to_f64_lossy());
            let b = beta.map_or(0.0, |b| b[ch].to_f64_lossy());
            if g.abs() < 1e-6 {
                continue;
            }
            let vals = (0..n)
                .flat_map(|i| out.item(i)[ch * plane..(ch + 1) * plane].iter().map(|v| (v.to_f64_lossy() - b) / g));
            let (mut s, mut s2) = (0.0, 0.0);
            for v in vals {
                s += v;
                s2 += v * v;
            }
            let count = (n * plane) as f64;
            let (mean, var) = (s / count, s2 / count - (s / count).powi(2));
            if mean.abs() > 1e-2 || var > 1.0 + 1e-2 {
                return Err(TrainError::Config(format!(
                    "probe at layer {} channel {ch} is not batch-normalised (mean {mean:.3e}, variance {var:.3e})",
                    p.layer
                )));
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    losses: LossBreakdown,
    probes: Vec<ProbeRecord>,
    adv_bce: Option<f64>,
    adv_acc: Option<f64>,
}

impl EpochAcc {
    fn add(&mut self, m: &StepMetrics, floor: f64) {
        self.steps += 1;
        self.losses.total += m.total;
        self.losses.downstream += m.downstream;
        self.losses.adversarial += m.adversarial;
        self.losses.reconstruction += m.reconstruction;
        if self.probes.is_empty() {
            self.probes = m
                .probes
                .iter()
                .map(|p| ProbeRecord { layer: p.layer, condition_proxy_min: f64::INFINITY, ..Default::default() })
                .collect();
        }
        for (r, p) in self.probes.iter_mut().zip(&m.probes) {
            r.cav_norm_sq = p.cav_norm_sq;
            r.concept_bce += p.concept_bce;
            r.condition_proxy_min = r.condition_proxy_min.min(p.condition_proxy);
            r.unstable_steps += usize::from(p.condition_proxy < floor);
        }
        if let Some(b) = m.adversary_bce {
            *self.adv_bce.get_or_insert(0.0) += b;
        }
        if let Some(a) = m.adversary_accuracy {
            *self.adv_acc.get_or_insert(0.0) += a;
        }
    }

    fn finish(mut self, epoch: usize) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let l = &mut self.losses;
        for x in [&mut l.total, &mut l.downstream, &mut l.adversarial, &mut l.reconstruction] {
            *x /= n;
        }
        for p in &mut self.probes {
            p.concept_bce /= n;
        }
        EpochRecord {
            epoch,
            steps: self.steps,
            losses: self.losses,
            probes: self.probes,
            adversary_bce: self.adv_bce.map(|b| b / n),
            adversary_accuracy: self.adv_acc.map(|a| a / n),
            ..Default::default()
        }
    }
}

fn write_report(run: Option<&RunDir>, log: &RunLog, cfg: &TrainConfig) -> Result<()> {
    let Some(run) = run else { return Ok(()) };
    let report = json!({
        "method": log.method,
        "label": log.label,
        "status": log.status,
        "epochs_completed": log.epochs.len(),
        "epochs_requested": cfg.epochs,
        "seed": cfg.seed,
        "final": log.last(),
        "failure": log.failure,
    });
    run.write_json(FINAL_REPORT, &report)
}

/// Shared epoch loop. `step` performs one update on the batch with the given training indices.
fn run_epochs<T: Scalar>(
    mut model: Model<T>,
    train: &LabeledImageSet,
    evals: &[EvalSet<'_>],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
    mut step: impl FnMut(&mut Model<T>, &mut Optimizer<T>, &Batch<T>, &[usize]) -> Result<StepMetrics>,
) -> Result<TrainOutcome<T>> {
    let mut log = RunLog {
        method: cfg.method.name().into(),
        label: cfg.effective_method().name().into(),
        status: RunStatus::Completed,
        epochs: Vec::new(),
        failure: None,
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.num_params());
    if let Some(run) = run {
        run.save_model(&model, cfg.seed, 0, false)?;
    }
    for epoch in 1..=cfg.epochs {
        let mut acc = EpochAcc::default();
        for (i, idx) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let batch = labeled_batch::<T>(train, idx)?;
            let outcome = match step(&mut model, &mut opt, &batch, idx) {
                Ok(_) if model.params().iter().any(|p| !p.is_finite()) => Err(TrainError::Divergence {
                    epoch,
                    step: i + 1,
                    diagnostics: "non-finite parameters after the update".into(),
                }),
                // lambda > 0 keeps every finite CAV system positive definite and solvable
                Err(TrainError::Cav(e @ (CavError::NotPositiveDefinite { .. } | CavError::Convergence { .. }))) => {
                    Err(TrainError::Divergence { epoch, step: i + 1, diagnostics: format!("CAV fit broke down: {e}") })
                }
                other => other,
            };
            match outcome {
                Ok(m) => acc.add(&m, cfg.stability_floor),
                Err(TrainError::Divergence { diagnostics, .. }) => {
                    let err = TrainError::Divergence { epoch, step: i + 1, diagnostics };
                    log.status = RunStatus::Diverged;
                    log.failure = Some(err.to_string());
                    log::error!("{err}");
                    write_report(run, &log, cfg)?;
                    return Err(err);
                }
                Err(e) => return Err(e),
            }
        }
        let mut rec = acc.finish(epoch);
        for p in rec.probes.iter().filter(|p| p.unstable_steps > 0) {
            log::warn!(
                "epoch {epoch}: probe at layer {} had condition proxy {:.3e} below {:.1e} on {} steps; consider more cav_steps",
                p.layer,
                p.condition_proxy_min,
                cfg.stability_floor,
                p.unstable_steps
            );
        }
        rec.train_accuracy = accuracy(&model, train, cfg.eval_batch_size)?;
        for e in evals {
            rec.eval_accuracy.insert(e.name.to_string(), accuracy(&model, e.set, cfg.eval_batch_size)?);
        }
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} {}",
            rec.losses.total,
            rec.train_accuracy,
            rec.eval_accuracy.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(" ")
        );
        if let Some(run) = run {
            run.append_metrics(&rec)?;
            let keep = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            run.save_model(&model, cfg.seed, epoch, keep)?;
        }
        log.epochs.push(rec);
    }
    write_report(run, &log, cfg)?;
    Ok(TrainOutcome { model, log })
}

fn prepare<T: Scalar>(
    model: &Model<T>,
    train: &LabeledImageSet,
    evals: &[EvalSet<'_>],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    train.validate()?;
    check_shape(model, train.shape(), "training")?;
    if train.len() < 2 {
        return Err(TrainError::InvalidInput("training set needs at least two examples".into()));
    }
    let classes = model.config().num_classes;
    if let Some(&y) = train.labels.iter().find(|&&y| y as usize >= classes) {
        return Err(TrainError::InvalidInput(format!("training label {y} for a {classes}-class model")));
    }
    for e in evals {
        check_shape(model, e.set.shape(), e.name)?;
    }
    Ok(())
}

/// Deep concept removal: downstream loss plus `gamma` times the surrogate penalty at every probe.
pub fn train_dcr<T: Scalar>(
    model: Model<T>,
    train: &LabeledImageSet,
    concept: &ConceptDataset,
    evals: &[EvalSet<'_>],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome<T>> {
    if cfg.method != Method::Dcr {
        return Err(TrainError::Config(format!("train_dcr called with method {}", cfg.method.name())));
    }
    prepare(&model, train, evals, cfg)?;
    concept.validate()?;
    check_shape(&model, concept.shape(), "concept")?;
    let mut states: Vec<ProbeRuntimeState<T>> = init_probe_states(&model, cfg)?;
    if states.is_empty() {
        return Err(TrainError::Config("concept removal needs at least one probe point".into()));
    }
    let mut sampler = ConceptSampler::new(concept, cfg.seed)?;
    // the guard batch comes from its own stream so the training sampler is untouched
    let mut guard =
        ConceptSampler::new(concept, dcr_datagen::derive_seed(cfg.seed, crate::batch::stream::CONCEPT_EVAL))?;
    check_probe_batchnorm(&model, &guard.next_batch::<T>(concept, cfg.batch_size)?)?;
    run_epochs(model, train, evals, cfg, run, |model, opt, batch, _| {
        let concept_batches =
            (0..cfg.cav_steps).map(|_| sampler.next_batch(concept, cfg.batch_size)).collect::<Result<Vec<_>>>()?;
        dcr_update(model, opt, batch, &concept_batches, cfg, &mut states)
    })
}

/// Plain supervised training; `gamma` and the probes are ignored.
pub fn train_erm<T: Scalar>(
    model: Model<T>,
    train: &LabeledImageSet,
    evals: &[EvalSet<'_>],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome<T>> {
    prepare(&model, train, evals, cfg)?;
    run_epochs(model, train, evals, cfg, run, |model, opt, batch, _| erm_update(model, opt, batch, cfg))
}

/// Alternating adversary on the last hidden representation, using per-example concept annotations.
pub fn train_adversarial_baseline<T: Scalar>(
    model: Model<T>,
    train: &LabeledImageSet,
    annotations: Option<&[u8]>,
    evals: &[EvalSet<'_>],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome<T>> {
    let annotations = annotations.ok_or_else(|| {
        TrainError::InvalidInput("the adversarial baseline needs concept annotations on the training set".into())
    })?;
    if annotations.len() != train.len() {
        return Err(TrainError::InvalidInput(format!(
            "{} concept annotations for {} training examples",
            annotations.len(),
            train.len()
        )));
    }
    if annotations.iter().any(|&a| a > 1) {
        return Err(TrainError::InvalidInput("concept annotations must be 0 or 1".into()));
    }
    prepare(&model, train, evals, cfg)?;
    let mut adversary = LinearAdversary::zeros(model.representation_dim());
    run_epochs(model, train, evals, cfg, run, |model, opt, batch, idx| {
        let a: Vec<u8> = idx.iter().map(|&i| annotations[i]).collect();
        adversarial_update(model, opt, batch, &a, cfg, &mut adversary)
    })
}
