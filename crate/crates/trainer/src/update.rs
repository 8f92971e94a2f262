//! Single optimisation steps for the three training methods.

use dcr_core::matrix::norm_sq;
use dcr_core::{cav_sgd_step, surrogate_penalty, CavState, ImplicitGradContext, Matrix, RepresentationBatch, Scalar};
use dcr_nets::{Cotangents, Depth, Model, NormMode, ProbePoint, Trace};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::config::TrainConfig;
use crate::error::{Result, TrainError};
use crate::loss::{argmax, concept_bce, cross_entropy, pixel_mse, LinearAdversary};
use crate::optim::Optimizer;

/// Per-probe state carried across updates.
#[derive(Clone, Debug)]
pub struct ProbeRuntimeState<T> {
    pub probe: ProbePoint,
    /// CAV approximation, warm-started from the previous update.
    pub v0: CavState<T>,
    /// Rows of detached activations gathered during the current update's Step 1.
    buffer: Matrix<T>,
    capacity: usize,
    /// Context built in the last update; it owns that update's buffer.
    pub last_context: Option<ImplicitGradContext<T>>,
}

impl<T: Scalar> ProbeRuntimeState<T> {
    /// Zero CAV of the probe's width, with `lambda` as ridge strength and room for `capacity` rows.
    pub fn new(model: &Model<T>, probe: ProbePoint, lambda: f64, capacity: usize) -> Result<Self> {
        let d = model.probe_dim(&probe);
        Ok(ProbeRuntimeState {
            v0: CavState::zeros(d, T::lit(lambda))?,
            probe,
            buffer: Matrix::zeros(0, d),
            capacity,
            last_context: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn buffered_rows(&self) -> usize {
        self.buffer.rows()
    }

    fn reset_buffer(&mut self) {
        let d = self.v0.dim();
        let storage = Vec::with_capacity(self.capacity * d);
        self.buffer = Matrix::from_vec(0, d, storage).expect("empty matrix");
    }
}

/// States for every probe of `model`, with per-probe lambdas from `cfg` when given.
pub fn init_probe_states<T: Scalar>(model: &Model<T>, cfg: &TrainConfig) -> Result<Vec<ProbeRuntimeState<T>>> {
    let probes = &model.config().probe_points;
    if !cfg.probe_lambdas.is_empty() && cfg.probe_lambdas.len() != probes.len() {
        return Err(TrainError::Config(format!(
            "{} probe lambdas for {} probe points",
            cfg.probe_lambdas.len(),
            probes.len()
        )));
    }
    probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lambda = cfg.probe_lambdas.get(i).copied().unwrap_or(p.lambda);
            ProbeRuntimeState::new(model, p.clone(), lambda, cfg.buffer_rows())
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStepMetrics {
    pub layer: usize,
    /// `|v0|^2` after Step 1.
    pub cav_norm_sq: f64,
    pub concept_bce: f64,
    pub surrogate: f64,
    pub condition_proxy: f64,
}

/// Loss components of one step; `total` is their sum in the listed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub total: f64,
    pub downstream: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
    pub batch_accuracy: f64,
    pub probes: Vec<ProbeStepMetrics>,
    pub adversary_bce: Option<f64>,
    pub adversary_accuracy: Option<f64>,
}

impl StepMetrics {
    fn close(&mut self) {
        self.total = self.downstream + self.adversarial + self.reconstruction;
    }
}

/// Forward pass on a training batch plus downstream and reconstruction cotangents.
struct Supervised<T> {
    trace: Trace<T>,
    cot: Cotangents<T>,
    downstream: f64,
    reconstruction: f64,
    accuracy: f64,
}

fn supervised<T: Scalar>(model: &Model<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<Supervised<T>> {
    let trace = model.forward(&batch.x, NormMode::Batch, Depth::Full)?;
    let logits = trace.logits.as_ref().expect("full pass has logits");
    if let Some(&l) = batch.labels.iter().find(|&&l| l as usize >= logits.cols()) {
        return Err(TrainError::InvalidInput(format!("label {l} for a {}-class model", logits.cols())));
    }
    let (downstream, dlogits) = cross_entropy(logits, &batch.labels);
    let hits = (0..logits.rows()).filter(|&i| argmax(logits.row(i)) == batch.labels[i] as usize).count();
    let mut cot = Cotangents { logits: Some(dlogits), ..Default::default() };
    let mut reconstruction = 0.0;
    if let (Some(recon), true) = (trace.reconstruction(), cfg.recon_scale > 0.0) {
        let (mse, mut grad) = pixel_mse(recon, batch.x.data());
        grad.scale(T::lit(cfg.recon_scale));
        reconstruction = cfg.recon_scale * mse;
        cot.reconstruction = Some(grad);
    }
    Ok(Supervised { trace, cot, downstream, reconstruction, accuracy: hits as f64 / batch.len() as f64 })
}

fn check_finite<T: Scalar>(metrics: &StepMetrics, grads: &[T]) -> Result<()> {
    let bad_grad = grads.iter().position(|g| !g.is_finite());
    if metrics.total.is_finite() && bad_grad.is_none() {
        return Ok(());
    }
    Err(TrainError::Divergence {
        epoch: 0,
        step: 0,
        diagnostics: format!(
            "downstream {} adversarial {} reconstruction {} first non-finite gradient {:?}",
            metrics.downstream, metrics.adversarial, metrics.reconstruction, bad_grad
        ),
    })
}

fn apply<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    grads: &[T],
    trace: &Trace<T>,
    metrics: &StepMetrics,
) -> Result<()> {
    check_finite(metrics, grads)?;
    let mut params = model.params().to_vec();
    opt.step(&mut params, grads);
    model.set_params(params)?;
    model.commit_batch_stats(trace);
    Ok(())
}

/// One supervised step on the downstream (and reconstruction) loss.
pub fn erm_update<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    train: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let sup = supervised(model, train, cfg)?;
    let mut grads = vec![T::zero(); model.num_params()];
    model.backward(&sup.trace, &sup.cot, &mut grads)?;
    let mut m = StepMetrics {
        downstream: sup.downstream,
        reconstruction: sup.reconstruction,
        batch_accuracy: sup.accuracy,
        ..Default::default()
    };
    m.close();
    apply(model, opt, &grads, &sup.trace, &m)?;
    Ok(m)
}

/// Step 1: refine every probe's `v0` once per concept batch, buffering detached activations.
/// Returns the trace and probe activations of the last concept batch.
fn refine_cavs<T: Scalar>(
    model: &Model<T>,
    concept: &[Batch<T>],
    cfg: &TrainConfig,
    states: &mut [ProbeRuntimeState<T>],
) -> Result<(Trace<T>, Vec<Matrix<T>>)> {
    let depth = states.iter().map(|s| s.probe.layer).max().expect("at least one probe");
    states.iter_mut().for_each(ProbeRuntimeState::reset_buffer);
    let lr = T::lit(cfg.cav_lr);
    let mut last = None;
    for batch in concept {
        if batch.len() != cfg.batch_size {
            return Err(TrainError::State(format!(
                "concept batch of {} rows, expected {}",
                batch.len(),
                cfg.batch_size
            )));
        }
        let trace = model.forward(&batch.x, NormMode::Batch, Depth::Layer(depth))?;
        let mut acts = Vec::with_capacity(states.len());
        for s in states.iter_mut() {
            let h = model.probe_activations(&trace, &s.probe)?;
            let rb = RepresentationBatch::new(h, batch.labels.clone())?;
            s.v0 = cav_sgd_step(&s.v0, &rb, lr)?;
            let h = rb.activations().clone();
            s.buffer.append_rows(&h)?;
            acts.push(h);
        }
        last = Some((trace, acts));
    }
    last.ok_or_else(|| TrainError::State("no concept batches supplied".into()))
}

/// One Deep Concept Removal update.
///
/// Step 1 refines each probe's CAV on `cav_steps` fresh concept batches.
/// Step 2 solves `D x0 = v0` over the buffered activations (Woodbury form).
/// Step 3 adds `gamma * surrogate` on the last concept batch to the downstream
/// and reconstruction losses and takes one optimiser step.
pub fn dcr_update<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    train: &Batch<T>,
    concept: &[Batch<T>],
    cfg: &TrainConfig,
    states: &mut [ProbeRuntimeState<T>],
) -> Result<StepMetrics> {
    if states.is_empty() {
        return Err(TrainError::Config("concept removal needs at least one probe point".into()));
    }
    if concept.len() != cfg.cav_steps {
        return Err(TrainError::State(format!("{} concept batches for cav_steps = {}", concept.len(), cfg.cav_steps)));
    }
    let (concept_trace, last_acts) = refine_cavs(model, concept, cfg, states)?;
    let labels = &concept.last().expect("nonempty").labels;
    let gamma = T::lit(cfg.gamma);
    let mut m = StepMetrics::default();
    let mut concept_cot = Cotangents::default();
    for (s, h) in states.iter_mut().zip(&last_acts) {
        if s.buffer.rows() < s.capacity {
            return Err(TrainError::State(format!(
                "probe at layer {} buffered {} of {} rows",
                s.probe.layer,
                s.buffer.rows(),
                s.capacity
            )));
        }
        let buffer = std::mem::replace(&mut s.buffer, Matrix::zeros(0, s.v0.dim()));
        let ctx = ImplicitGradContext::new(buffer, &s.v0)?;
        let pen = surrogate_penalty(h, labels, &ctx)?;
        let proxy = ctx.condition_proxy().to_f64_lossy();
        if proxy < cfg.stability_floor {
            log::debug!("probe {}: condition proxy {proxy:.3e} below {:.1e}", s.probe.layer, cfg.stability_floor);
        }
        m.probes.push(ProbeStepMetrics {
            layer: s.probe.layer,
            cav_norm_sq: norm_sq(s.v0.v()).to_f64_lossy(),
            concept_bce: concept_bce(h, labels, s.v0.v()),
            surrogate: pen.value.to_f64_lossy(),
            condition_proxy: proxy,
        });
        m.adversarial += cfg.gamma * pen.value.to_f64_lossy();
        if cfg.gamma > 0.0 {
            let mut g = pen.grad;
            g.scale(gamma);
            concept_cot.units.push((s.probe.layer, model.probe_cotangent(&s.probe, &g)?));
        }
        s.last_context = Some(ctx);
    }
    let sup = supervised(model, train, cfg)?;
    let mut grads = vec![T::zero(); model.num_params()];
    model.backward(&sup.trace, &sup.cot, &mut grads)?;
    // gamma = 0 skips this pass, so the update is exactly the supervised one
    if !concept_cot.units.is_empty() {
        model.backward(&concept_trace, &concept_cot, &mut grads)?;
    }
    m.downstream = sup.downstream;
    m.reconstruction = sup.reconstruction;
    m.batch_accuracy = sup.accuracy;
    m.close();
    apply(model, opt, &grads, &sup.trace, &m)?;
    Ok(m)
}

/// One alternating-adversary update: `adv_steps` adversary fits on the detached penultimate
/// representation, then a step on `CE - gamma * BCE_adversary`.
pub fn adversarial_update<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    train: &Batch<T>,
    annotations: &[u8],
    cfg: &TrainConfig,
    adversary: &mut LinearAdversary<T>,
) -> Result<StepMetrics> {
    if annotations.len() != train.len() {
        return Err(TrainError::InvalidInput("one concept annotation per training example required".into()));
    }
    let mut sup = supervised(model, train, cfg)?;
    let last = model.num_units();
    let h = sup.trace.output(last).to_matrix();
    for _ in 0..cfg.adv_steps {
        adversary.step(&h, annotations, T::lit(cfg.adv_lr));
    }
    let (bce, acc, mut grad) = adversary.evaluate(&h, annotations);
    let mut m = StepMetrics {
        downstream: sup.downstream,
        reconstruction: sup.reconstruction,
        adversarial: -cfg.gamma * bce,
        batch_accuracy: sup.accuracy,
        adversary_bce: Some(bce),
        adversary_accuracy: Some(acc),
        ..Default::default()
    };
    if cfg.gamma > 0.0 {
        grad.scale(-T::lit(cfg.gamma));
        let [c, hh, w] = model.unit_shape(last);
        sup.cot.units.push((last, dcr_nets::Tensor::from_vec([grad.rows(), c, hh, w], grad.into_vec())?));
    }
    let mut grads = vec![T::zero(); model.num_params()];
    model.backward(&sup.trace, &sup.cot, &mut grads)?;
    m.close();
    apply(model, opt, &grads, &sup.trace, &m)?;
    Ok(m)
}
