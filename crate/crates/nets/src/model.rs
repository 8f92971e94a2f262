//! Model zoo and the layer-wise forward/backward engine.
//!
//! Every hidden layer is a unit `conv -> (+ skip) -> ReLU -> BatchNorm`, so
//! each unit output is a batch-normalised representation that can carry a
//! concept probe. Layers are numbered from 1; the classifier head is the
//! last layer and has no probe.

use dcr_core::{Matrix, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::layers::{
    bn_backward, bn_forward_batch, bn_forward_running, conv_backward, conv_forward, linear_backward, linear_forward,
    BnStats, ConvGeom, BN_MOMENTUM,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(alias = "m3")]
    M3,
    #[serde(alias = "m5")]
    M5,
    #[serde(alias = "m7")]
    M7,
    #[serde(alias = "resnet14")]
    ResNet14,
    /// Valid-padding conv stack with one kernel size (M3/M5/M7 are instances).
    Plain { kernel: usize, channels: Vec<usize> },
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "m3" => Ok(Self::M3),
            "m5" => Ok(Self::M5),
            "m7" => Ok(Self::M7),
            "resnet14" => Ok(Self::ResNet14),
            other => Err(NetError::Config(format!("unknown architecture '{other}' (expected M3, M5, M7, ResNet14)"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::M3 => "M3".into(),
            Self::M5 => "M5".into(),
            Self::M7 => "M7".into(),
            Self::ResNet14 => "ResNet14".into(),
            Self::Plain { kernel, channels } => format!("Plain(k={kernel}, {channels:?})"),
        }
    }
}

pub const M3_CHANNELS: [usize; 10] = [32, 48, 64, 80, 96, 112, 128, 144, 160, 176];
pub const M5_CHANNELS: [usize; 5] = [32, 64, 96, 128, 160];
pub const M7_CHANNELS: [usize; 4] = [48, 96, 144, 192];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    None,
    SpatialAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub layer: usize,
    #[serde(default)]
    pub pooling: Pooling,
    pub lambda: f64,
    #[serde(default = "yes")]
    pub has_batchnorm: bool,
}

impl ProbePoint {
    pub fn new(layer: usize, lambda: f64) -> Self {
        Self { layer, pooling: Pooling::None, lambda, has_batchnorm: true }
    }
}

fn yes() -> bool {
    true
}

fn mnist_shape() -> [usize; 3] {
    [1, 28, 28]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input example.
    #[serde(default = "mnist_shape")]
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub probe_points: Vec<ProbePoint>,
    #[serde(default)]
    pub decoder_enabled: bool,
    /// Learnable scale and shift in every batch norm.
    #[serde(default = "yes")]
    pub bn_affine: bool,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, num_classes: usize) -> Self {
        Self {
            architecture,
            num_classes,
            input_shape: mnist_shape(),
            probe_points: Vec::new(),
            decoder_enabled: false,
            bn_affine: true,
        }
    }

    pub fn with_probes(mut self, layers: &[usize], lambda: f64) -> Self {
        self.probe_points = layers.iter().map(|&l| ProbePoint::new(l, lambda)).collect();
        self
    }
}

/// Units of an architecture before input sizes are known.
#[derive(Clone, Debug)]
pub(crate) struct UnitPlan {
    pub name: String,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Residual source: 0 is the network input, `j` the output of unit `j`.
    pub skip_from: Option<usize>,
}

fn plain(kernel: usize, channels: &[usize]) -> Vec<UnitPlan> {
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| UnitPlan {
            name: format!("conv{}", i + 1),
            out_c: c,
            k: kernel,
            stride: 1,
            pad: 0,
            skip_from: None,
        })
        .collect()
}

/// ResNet14 layout (13 conv units + linear head):
///
/// | layer | kernel | stride | channels | residual from |
/// |-------|--------|--------|----------|---------------|
/// | 1     | 3      | 1      | 16       |               |
/// | 2     | 3      | 1      | 16       |               |
/// | 3     | 1      | 1      | 32       |               |
/// | 4     | 3      | 1      | 32       | 1 (1x1 proj)  |
/// | 5     | 3      | 2      | 32       |               |
/// | 6     | 1      | 1      | 64       |               |
/// | 7     | 3      | 1      | 64       |               |
/// | 8     | 1      | 1      | 32       | 4 (1x1 proj)  |
/// | 9     | 3      | 2      | 64       |               |
/// | 10    | 1      | 1      | 128      |               |
/// | 11    | 1      | 1      | 64       | 8 (1x1 proj)  |
/// | 12    | 3      | 2      | 64       |               |
/// | 13    | 1      | 1      | 128      | 11 (1x1 proj) |
fn resnet14() -> Vec<UnitPlan> {
    let rows: [(usize, usize, usize, Option<usize>); 13] = [
        (3, 1, 16, None),
        (3, 1, 16, None),
        (1, 1, 32, None),
        (3, 1, 32, Some(1)),
        (3, 2, 32, None),
        (1, 1, 64, None),
        (3, 1, 64, None),
        (1, 1, 32, Some(4)),
        (3, 2, 64, None),
        (1, 1, 128, None),
        (1, 1, 64, Some(8)),
        (3, 2, 64, None),
        (1, 1, 128, Some(11)),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(k, stride, out_c, skip_from))| UnitPlan {
            name: format!("conv{}", i + 1),
            out_c,
            k,
            stride,
            pad: k / 2,
            skip_from,
        })
        .collect()
}

pub(crate) fn plan(arch: &Architecture) -> Result<Vec<UnitPlan>> {
    let units = match arch {
        Architecture::M3 => plain(3, &M3_CHANNELS),
        Architecture::M5 => plain(5, &M5_CHANNELS),
        Architecture::M7 => plain(7, &M7_CHANNELS),
        Architecture::ResNet14 => resnet14(),
        Architecture::Plain { kernel, channels } => {
            if channels.is_empty() || channels.contains(&0) {
                return Err(NetError::Config("plain architecture needs non-empty, positive channel list".into()));
            }
            plain(*kernel, channels)
        }
    };
    Ok(units)
}

/// Location of one named parameter tensor in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry { name, shape, offset, len });
        self.total += len;
        offset
    }
}

#[derive(Clone, Debug)]
struct Conv {
    geom: ConvGeom,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Skip {
    from: usize,
    proj: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Unit {
    name: String,
    conv: Conv,
    gamma: Option<usize>,
    beta: Option<usize>,
    skip: Option<Skip>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    in_dim: usize,
    out_dim: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn params<'a, T>(&self, p: &'a [T]) -> (&'a [T], &'a [T]) {
        (&p[self.w..self.w + self.in_dim * self.out_dim], &p[self.b..self.b + self.out_dim])
    }
}

pub const DECODER_WIDTHS: [usize; 2] = [64, 256];

/// Which batch-norm statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training, and concept passes).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Intermediate values of one forward pass, consumed by backprop.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub norm: NormMode,
    pub input: Tensor<T>,
    /// ReLU outputs (batch-norm inputs) per computed unit.
    relu: Vec<Tensor<T>>,
    stats: Vec<BnStats<T>>,
    /// Post-norm outputs per computed unit.
    outputs: Vec<Tensor<T>>,
    pub logits: Option<Matrix<T>>,
    decoder: Option<DecoderTrace<T>>,
}

#[derive(Clone, Debug)]
struct DecoderTrace<T> {
    a1: Matrix<T>,
    a2: Matrix<T>,
    recon: Matrix<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn depth(&self) -> usize {
        self.outputs.len()
    }

    /// Output of unit `layer` (1-based).
    pub fn output(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer - 1]
    }

    pub fn reconstruction(&self) -> Option<&Matrix<T>> {
        self.decoder.as_ref().map(|d| &d.recon)
    }
}

/// Gradients of a scalar loss with respect to network outputs.
#[derive(Clone, Debug, Default)]
pub struct Cotangents<T> {
    pub logits: Option<Matrix<T>>,
    /// `(layer, gradient of unit output)`.
    pub units: Vec<(usize, Tensor<T>)>,
    pub reconstruction: Option<Matrix<T>>,
}

/// How far a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Stop after this unit; no head or decoder.
    Layer(usize),
    Full,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    units: Vec<Unit>,
    head: Dense,
    decoder: Option<[Dense; 3]>,
    layout: Vec<ParamEntry>,
    params: Vec<T>,
    running: Vec<(Vec<T>, Vec<T>)>,
}

fn validate(config: &ModelConfig, n_units: usize) -> Result<()> {
    if config.num_classes < 2 {
        return Err(NetError::Config("num_classes must be at least 2".into()));
    }
    if config.input_shape.contains(&0) {
        return Err(NetError::Config("input shape must be positive".into()));
    }
    for p in &config.probe_points {
        if p.layer == 0 || p.layer > n_units {
            return Err(NetError::Config(format!(
                "probe layer {} does not exist: {} has probe-able layers 1..={n_units}",
                p.layer,
                config.architecture.name()
            )));
        }
        if !p.has_batchnorm {
            return Err(NetError::Config(format!("probe layer {} must be batch-normalised", p.layer)));
        }
        if !(p.lambda > 0.0 && p.lambda.is_finite()) {
            return Err(NetError::Config(format!("probe layer {} needs a positive lambda", p.layer)));
        }
    }
    let mut layers: Vec<usize> = config.probe_points.iter().map(|p| p.layer).collect();
    layers.sort_unstable();
    if layers.windows(2).any(|w| w[0] == w[1]) {
        return Err(NetError::Config("duplicate probe layer".into()));
    }
    Ok(())
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture with seeded uniform fan-in initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let plans = plan(&config.architecture)?;
        validate(&config, plans.len())?;
        let mut lb = LayoutBuilder::default();
        let [mut c, mut h, mut w] = config.input_shape;
        let mut shapes = vec![(c, h, w)];
        let mut units = Vec::with_capacity(plans.len());
        for p in &plans {
            let geom = ConvGeom::new(c, p.out_c, p.k, p.stride, p.pad, h, w)?;
            let conv = Conv {
                geom,
                w: lb.push(format!("{}.weight", p.name), vec![p.out_c, c, p.k, p.k]),
                b: lb.push(format!("{}.bias", p.name), vec![p.out_c]),
            };
            let skip = match p.skip_from {
                None => None,
                Some(from) => {
                    let (sc, sh, sw) = shapes[from];
                    let proj = if (sc, sh, sw) == (p.out_c, geom.out_h, geom.out_w) {
                        None
                    } else {
                        let stride = sh.div_ceil(geom.out_h.max(1));
                        let g = ConvGeom::new(sc, p.out_c, 1, stride.max(1), 0, sh, sw)?;
                        if (g.out_h, g.out_w) != (geom.out_h, geom.out_w) {
                            return Err(NetError::Config(format!("{}: residual shapes do not line up", p.name)));
                        }
                        Some(Conv {
                            geom: g,
                            w: lb.push(format!("{}.skip.weight", p.name), vec![p.out_c, sc, 1, 1]),
                            b: lb.push(format!("{}.skip.bias", p.name), vec![p.out_c]),
                        })
                    };
                    Some(Skip { from, proj })
                }
            };
            let (gamma, beta) = if config.bn_affine {
                (
                    Some(lb.push(format!("{}.bn.weight", p.name), vec![p.out_c])),
                    Some(lb.push(format!("{}.bn.bias", p.name), vec![p.out_c])),
                )
            } else {
                (None, None)
            };
            units.push(Unit { name: p.name.clone(), conv, gamma, beta, skip });
            (c, h, w) = (p.out_c, geom.out_h, geom.out_w);
            shapes.push((c, h, w));
        }
        let rep = c * h * w;
        let head = dense(&mut lb, "head", rep, config.num_classes);
        let decoder = config.decoder_enabled.then(|| {
            let out: usize = config.input_shape.iter().product();
            [
                dense(&mut lb, "decoder.fc1", rep, DECODER_WIDTHS[0]),
                dense(&mut lb, "decoder.fc2", DECODER_WIDTHS[0], DECODER_WIDTHS[1]),
                dense(&mut lb, "decoder.fc3", DECODER_WIDTHS[1], out),
            ]
        });
        let running =
            units.iter().map(|u| (vec![T::zero(); u.conv.geom.out_c], vec![T::one(); u.conv.geom.out_c])).collect();
        let mut model =
            Self { config, units, head, decoder, layout: lb.entries, params: vec![T::zero(); lb.total], running };
        model.initialise(seed);
        Ok(model)
    }

    fn initialise(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &self.layout {
            let slot = &mut self.params[e.offset..e.offset + e.len];
            if e.name.ends_with(".bn.weight") {
                slot.fill(T::one());
            } else if e.name.ends_with(".bn.bias") {
                slot.fill(T::zero());
            } else {
                // fan-in of the tensor this weight or bias belongs to
                let fan_in = weight_fan_in(&self.layout, &e.name);
                let bound = 1.0 / (fan_in as f64).sqrt();
                slot.iter_mut().for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters excluding the decoder.
    pub fn num_classifier_params(&self) -> usize {
        self.layout.iter().filter(|e| !e.name.starts_with("decoder.")).map(|e| e.len).sum()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NetError::Shape(format!("{} parameters for a model with {}", params.len(), self.params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn running_stats(&self) -> &[(Vec<T>, Vec<T>)] {
        &self.running
    }

    pub fn set_running_stats(&mut self, running: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
        let ok = running.len() == self.running.len()
            && running.iter().zip(&self.running).all(|(a, b)| a.0.len() == b.0.len() && a.1.len() == b.1.len());
        if !ok {
            return Err(NetError::Shape("running statistics do not match the architecture".into()));
        }
        self.running = running;
        Ok(())
    }

    /// Number of hidden (probe-able) layers; the head is layer `num_units() + 1`.
    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_name(&self, layer: usize) -> &str {
        &self.units[layer - 1].name
    }

    /// `[C, H, W]` of unit `layer`'s output.
    pub fn unit_shape(&self, layer: usize) -> [usize; 3] {
        let g = &self.units[layer - 1].conv.geom;
        [g.out_c, g.out_h, g.out_w]
    }

    /// Flattened width of the representation the head reads.
    pub fn representation_dim(&self) -> usize {
        self.head.in_dim
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn probe_dim(&self, probe: &ProbePoint) -> usize {
        let [c, h, w] = self.unit_shape(probe.layer);
        match probe.pooling {
            Pooling::None => c * h * w,
            Pooling::SpatialAverage => c,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, norm: NormMode, depth: Depth) -> Result<Trace<T>> {
        self.forward_with(&self.params, x, norm, depth)
    }

    /// Forward pass with an explicit parameter vector.
    pub fn forward_with(&self, params: &[T], x: &Tensor<T>, norm: NormMode, depth: Depth) -> Result<Trace<T>> {
        if params.len() != self.params.len() {
            return Err(NetError::Shape("parameter vector length".into()));
        }
        let [c, h, w] = self.config.input_shape;
        if x.shape()[1..] != [c, h, w] || x.batch() == 0 {
            return Err(NetError::Shape(format!("input {:?} for a model expecting [N, {c}, {h}, {w}]", x.shape())));
        }
        let mut trace = Trace {
            norm,
            input: x.clone(),
            relu: Vec::new(),
            stats: Vec::new(),
            outputs: Vec::new(),
            logits: None,
            decoder: None,
        };
        self.propagate(params, &mut trace, depth)?;
        Ok(trace)
    }

    fn propagate(&self, params: &[T], trace: &mut Trace<T>, depth: Depth) -> Result<()> {
        let last = match depth {
            Depth::Layer(k) if k == 0 || k > self.units.len() => {
                return Err(NetError::Config(format!("layer {k} is not a hidden layer")));
            }
            Depth::Layer(k) => k,
            Depth::Full => self.units.len(),
        };
        for j in trace.outputs.len() + 1..=last {
            let unit = &self.units[j - 1];
            let g = &unit.conv.geom;
            let n = trace.input.batch();
            let x = if j == 1 { &trace.input } else { &trace.outputs[j - 2] };
            let mut z = Tensor::zeros([n, g.out_c, g.out_h, g.out_w]);
            conv_forward(
                g,
                &params[unit.conv.w..unit.conv.w + g.weight_len()],
                &params[unit.conv.b..unit.conv.b + g.out_c],
                x,
                &mut z,
            );
            if let Some(skip) = &unit.skip {
                let src = if skip.from == 0 { &trace.input } else { &trace.outputs[skip.from - 1] };
                match &skip.proj {
                    None => z.add_assign(src),
                    Some(pc) => {
                        let mut s = Tensor::zeros(z.shape());
                        let pg = &pc.geom;
                        conv_forward(
                            pg,
                            &params[pc.w..pc.w + pg.weight_len()],
                            &params[pc.b..pc.b + pg.out_c],
                            src,
                            &mut s,
                        );
                        z.add_assign(&s);
                    }
                }
            }
            z.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            let gamma = unit.gamma.map(|o| &params[o..o + g.out_c]);
            let beta = unit.beta.map(|o| &params[o..o + g.out_c]);
            let (y, stats) = match trace.norm {
                NormMode::Batch => bn_forward_batch(&z, gamma, beta),
                NormMode::Running => {
                    let (m, v) = &self.running[j - 1];
                    bn_forward_running(&z, m, v, gamma, beta)
                }
            };
            trace.relu.push(z);
            trace.stats.push(stats);
            trace.outputs.push(y);
        }
        if depth == Depth::Full {
            let rep = trace.outputs[self.units.len() - 1].to_matrix();
            let (w, b) = self.head.params(params);
            trace.logits = Some(linear_forward(w, b, &rep));
            if let Some(dec) = &self.decoder {
                trace.decoder = Some(decoder_forward(dec, params, &rep));
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn commit_batch_stats(&mut self, trace: &Trace<T>) {
        if trace.norm != NormMode::Batch {
            return;
        }
        let m = T::lit(BN_MOMENTUM);
        let n = trace.input.batch();
        for (j, stats) in trace.stats.iter().enumerate() {
            let count = n * self.units[j].conv.geom.out_plane();
            let unbias = if count > 1 { T::from_usize_lossy(count) / T::from_usize_lossy(count - 1) } else { T::one() };
            let (rm, rv) = &mut self.running[j];
            for c in 0..rm.len() {
                rm[c] = (T::one() - m) * rm[c] + m * stats.mean[c];
                rv[c] = (T::one() - m) * rv[c] + m * stats.var[c] * unbias;
            }
        }
    }

    /// Probe activations, `N x probe_dim`.
    pub fn probe_activations(&self, trace: &Trace<T>, probe: &ProbePoint) -> Result<Matrix<T>> {
        if probe.layer == 0 || probe.layer > trace.depth() {
            return Err(NetError::Config(format!("trace does not reach layer {}", probe.layer)));
        }
        let out = trace.output(probe.layer);
        Ok(match probe.pooling {
            Pooling::None => out.to_matrix(),
            Pooling::SpatialAverage => {
                let (c, p) = (out.channels(), out.plane());
                let inv = T::one() / T::from_usize_lossy(p);
                Matrix::from_fn(out.batch(), c, |i, ch| {
                    out.item(i)[ch * p..(ch + 1) * p].iter().copied().sum::<T>() * inv
                })
            }
        })
    }

    /// Lifts a gradient with respect to probe activations to the unit output.
    pub fn probe_cotangent(&self, probe: &ProbePoint, grad: &Matrix<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.unit_shape(probe.layer);
        if grad.cols() != self.probe_dim(probe) {
            return Err(NetError::Shape(format!(
                "probe gradient has {} columns, expected {}",
                grad.cols(),
                self.probe_dim(probe)
            )));
        }
        match probe.pooling {
            Pooling::None => Tensor::from_vec([grad.rows(), c, h, w], grad.as_slice().to_vec()),
            Pooling::SpatialAverage => {
                let p = h * w;
                let inv = T::one() / T::from_usize_lossy(p);
                let mut t = Tensor::zeros([grad.rows(), c, h, w]);
                for i in 0..grad.rows() {
                    let ti = t.item_mut(i);
                    for ch in 0..c {
                        ti[ch * p..(ch + 1) * p].fill(grad[(i, ch)] * inv);
                    }
                }
                Ok(t)
            }
        }
    }

    /// Accumulates parameter gradients of the loss described by `cot` into `grads`.
    pub fn backward(&self, trace: &Trace<T>, cot: &Cotangents<T>, grads: &mut [T]) -> Result<()> {
        self.backward_with(&self.params, trace, cot, grads)
    }

    pub fn backward_with(&self, params: &[T], trace: &Trace<T>, cot: &Cotangents<T>, grads: &mut [T]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(NetError::Shape("gradient buffer length".into()));
        }
        self.backprop(params, trace, cot, Some(grads), 0).map(|_| ())
    }

    /// Gradient of `sum(dlogits * logits)` with respect to the output of `layer`, `N x dim`.
    pub fn layer_gradient(&self, trace: &Trace<T>, layer: usize, dlogits: &Matrix<T>) -> Result<Matrix<T>> {
        if layer == 0 || layer > self.units.len() {
            return Err(NetError::Config(format!("layer {layer} is not a hidden layer")));
        }
        let cot = Cotangents { logits: Some(dlogits.clone()), ..Default::default() };
        let mut dout = self.backprop(&self.params, trace, &cot, None, layer)?;
        let n = trace.input.batch();
        Ok(match dout[layer].take() {
            Some(t) => t.to_matrix(),
            None => Matrix::zeros(n, self.unit_shape(layer).iter().product()),
        })
    }

    /// Logits after replacing the output of `layer` in `trace` by `h` (`N x dim`).
    /// Earlier layers, including residual sources, keep their traced values.
    pub fn logits_from(&self, trace: &Trace<T>, layer: usize, h: &Matrix<T>) -> Result<Matrix<T>> {
        if layer == 0 || layer > trace.depth() {
            return Err(NetError::Config(format!("trace does not reach layer {layer}")));
        }
        let mut t = Trace {
            norm: trace.norm,
            input: trace.input.clone(),
            relu: trace.relu[..layer].to_vec(),
            stats: trace.stats[..layer].to_vec(),
            outputs: trace.outputs[..layer - 1].to_vec(),
            logits: None,
            decoder: None,
        };
        t.outputs.push(Tensor::from_matrix(h.clone(), self.unit_shape(layer))?);
        self.propagate(&self.params, &mut t, Depth::Full)?;
        Ok(t.logits.expect("full depth"))
    }

    fn backprop(
        &self,
        params: &[T],
        trace: &Trace<T>,
        cot: &Cotangents<T>,
        mut grads: Option<&mut [T]>,
        stop: usize,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let depth = trace.depth();
        let mut dout: Vec<Option<Tensor<T>>> = vec![None; depth + 1];
        let add = |dout: &mut Vec<Option<Tensor<T>>>, j: usize, g: Tensor<T>| match &mut dout[j] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        };
        let n_units = self.units.len();
        let mut d_rep: Option<Matrix<T>> = None;
        if let Some(dl) = &cot.logits {
            let logits = trace.logits.as_ref().ok_or_else(|| NetError::Config("trace has no logits".into()))?;
            if dl.shape() != logits.shape() {
                return Err(NetError::Shape("logit cotangent shape".into()));
            }
            let rep = trace.outputs[n_units - 1].to_matrix();
            let (w, _) = self.head.params(params);
            let dx = match grads.as_deref_mut() {
                Some(gr) => {
                    let (gw, gb) = split_dense(gr, &self.head);
                    linear_backward(w, &rep, dl, gw, gb)
                }
                None => {
                    let mut gw = vec![T::zero(); w.len()];
                    let mut gb = vec![T::zero(); self.head.out_dim];
                    linear_backward(w, &rep, dl, &mut gw, &mut gb)
                }
            };
            d_rep = Some(dx);
        }
        if let Some(dr) = &cot.reconstruction {
            let (dec, dt) = match (&self.decoder, &trace.decoder) {
                (Some(d), Some(t)) => (d, t),
                _ => return Err(NetError::Config("reconstruction gradient without a decoder pass".into())),
            };
            let rep = trace.outputs[n_units - 1].to_matrix();
            let dx = decoder_backward(dec, params, &rep, dt, dr, grads.as_deref_mut());
            d_rep = Some(match d_rep {
                Some(mut acc) => {
                    acc.as_mut_slice().iter_mut().zip(dx.as_slice()).for_each(|(a, &b)| *a += b);
                    acc
                }
                None => dx,
            });
        }
        if let Some(dr) = d_rep {
            add(&mut dout, n_units, Tensor::from_matrix(dr, self.unit_shape(n_units))?);
        }
        for (layer, g) in &cot.units {
            if *layer == 0 || *layer > depth {
                return Err(NetError::Config(format!("cotangent for layer {layer} outside the traced depth")));
            }
            if g.shape() != trace.outputs[layer - 1].shape() {
                return Err(NetError::Shape(format!("cotangent shape for layer {layer}")));
            }
            add(&mut dout, *layer, g.clone());
        }
        for j in (stop + 1..=depth).rev() {
            let Some(dy) = dout[j].take() else { continue };
            let unit = &self.units[j - 1];
            let g = &unit.conv.geom;
            let gamma = unit.gamma.map(|o| &params[o..o + g.out_c]);
            let relu = &trace.relu[j - 1];
            let mut dz = match (grads.as_deref_mut(), unit.gamma, unit.beta) {
                (Some(gr), Some(go), Some(bo)) => {
                    let (gg, gb) = two_slices(gr, (go, g.out_c), (bo, g.out_c));
                    bn_backward(relu, &trace.stats[j - 1], gamma, &dy, Some((gg, gb)))
                }
                _ => bn_backward(relu, &trace.stats[j - 1], gamma, &dy, None),
            };
            dz.data_mut().iter_mut().zip(relu.data()).for_each(|(d, &a)| {
                if a <= T::zero() {
                    *d = T::zero();
                }
            });
            let x = if j == 1 { &trace.input } else { &trace.outputs[j - 2] };
            let want_dx = j > 1 && j - 1 >= stop;
            let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
            conv_backward(
                g,
                &params[unit.conv.w..unit.conv.w + g.weight_len()],
                x,
                &dz,
                grads.as_deref_mut().map(|gr| two_slices(gr, (unit.conv.w, g.weight_len()), (unit.conv.b, g.out_c))),
                dx.as_mut(),
            );
            if let Some(dx) = dx {
                add(&mut dout, j - 1, dx);
            }
            if let Some(skip) = &unit.skip {
                if skip.from >= 1 && skip.from >= stop {
                    let src = &trace.outputs[skip.from - 1];
                    match &skip.proj {
                        None => add(&mut dout, skip.from, dz.clone()),
                        Some(pc) => {
                            let pg = &pc.geom;
                            let mut ds = Tensor::zeros(src.shape());
                            conv_backward(
                                pg,
                                &params[pc.w..pc.w + pg.weight_len()],
                                src,
                                &dz,
                                grads
                                    .as_deref_mut()
                                    .map(|gr| two_slices(gr, (pc.w, pg.weight_len()), (pc.b, pg.out_c))),
                                Some(&mut ds),
                            );
                            add(&mut dout, skip.from, ds);
                        }
                    }
                } else if let (Some(pc), Some(gr)) = (&skip.proj, grads.as_deref_mut()) {
                    let pg = &pc.geom;
                    let src = if skip.from == 0 { &trace.input } else { &trace.outputs[skip.from - 1] };
                    conv_backward(
                        pg,
                        &params[pc.w..pc.w + pg.weight_len()],
                        src,
                        &dz,
                        Some(two_slices(gr, (pc.w, pg.weight_len()), (pc.b, pg.out_c))),
                        None,
                    );
                }
            }
        }
        Ok(dout)
    }

    /// Runs the decoder on representations taken from the penultimate layer.
    pub fn decode(&self, representation: &Matrix<T>) -> Result<Matrix<T>> {
        let dec = self.decoder.as_ref().ok_or_else(|| NetError::Config("decoder is disabled for this model".into()))?;
        if representation.cols() != self.head.in_dim {
            return Err(NetError::Shape(format!(
                "representation has {} columns, decoder expects {}",
                representation.cols(),
                self.head.in_dim
            )));
        }
        Ok(decoder_forward(dec, &self.params, representation).recon)
    }

    /// Same model in another float width.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        Model {
            config: self.config.clone(),
            units: self.units.clone(),
            head: self.head,
            decoder: self.decoder,
            layout: self.layout.clone(),
            params: conv(&self.params),
            running: self.running.iter().map(|(m, v)| (conv(m), conv(v))).collect(),
        }
    }
}

fn dense(lb: &mut LayoutBuilder, name: &str, in_dim: usize, out_dim: usize) -> Dense {
    Dense {
        in_dim,
        out_dim,
        w: lb.push(format!("{name}.weight"), vec![out_dim, in_dim]),
        b: lb.push(format!("{name}.bias"), vec![out_dim]),
    }
}

fn weight_fan_in(layout: &[ParamEntry], name: &str) -> usize {
    let stem = name.strip_suffix(".bias").or_else(|| name.strip_suffix(".weight")).unwrap_or(name);
    let w = layout.iter().find(|e| e.name == format!("{stem}.weight")).expect("weight entry");
    w.shape[1..].iter().product::<usize>().max(1)
}

fn split_dense<'a, T>(grads: &'a mut [T], d: &Dense) -> (&'a mut [T], &'a mut [T]) {
    two_slices(grads, (d.w, d.in_dim * d.out_dim), (d.b, d.out_dim))
}

/// Two disjoint `(offset, len)` windows of one buffer.
fn two_slices<T>(buf: &mut [T], a: (usize, usize), b: (usize, usize)) -> (&mut [T], &mut [T]) {
    assert!(a.0 + a.1 <= b.0 || b.0 + b.1 <= a.0, "overlapping parameter windows");
    if a.0 < b.0 {
        let (lo, hi) = buf.split_at_mut(b.0);
        (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
    } else {
        let (lo, hi) = buf.split_at_mut(a.0);
        (&mut hi[..a.1], &mut lo[b.0..b.0 + b.1])
    }
}

fn decoder_forward<T: Scalar>(dec: &[Dense; 3], params: &[T], rep: &Matrix<T>) -> DecoderTrace<T> {
    let relu = |mut m: Matrix<T>| {
        m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
        m
    };
    let (w, b) = dec[0].params(params);
    let a1 = relu(linear_forward(w, b, rep));
    let (w, b) = dec[1].params(params);
    let a2 = relu(linear_forward(w, b, &a1));
    let (w, b) = dec[2].params(params);
    let mut recon = linear_forward(w, b, &a2);
    recon.as_mut_slice().iter_mut().for_each(|v| *v = dcr_core::scalar::sigmoid(*v));
    DecoderTrace { a1, a2, recon }
}

fn decoder_backward<T: Scalar>(
    dec: &[Dense; 3],
    params: &[T],
    rep: &Matrix<T>,
    t: &DecoderTrace<T>,
    drecon: &Matrix<T>,
    mut grads: Option<&mut [T]>,
) -> Matrix<T> {
    let mut step = |d: &Dense, x: &Matrix<T>, dy: &Matrix<T>| -> Matrix<T> {
        let (w, _) = d.params(params);
        match grads.as_deref_mut() {
            Some(gr) => {
                let (gw, gb) = split_dense(gr, d);
                linear_backward(w, x, dy, gw, gb)
            }
            None => linear_backward(w, x, dy, &mut vec![T::zero(); w.len()], &mut vec![T::zero(); d.out_dim]),
        }
    };
    let mut dz3 = drecon.clone();
    dz3.as_mut_slice().iter_mut().zip(t.recon.as_slice()).for_each(|(g, &r)| *g *= r * (T::one() - r));
    let mut da2 = step(&dec[2], &t.a2, &dz3);
    mask(&mut da2, &t.a2);
    let mut da1 = step(&dec[1], &t.a1, &da2);
    mask(&mut da1, &t.a1);
    step(&dec[0], rep, &da1)
}

fn mask<T: Scalar>(g: &mut Matrix<T>, a: &Matrix<T>) {
    g.as_mut_slice().iter_mut().zip(a.as_slice()).for_each(|(d, &v)| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Random inputs in `[0, 1)`, handy for shape checks.
pub fn random_input<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>()).map(|_| T::lit(rng.random::<f64>())).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}
