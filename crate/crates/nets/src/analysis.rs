//! Layer widths and the contraction rule for choosing probe layers.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::layers::ConvGeom;
use crate::model::{plan, Architecture};

pub const DEFAULT_RATIO_THRESHOLD: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    pub output_dims: usize,
}

/// Per-layer flattened widths; the input itself is reported separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTable {
    pub input_dims: usize,
    pub layers: Vec<LayerSpec>,
}

impl LayerTable {
    /// `output_dims(i) / output_dims(i+1)` for every layer that has a successor.
    pub fn ratios(&self) -> Vec<(usize, f64)> {
        self.layers.windows(2).map(|w| (w[0].index, w[0].output_dims as f64 / w[1].output_dims as f64)).collect()
    }
}

/// Widths of every layer for an input of `[C, H, W]`, head included.
pub fn list_layer_dims(arch: &Architecture, num_classes: usize, input_shape: [usize; 3]) -> Result<LayerTable> {
    let [mut c, mut h, mut w] = input_shape;
    if c * h * w == 0 {
        return Err(NetError::Config("input shape must be positive".into()));
    }
    let input_dims = c * h * w;
    let mut layers = Vec::new();
    for (i, p) in plan(arch)?.iter().enumerate() {
        let g = ConvGeom::new(c, p.out_c, p.k, p.stride, p.pad, h, w)?;
        (c, h, w) = (p.out_c, g.out_h, g.out_w);
        layers.push(LayerSpec { index: i + 1, name: p.name.clone(), output_dims: c * h * w });
    }
    layers.push(LayerSpec { index: layers.len() + 1, name: "head".into(), output_dims: num_classes });
    Ok(LayerTable { input_dims, layers })
}

/// Layers whose width exceeds the next layer's by `ratio_threshold`, plus the penultimate layer.
pub fn propose_probe_layers(specs: &[LayerSpec], ratio_threshold: f64) -> Result<Vec<usize>> {
    if specs.len() < 2 {
        return Err(NetError::Config("need at least two layers".into()));
    }
    if !(ratio_threshold > 1.0) {
        return Err(NetError::Config(format!("ratio threshold must exceed 1, got {ratio_threshold}")));
    }
    let mut out: Vec<usize> = specs
        .windows(2)
        .filter(|w| w[0].output_dims as f64 / w[1].output_dims as f64 >= ratio_threshold)
        .map(|w| w[0].index)
        .collect();
    let penultimate = specs[specs.len() - 2].index;
    if !out.contains(&penultimate) {
        out.push(penultimate);
    }
    out.sort_unstable();
    Ok(out)
}
