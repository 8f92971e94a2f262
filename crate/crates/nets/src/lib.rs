//! Convolutional model zoo with batch-normalised probe points.
//!
//! Provides the M3/M5/M7 plain networks, a 14-layer residual network, an
//! optional reconstruction decoder, the layer-width analysis used to pick
//! probe layers, and a versioned checkpoint format. Forward and backward
//! passes are written by hand and generic over [`Scalar`].

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod model;
pub mod probe_map;
pub mod tensor;

pub use analysis::{list_layer_dims, propose_probe_layers, LayerSpec, LayerTable, DEFAULT_RATIO_THRESHOLD};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use dcr_core::Scalar;
pub use error::{NetError, Result};
pub use model::{
    random_input, Architecture, Cotangents, Depth, Model, ModelConfig, NormMode, Pooling, ProbePoint, Trace,
};
pub use probe_map::ProbeFeatureMap;
pub use tensor::Tensor;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
