//! A network truncated at a probe layer, seen as a feature map of all its parameters.

use dcr_core::{FeatureMap, Matrix, Scalar};

use crate::model::{Cotangents, Depth, Model, NormMode, ProbePoint};
use crate::tensor::Tensor;

/// `W -> probe activations of the inputs`, batch statistics throughout.
pub struct ProbeFeatureMap<'a, T> {
    pub model: &'a Model<T>,
    pub probe: ProbePoint,
}

fn lift<T: Scalar>(model: &Model<T>, inputs: &Matrix<T>) -> dcr_core::Result<Tensor<T>> {
    let [c, h, w] = model.config().input_shape;
    Tensor::from_vec([inputs.rows(), c, h, w], inputs.as_slice().to_vec())
        .map_err(|e| dcr_core::CavError::InvalidInput(e.to_string()))
}

fn wrap(e: crate::error::NetError) -> dcr_core::CavError {
    dcr_core::CavError::InvalidInput(e.to_string())
}

impl<T: Scalar> FeatureMap<T> for ProbeFeatureMap<'_, T> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn output_dim(&self) -> usize {
        self.model.probe_dim(&self.probe)
    }

    fn forward(&self, params: &[T], inputs: &Matrix<T>) -> dcr_core::Result<Matrix<T>> {
        let x = lift(self.model, inputs)?;
        let trace =
            self.model.forward_with(params, &x, NormMode::Batch, Depth::Layer(self.probe.layer)).map_err(wrap)?;
        self.model.probe_activations(&trace, &self.probe).map_err(wrap)
    }

    fn vjp(&self, params: &[T], inputs: &Matrix<T>, cotangent: &Matrix<T>) -> dcr_core::Result<Vec<T>> {
        let x = lift(self.model, inputs)?;
        let trace =
            self.model.forward_with(params, &x, NormMode::Batch, Depth::Layer(self.probe.layer)).map_err(wrap)?;
        let cot = Cotangents {
            units: vec![(self.probe.layer, self.model.probe_cotangent(&self.probe, cotangent).map_err(wrap)?)],
            ..Default::default()
        };
        let mut grads = vec![T::zero(); params.len()];
        self.model.backward_with(params, &trace, &cot, &mut grads).map_err(wrap)?;
        Ok(grads)
    }
}
