//! Concept activation vectors (CAVs) and the adversarial CAV penalty.
//!
//! A CAV is a ridge-penalised logistic regression separating concept from
//! non-concept examples in a layer's activation space. Penalising its
//! squared norm pushes the layer to stop encoding the concept. The gradient
//! of that penalty with respect to upstream weights goes through the
//! arg-min; [`implicit`] provides it both as an explicit Jacobian (for
//! checks) and as a surrogate loss whose ordinary gradient matches it (for
//! training).
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod cav;
pub mod error;
pub mod feature_map;
pub mod implicit;
pub mod matrix;
pub mod ridge;
pub mod scalar;
pub mod verify;

pub use cav::{
    adv_penalty_value, cav_accuracy, cav_gradient, cav_objective, cav_sgd_step, fit_cav_exact, fit_cav_exact_from,
    CavState, RepresentationBatch, DEFAULT_TOL, NEWTON_MAX_ITER,
};
pub use error::{CavError, Result};
pub use feature_map::{LinearFeatureMap, TanhFeatureMap};
pub use implicit::{
    build_d, envelope_adversarial_penalty, implicit_jacobian, surrogate_penalty, woodbury_inverse_vec,
    ActivationPenalty, FeatureMap, ImplicitGradContext, MAX_DENSE_DIM, MAX_JACOBIAN_PARAMS,
};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type CavState32 = CavState<f32>;
pub type CavState64 = CavState<f64>;
pub type RepresentationBatch32 = RepresentationBatch<f32>;
pub type RepresentationBatch64 = RepresentationBatch<f64>;
pub type ImplicitGradContext32 = ImplicitGradContext<f32>;
pub type ImplicitGradContext64 = ImplicitGradContext<f64>;
