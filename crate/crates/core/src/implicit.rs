//! Implicit differentiation of the CAV with respect to upstream parameters.
//!
//! At a fitted `v0 = v*(W0)` the optimality condition `grad L(v*, W) = 0`
//! gives
//!
//! ```text
//! dv*/dW = -D^{-1} (1/M) sum_i [(s_i - y_i) I + s_i (1 - s_i) h_i v0^T] dh_i/dW
//! D      = lambda I + (1/M) sum_i s_i (1 - s_i) h_i h_i^T,   s_i = sigmoid(v0 . h_i)
//! ```
//!
//! Rather than materialising `dv*/dW`, training uses the surrogate
//!
//! ```text
//! S(W) = -2 x0^T (1/M) sum_i (sigmoid(v0 . h_i(W)) - y_i) h_i(W),   x0 = D^{-1} v0
//! ```
//!
//! whose gradient at `W0` equals the gradient of `|v*(W)|^2`, so ordinary
//! backpropagation through the feature map produces the penalty gradient.

use crate::cav::{fit_cav_exact, CavState, RepresentationBatch};
use crate::error::{CavError, Result};
use crate::matrix::{dot, Cholesky, Matrix};
use crate::ridge;
use crate::scalar::{bce_with_logit, clamped_sigmoid, sigmoid, Scalar};

/// Largest representation width for which `D` may be materialised.
pub const MAX_DENSE_DIM: usize = 4096;

/// Largest parameter count for which a full Jacobian may be materialised.
pub const MAX_JACOBIAN_PARAMS: usize = 10_000;

fn curvature_weights<T: Scalar>(buffer: &Matrix<T>, v0: &[T]) -> (Vec<T>, Vec<T>) {
    let sigma: Vec<T> = (0..buffer.rows()).map(|i| clamped_sigmoid(dot(buffer.row(i), v0))).collect();
    let weights = sigma.iter().map(|&s| s * (T::one() - s)).collect();
    (sigma, weights)
}

fn check_buffer<T: Scalar>(buffer: &Matrix<T>, v0: &[T]) -> Result<()> {
    if buffer.rows() == 0 {
        return Err(CavError::invalid("activation buffer is empty"));
    }
    if buffer.cols() != v0.len() {
        return Err(CavError::invalid(format!("buffer has {} columns, v0 has length {}", buffer.cols(), v0.len())));
    }
    if !buffer.is_finite() || v0.iter().any(|x| !x.is_finite()) {
        return Err(CavError::invalid("non-finite buffer or v0"));
    }
    Ok(())
}

/// Materialises `D = lambda I + (1/M) H^T diag(s(1-s)) H`. Test scale only.
pub fn build_d<T: Scalar>(buffer: &Matrix<T>, v0: &[T], lambda: T) -> Result<Matrix<T>> {
    check_buffer(buffer, v0)?;
    if buffer.cols() > MAX_DENSE_DIM {
        return Err(CavError::Capacity {
            what: "representation width",
            size: buffer.cols(),
            cap: MAX_DENSE_DIM,
            hint: "use woodbury_inverse_vec instead of materialising D",
        });
    }
    let (_, weights) = curvature_weights(buffer, v0);
    ridge::weighted_gram(buffer, &weights, lambda)
}

/// `x0 = D^{-1} v0` through the Woodbury identity, in `O(M^2 d + M^3)`.
pub fn woodbury_inverse_vec<T: Scalar>(buffer: &Matrix<T>, v0: &[T], lambda: T) -> Result<Vec<T>> {
    check_buffer(buffer, v0)?;
    let (_, weights) = curvature_weights(buffer, v0);
    ridge::solve_woodbury(buffer, &weights, lambda, v0)
}

/// Frozen quantities from which the surrogate penalty is built.
#[derive(Clone, Debug)]
pub struct ImplicitGradContext<T> {
    v0: Vec<T>,
    x0: Vec<T>,
    buffer: Matrix<T>,
    sigma: Vec<T>,
    lambda: T,
}

impl<T: Scalar> ImplicitGradContext<T> {
    /// Solves for `x0` over the detached activation buffer.
    pub fn new(buffer: Matrix<T>, state: &CavState<T>) -> Result<Self> {
        check_buffer(&buffer, state.v())?;
        let (sigma, weights) = curvature_weights(&buffer, state.v());
        let x0 = ridge::solve_woodbury(&buffer, &weights, state.lambda(), state.v())?;
        Ok(Self { v0: state.v().to_vec(), x0, buffer, sigma, lambda: state.lambda() })
    }

    pub fn v0(&self) -> &[T] {
        &self.v0
    }

    pub fn x0(&self) -> &[T] {
        &self.x0
    }

    pub fn buffer(&self) -> &Matrix<T> {
        &self.buffer
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.v0.len()
    }

    /// Relative residual `|D x0 - v0| / |v0|`, computed without forming `D`.
    pub fn residual(&self) -> T {
        let m = T::from_usize_lossy(self.buffer.rows());
        let hx = self.buffer.matvec(&self.x0);
        let weighted: Vec<T> = hx.iter().zip(&self.sigma).map(|(&z, &s)| z * s * (T::one() - s) / m).collect();
        let dx = self.buffer.t_matvec(&weighted);
        let mut num = T::zero();
        for i in 0..self.dim() {
            let r = self.lambda * self.x0[i] + dx[i] - self.v0[i];
            num += r * r;
        }
        let den = dot(&self.v0, &self.v0);
        if den == T::zero() {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Conditioning proxy `lambda M / |H|_F^2`; small values signal that the
    /// buffer is too small for the curvature estimate to be trusted.
    pub fn condition_proxy(&self) -> T {
        let f = self.buffer.frobenius_sq();
        if f == T::zero() {
            T::infinity()
        } else {
            self.lambda * T::from_usize_lossy(self.buffer.rows()) / f
        }
    }
}

/// A scalar penalty together with its gradient with respect to the
/// activation matrix it was evaluated on.
#[derive(Clone, Debug)]
pub struct ActivationPenalty<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

fn check_activations<T: Scalar>(activations: &Matrix<T>, labels: &[u8], dim: usize) -> Result<()> {
    if activations.cols() != dim {
        return Err(CavError::invalid(format!("activations have {} columns, expected {dim}", activations.cols())));
    }
    if activations.rows() != labels.len() || labels.is_empty() {
        return Err(CavError::invalid("labels do not match activation rows"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(CavError::invalid("concept labels must be 0 or 1"));
    }
    Ok(())
}

fn label<T: Scalar>(y: u8) -> T {
    if y == 1 {
        T::one()
    } else {
        T::zero()
    }
}

/// Gradient-matching surrogate for `|v*(W)|^2`. Only its gradient carries
/// meaning; the value is not `|v0|^2`.
pub fn surrogate_penalty<T: Scalar>(
    activations: &Matrix<T>,
    labels: &[u8],
    ctx: &ImplicitGradContext<T>,
) -> Result<ActivationPenalty<T>> {
    check_activations(activations, labels, ctx.dim())?;
    let m = T::from_usize_lossy(activations.rows());
    let scale = -T::lit(2.0) / m;
    let mut value = T::zero();
    let mut grad = Matrix::zeros(activations.rows(), activations.cols());
    for i in 0..activations.rows() {
        let h = activations.row(i);
        let s = sigmoid(dot(h, &ctx.v0));
        let r = s - label::<T>(labels[i]);
        let xh = dot(h, &ctx.x0);
        value += r * xh;
        let curv = s * (T::one() - s) * xh;
        for ((g, &x), &v) in grad.row_mut(i).iter_mut().zip(&ctx.x0).zip(&ctx.v0) {
            *g = scale * (r * x + curv * v);
        }
    }
    Ok(ActivationPenalty { value: scale * value, grad })
}

/// Conventional adversarial penalty: the negated CAV objective with `v`
/// frozen. By the envelope theorem its partial gradient in the activations
/// is the full gradient of `max_v -L(v, W)`.
pub fn envelope_adversarial_penalty<T: Scalar>(
    activations: &Matrix<T>,
    labels: &[u8],
    state: &CavState<T>,
) -> Result<ActivationPenalty<T>> {
    check_activations(activations, labels, state.dim())?;
    let v = state.v();
    let m = T::from_usize_lossy(activations.rows());
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(activations.rows(), activations.cols());
    for i in 0..activations.rows() {
        let z = dot(activations.row(i), v);
        let y = label::<T>(labels[i]);
        loss += bce_with_logit(z, y);
        let r = (sigmoid(z) - y) / m;
        for (g, &vj) in grad.row_mut(i).iter_mut().zip(v) {
            *g = -r * vj;
        }
    }
    let value = -(loss / m + T::lit(0.5) * state.lambda() * dot(v, v));
    Ok(ActivationPenalty { value, grad })
}

/// A differentiable map from (inputs, flat parameters) to a row-per-example
/// activation matrix.
pub trait FeatureMap<T: Scalar> {
    fn num_params(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn forward(&self, params: &[T], inputs: &Matrix<T>) -> Result<Matrix<T>>;

    /// Vector-Jacobian product: gradient with respect to `params` of
    /// `sum_ij cotangent_ij * forward(params, inputs)_ij`.
    fn vjp(&self, params: &[T], inputs: &Matrix<T>, cotangent: &Matrix<T>) -> Result<Vec<T>>;

    /// `dh_i/dW` for every row, as one `output_dim x num_params` matrix per
    /// example. The default builds it from one VJP per output coordinate.
    fn example_jacobians(&self, params: &[T], inputs: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let rows = inputs.rows();
        let d = self.output_dim();
        let mut out = Vec::with_capacity(rows);
        let mut basis = Matrix::zeros(rows, d);
        for i in 0..rows {
            let mut jac = Matrix::zeros(d, self.num_params());
            for j in 0..d {
                basis[(i, j)] = T::one();
                let g = self.vjp(params, inputs, &basis)?;
                jac.row_mut(j).copy_from_slice(&g);
                basis[(i, j)] = T::zero();
            }
            out.push(jac);
        }
        Ok(out)
    }
}

/// Full `d x dim(W)` Jacobian of the exact CAV at `params`.
///
/// Fits `v0 = v*(W0)` to `tol` first; returns the Jacobian together with
/// the fitted state.
pub fn implicit_jacobian<T: Scalar, F: FeatureMap<T> + ?Sized>(
    fmap: &F,
    params: &[T],
    inputs: &Matrix<T>,
    labels: &[u8],
    lambda: T,
    tol: T,
) -> Result<(Matrix<T>, CavState<T>)> {
    if fmap.num_params() > MAX_JACOBIAN_PARAMS {
        return Err(CavError::Capacity {
            what: "parameter count",
            size: fmap.num_params(),
            cap: MAX_JACOBIAN_PARAMS,
            hint: "differentiate through surrogate_penalty instead",
        });
    }
    if fmap.output_dim() > MAX_DENSE_DIM {
        return Err(CavError::Capacity {
            what: "representation width",
            size: fmap.output_dim(),
            cap: MAX_DENSE_DIM,
            hint: "differentiate through surrogate_penalty instead",
        });
    }
    let h = fmap.forward(params, inputs)?;
    let batch = RepresentationBatch::new(h, labels.to_vec())?;
    let state = fit_cav_exact(&batch, lambda, tol)?;
    let v0 = state.v();
    let h = batch.activations();
    let (m, d) = h.shape();
    let p = fmap.num_params();
    let jacobians = fmap.example_jacobians(params, inputs)?;

    // G = (1/M) sum_i [(s_i - y_i) J_i + s_i (1 - s_i) h_i (v0^T J_i)]
    let mut g = Matrix::zeros(d, p);
    let inv_m = T::one() / T::from_usize_lossy(m);
    for (i, jac) in jacobians.iter().enumerate() {
        let hi = h.row(i);
        let s = sigmoid(dot(hi, v0));
        let r = (s - label::<T>(labels[i])) * inv_m;
        let c = s * (T::one() - s) * inv_m;
        let vj = jac.t_matvec(v0);
        for a in 0..d {
            let ca = c * hi[a];
            let row = g.row_mut(a);
            for ((gk, &jk), &vjk) in row.iter_mut().zip(jac.row(a)).zip(&vj) {
                *gk += r * jk + ca * vjk;
            }
        }
    }
    let dmat = build_d(h, v0, lambda)?;
    let mut jac = Cholesky::factor(&dmat)?.solve_matrix(&g);
    jac.scale(-T::one());
    Ok((jac, state))
}
