//! Concept activation vectors as ridge-penalised logistic regressions.
//!
//! A CAV is the minimiser of
//!
//! ```text
//! L(v) = (1/M) sum_i BCE(sigmoid(v . h_i), y_i) + (lambda / 2) |v|^2
//! ```
//!
//! over the probe-layer activations `h_i` of a balanced concept set. There
//! is no intercept: with balanced labels the separating hyperplane is
//! taken through the origin.

use crate::error::{CavError, Result};
use crate::matrix::{axpy, dot, norm, norm_sq, Matrix};
use crate::ridge;
use crate::scalar::{bce_with_logit, clamped_sigmoid, sigmoid, Scalar};

/// Newton iteration cap for [`fit_cav_exact`].
pub const NEWTON_MAX_ITER: usize = 200;

/// Default gradient-norm tolerance for [`fit_cav_exact`].
pub const DEFAULT_TOL: f64 = 1e-10;

/// Probe activations of concept examples with their binary concept labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBatch<T> {
    activations: Matrix<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> RepresentationBatch<T> {
    /// Validates shape, finiteness and class balance.
    pub fn new(activations: Matrix<T>, labels: Vec<u8>) -> Result<Self> {
        let (m, d) = activations.shape();
        if m < 2 || d < 1 {
            return Err(CavError::invalid(format!("need at least 2 rows and 1 column, got {m}x{d}")));
        }
        if labels.len() != m {
            return Err(CavError::invalid(format!("{} labels for {m} rows", labels.len())));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(CavError::invalid("concept labels must be 0 or 1"));
        }
        if !activations.is_finite() {
            return Err(CavError::invalid("activations contain non-finite values"));
        }
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let neg = m - pos;
        if pos.abs_diff(neg) > 1 {
            return Err(CavError::invalid(format!("concept batch is unbalanced ({pos} concept vs {neg} other)")));
        }
        Ok(Self { activations, labels })
    }

    pub fn activations(&self) -> &Matrix<T> {
        &self.activations
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.activations.cols()
    }

    /// The same activations with every label flipped.
    pub fn flipped(&self) -> Self {
        Self { activations: self.activations.clone(), labels: self.labels.iter().map(|&y| 1 - y).collect() }
    }
}

/// A fitted (or approximated) CAV with the ridge strength it was fitted for.
#[derive(Clone, Debug, PartialEq)]
pub struct CavState<T> {
    v: Vec<T>,
    lambda: T,
}

impl<T: Scalar> CavState<T> {
    pub fn new(v: Vec<T>, lambda: T) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(CavError::invalid("lambda must be positive and finite"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CavError::invalid("CAV contains non-finite values"));
        }
        Ok(Self { v, lambda })
    }

    pub fn zeros(dim: usize, lambda: T) -> Result<Self> {
        Self::new(vec![T::zero(); dim], lambda)
    }

    pub fn v(&self) -> &[T] {
        &self.v
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.v
    }
}

fn label<T: Scalar>(y: u8) -> T {
    if y == 1 {
        T::one()
    } else {
        T::zero()
    }
}

fn check_dims<T: Scalar>(v: &[T], batch: &RepresentationBatch<T>) -> Result<()> {
    if v.len() != batch.dim() {
        return Err(CavError::invalid(format!("CAV has dimension {}, activations have {}", v.len(), batch.dim())));
    }
    Ok(())
}

/// Value of the penalised logistic objective at `v`.
pub fn cav_objective<T: Scalar>(batch: &RepresentationBatch<T>, v: &[T], lambda: T) -> Result<T> {
    check_dims(v, batch)?;
    let h = batch.activations();
    let m = T::from_usize_lossy(batch.len());
    let loss: T = (0..batch.len()).map(|i| bce_with_logit(dot(h.row(i), v), label(batch.labels()[i]))).sum();
    Ok(loss / m + T::lit(0.5) * lambda * norm_sq(v))
}

/// Gradient of [`cav_objective`] with respect to `v`.
pub fn cav_gradient<T: Scalar>(batch: &RepresentationBatch<T>, v: &[T], lambda: T) -> Result<Vec<T>> {
    check_dims(v, batch)?;
    let h = batch.activations();
    let m = T::from_usize_lossy(batch.len());
    let residual: Vec<T> =
        (0..batch.len()).map(|i| (sigmoid(dot(h.row(i), v)) - label(batch.labels()[i])) / m).collect();
    let mut g = h.t_matvec(&residual);
    axpy(lambda, v, &mut g);
    Ok(g)
}

/// Exact CAV by damped Newton with Armijo backtracking, started at zero.
pub fn fit_cav_exact<T: Scalar>(batch: &RepresentationBatch<T>, lambda: T, tol: T) -> Result<CavState<T>> {
    fit_cav_exact_from(batch, lambda, tol, &vec![T::zero(); batch.dim()])
}

/// [`fit_cav_exact`] from an arbitrary starting point.
pub fn fit_cav_exact_from<T: Scalar>(
    batch: &RepresentationBatch<T>,
    lambda: T,
    tol: T,
    init: &[T],
) -> Result<CavState<T>> {
    if !(lambda > T::zero()) {
        return Err(CavError::invalid("lambda must be positive"));
    }
    if !(tol > T::zero() && tol <= T::lit(1e-2)) {
        return Err(CavError::invalid("tolerance must lie in (0, 1e-2]"));
    }
    check_dims(init, batch)?;
    let h = batch.activations();
    let mut v = init.to_vec();
    let mut f = cav_objective(batch, &v, lambda)?;
    let mut gnorm = T::infinity();
    for _ in 0..=NEWTON_MAX_ITER {
        let g = cav_gradient(batch, &v, lambda)?;
        gnorm = norm(&g);
        if gnorm <= tol {
            return CavState::new(v, lambda);
        }
        let weights: Vec<T> = (0..batch.len())
            .map(|i| {
                let s = clamped_sigmoid(dot(h.row(i), &v));
                s * (T::one() - s)
            })
            .collect();
        let step = ridge::solve(h, &weights, lambda, &g)?;
        let slope = dot(&g, &step);
        // Below this decrease the objective cannot resolve the line search.
        let resolvable = slope > T::lit(100.0) * T::epsilon() * (T::one() + f.abs());
        let mut t = T::one();
        let mut accepted = false;
        while resolvable && t > T::lit(1e-12) {
            let trial: Vec<T> = v.iter().zip(&step).map(|(&vi, &pi)| vi - t * pi).collect();
            let ft = cav_objective(batch, &trial, lambda)?;
            if ft <= f - T::lit(1e-4) * t * slope {
                v = trial;
                f = ft;
                accepted = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !accepted {
            // Rounding-level neighbourhood of the optimum: full Newton step.
            axpy(-T::one(), &step, &mut v);
            f = cav_objective(batch, &v, lambda)?;
        }
    }
    Err(CavError::Convergence { iterations: NEWTON_MAX_ITER, grad_norm: gnorm.to_f64_lossy() })
}

/// One gradient step on the CAV objective: `v - lr * grad L(v)`.
pub fn cav_sgd_step<T: Scalar>(state: &CavState<T>, batch: &RepresentationBatch<T>, lr: T) -> Result<CavState<T>> {
    if !(lr > T::zero()) {
        return Err(CavError::invalid("learning rate must be positive"));
    }
    let g = cav_gradient(batch, state.v(), state.lambda())?;
    let v = state.v().iter().zip(&g).map(|(&vi, &gi)| vi - lr * gi).collect();
    CavState::new(v, state.lambda())
}

/// Adversarial CAV penalty `|v|^2`.
pub fn adv_penalty_value<T: Scalar>(state: &CavState<T>) -> T {
    norm_sq(state.v())
}

/// Fraction of rows whose logit sign matches the label (`v . h > 0` means concept).
pub fn cav_accuracy<T: Scalar>(batch: &RepresentationBatch<T>, v: &[T]) -> Result<f64> {
    check_dims(v, batch)?;
    let h = batch.activations();
    let hits = (0..batch.len()).filter(|&i| (dot(h.row(i), v) > T::zero()) == (batch.labels()[i] == 1)).count();
    Ok(hits as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn antipodal(scale: f64) -> RepresentationBatch<f64> {
        let rows = vec![vec![scale, 0.0], vec![scale, 0.0], vec![-scale, 0.0], vec![-scale, 0.0]];
        RepresentationBatch::new(Matrix::from_rows(&rows).unwrap(), vec![1, 1, 0, 0]).unwrap()
    }

    #[test]
    fn zero_features_give_zero_cav() {
        let batch = RepresentationBatch::new(Matrix::<f64>::zeros(4, 3), vec![1, 0, 1, 0]).unwrap();
        let cav = fit_cav_exact(&batch, 0.1, 1e-10).unwrap();
        assert_eq!(cav.v(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn antipodal_cav_points_along_u() {
        let cav = fit_cav_exact(&antipodal(1.0), 1.0, 1e-10).unwrap();
        assert!(cav.v()[0] > 0.0);
        assert_eq!(cav.v()[1], 0.0);
    }

    #[test]
    fn sgd_step_from_zero() {
        let zero = RepresentationBatch::new(Matrix::<f64>::zeros(4, 3), vec![1, 0, 1, 0]).unwrap();
        let s = CavState::zeros(3, 0.1).unwrap();
        assert_eq!(cav_sgd_step(&s, &zero, 1e-3).unwrap().v(), &[0.0; 3]);

        let s = CavState::zeros(2, 1.0).unwrap();
        let next = cav_sgd_step(&s, &antipodal(1.0), 1e-3).unwrap();
        assert!(next.v()[0] > 0.0);
        assert_eq!(next.v()[1], 0.0);
    }

    #[test]
    fn penalty_is_squared_norm() {
        assert_eq!(adv_penalty_value(&CavState::new(vec![3.0, 4.0], 1.0).unwrap()), 25.0);
        assert_eq!(adv_penalty_value(&CavState::zeros(5, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn rejects_bad_batches() {
        let unbalanced = RepresentationBatch::new(Matrix::<f64>::zeros(4, 2), vec![1, 1, 1, 0]);
        assert!(matches!(unbalanced, Err(CavError::InvalidInput(_))));
        let mut m = Matrix::<f64>::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(RepresentationBatch::new(m, vec![0, 1]).is_err());
        assert!(RepresentationBatch::new(Matrix::<f64>::zeros(1, 2), vec![1]).is_err());
    }

    #[test]
    fn rejects_bad_tolerance_and_reports_non_convergence() {
        let batch = antipodal(1.0);
        assert!(fit_cav_exact(&batch, 1.0, 0.5).is_err());
        // f32 cannot reach a 1e-30 gradient norm; the cap must trip.
        let b32 = RepresentationBatch::new(batch.activations().cast::<f32>(), batch.labels().to_vec()).unwrap();
        match fit_cav_exact(&b32, 1.0f32, 1e-30) {
            Err(CavError::Convergence { iterations, .. }) => assert_eq!(iterations, NEWTON_MAX_ITER),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_state_dimension_is_rejected() {
        let s = CavState::zeros(3, 1.0).unwrap();
        assert!(cav_sgd_step(&s, &antipodal(1.0), 1e-3).is_err());
    }
}
