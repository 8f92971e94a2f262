//! Solves with the weighted ridge Gram matrix `lambda I + (1/M) H^T diag(w) H`.
//!
//! This matrix is both the Hessian of the CAV objective and the operator
//! whose inverse enters the implicit gradient. Two routes are provided: a
//! dense `d x d` factorisation and the Woodbury form that only factors an
//! `M x M` system. The Woodbury form is written with `B = diag(sqrt w) H`
//!
//! ```text
//! x = (b - B^T (lambda M I + B B^T)^{-1} B b) / lambda
//! ```
//!
//! so it never divides by a weight and tolerates `w_i = 0`.

use crate::error::{CavError, Result};
use crate::matrix::{gemm, Cholesky, Matrix};
use crate::scalar::Scalar;

fn check<T: Scalar>(h: &Matrix<T>, w: &[T], lambda: T) -> Result<()> {
    if h.rows() != w.len() {
        return Err(CavError::invalid(format!("{} weights for {} rows", w.len(), h.rows())));
    }
    if h.rows() == 0 {
        return Err(CavError::invalid("empty activation buffer"));
    }
    if !(lambda > T::zero()) {
        return Err(CavError::invalid("ridge strength must be positive"));
    }
    if w.iter().any(|&wi| !(wi >= T::zero()) || !wi.is_finite()) {
        return Err(CavError::invalid("curvature weights must be finite and non-negative"));
    }
    Ok(())
}

/// Rows of `h` scaled by `sqrt(w_i)`.
fn scaled_rows<T: Scalar>(h: &Matrix<T>, w: &[T]) -> Matrix<T> {
    let mut b = h.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        b.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    b
}

/// Materialises `lambda I + (1/M) H^T diag(w) H`.
pub fn weighted_gram<T: Scalar>(h: &Matrix<T>, w: &[T], lambda: T) -> Result<Matrix<T>> {
    check(h, w, lambda)?;
    let m = T::from_usize_lossy(h.rows());
    let b = scaled_rows(h, w);
    let mut d = Matrix::identity(h.cols());
    d.scale(lambda);
    gemm(T::one() / m, &b, true, &b, false, T::one(), &mut d);
    Ok(d)
}

/// Dense solve: factor the `d x d` matrix.
pub fn solve_dense<T: Scalar>(h: &Matrix<T>, w: &[T], lambda: T, rhs: &[T]) -> Result<Vec<T>> {
    let d = weighted_gram(h, w, lambda)?;
    if rhs.len() != d.rows() {
        return Err(CavError::invalid("right-hand side length mismatch"));
    }
    Ok(Cholesky::factor(&d)?.solve(rhs))
}

/// Woodbury solve: factor the `M x M` matrix `lambda M I + B B^T`.
pub fn solve_woodbury<T: Scalar>(h: &Matrix<T>, w: &[T], lambda: T, rhs: &[T]) -> Result<Vec<T>> {
    check(h, w, lambda)?;
    if rhs.len() != h.cols() {
        return Err(CavError::invalid(format!(
            "right-hand side has length {}, buffer has {} columns",
            rhs.len(),
            h.cols()
        )));
    }
    let rows = h.rows();
    let b = scaled_rows(h, w);
    let mut k = Matrix::identity(rows);
    k.scale(lambda * T::from_usize_lossy(rows));
    gemm(T::one(), &b, false, &b, true, T::one(), &mut k);
    let brhs = b.matvec(rhs);
    let s = Cholesky::factor(&k)?.solve(&brhs);
    let bts = b.t_matvec(&s);
    Ok(rhs.iter().zip(&bts).map(|(&r, &c)| (r - c) / lambda).collect())
}

/// Picks whichever factorisation is smaller.
pub fn solve<T: Scalar>(h: &Matrix<T>, w: &[T], lambda: T, rhs: &[T]) -> Result<Vec<T>> {
    if h.cols() <= h.rows() {
        solve_dense(h, w, lambda, rhs)
    } else {
        solve_woodbury(h, w, lambda, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_agree_with_zero_weights() {
        let h = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
        let w = [0.0, 0.2];
        let rhs = [1.0, -1.0, 0.5];
        let a = solve_dense(&h, &w, 0.3, &rhs).unwrap();
        let b = solve_woodbury(&h, &w, 0.3, &rhs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let h = Matrix::<f64>::zeros(2, 2);
        assert!(solve_woodbury(&h, &[0.1, 0.1], 0.0, &[1.0, 1.0]).is_err());
    }
}
