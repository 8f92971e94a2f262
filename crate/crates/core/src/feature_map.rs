//! Small closed-form feature maps used by the numerical self-checks.

use crate::error::{CavError, Result};
use crate::implicit::FeatureMap;
use crate::matrix::{gemm, Matrix};
use crate::scalar::Scalar;

fn check<T: Scalar>(params: &[T], inputs: &Matrix<T>, expected_params: usize, in_dim: usize) -> Result<()> {
    if params.len() != expected_params {
        return Err(CavError::invalid(format!("expected {expected_params} parameters, got {}", params.len())));
    }
    if inputs.cols() != in_dim {
        return Err(CavError::invalid(format!("expected {in_dim} input columns, got {}", inputs.cols())));
    }
    Ok(())
}

/// `h = W x` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Clone, Copy, Debug)]
pub struct LinearFeatureMap {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> FeatureMap<T> for LinearFeatureMap {
    fn num_params(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn forward(&self, params: &[T], inputs: &Matrix<T>) -> Result<Matrix<T>> {
        check(params, inputs, self.in_dim * self.out_dim, self.in_dim)?;
        let w = Matrix::from_vec(self.out_dim, self.in_dim, params.to_vec())?;
        let mut h = Matrix::zeros(inputs.rows(), self.out_dim);
        gemm(T::one(), inputs, false, &w, true, T::zero(), &mut h);
        Ok(h)
    }

    fn vjp(&self, params: &[T], inputs: &Matrix<T>, cotangent: &Matrix<T>) -> Result<Vec<T>> {
        check(params, inputs, self.in_dim * self.out_dim, self.in_dim)?;
        if cotangent.shape() != (inputs.rows(), self.out_dim) {
            return Err(CavError::invalid("cotangent shape mismatch"));
        }
        let mut gw = Matrix::zeros(self.out_dim, self.in_dim);
        gemm(T::one(), cotangent, true, inputs, false, T::zero(), &mut gw);
        Ok(gw.into_vec())
    }
}

/// `h = tanh(W x + b)`; parameters are `W` (row-major) followed by `b`.
#[derive(Clone, Copy, Debug)]
pub struct TanhFeatureMap {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TanhFeatureMap {
    fn n_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

impl<T: Scalar> FeatureMap<T> for TanhFeatureMap {
    fn num_params(&self) -> usize {
        self.n_params()
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn forward(&self, params: &[T], inputs: &Matrix<T>) -> Result<Matrix<T>> {
        check(params, inputs, self.n_params(), self.in_dim)?;
        let split = self.out_dim * self.in_dim;
        let w = Matrix::from_vec(self.out_dim, self.in_dim, params[..split].to_vec())?;
        let bias = &params[split..];
        let mut h = Matrix::zeros(inputs.rows(), self.out_dim);
        gemm(T::one(), inputs, false, &w, true, T::zero(), &mut h);
        for i in 0..h.rows() {
            for (x, &b) in h.row_mut(i).iter_mut().zip(bias) {
                *x = (*x + b).tanh();
            }
        }
        Ok(h)
    }

    fn vjp(&self, params: &[T], inputs: &Matrix<T>, cotangent: &Matrix<T>) -> Result<Vec<T>> {
        let h = self.forward(params, inputs)?;
        if cotangent.shape() != h.shape() {
            return Err(CavError::invalid("cotangent shape mismatch"));
        }
        let mut pre = cotangent.clone();
        for (g, &hv) in pre.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *g *= T::one() - hv * hv;
        }
        let mut gw = Matrix::zeros(self.out_dim, self.in_dim);
        gemm(T::one(), &pre, true, inputs, false, T::zero(), &mut gw);
        let mut out = gw.into_vec();
        let ones = vec![T::one(); inputs.rows()];
        out.extend(pre.t_matvec(&ones));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_vjp_matches_manual_product() {
        let fmap = LinearFeatureMap { in_dim: 2, out_dim: 2 };
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let w = [1.0, 0.0, 0.5, 2.0];
        let h = fmap.forward(&w, &x).unwrap();
        assert_eq!(h.as_slice(), &[1.0, 4.5, 3.0, -0.5]);
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = FeatureMap::<f64>::vjp(&fmap, &w, &x, &c).unwrap();
        // dL/dW_ab = sum_i c_ia x_ib
        assert_eq!(g, vec![1.0, 2.0, 3.0, -1.0]);
    }

    #[test]
    fn tanh_vjp_matches_central_difference() {
        let fmap = TanhFeatureMap { in_dim: 3, out_dim: 2 };
        let x = Matrix::from_fn(4, 3, |i, j| ((i + 2 * j) as f64 * 0.37).sin());
        let p: Vec<f64> = (0..8).map(|k| (k as f64 * 0.61).cos() * 0.5).collect();
        let c = Matrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.3 + 0.1);
        let g = fmap.vjp(&p, &x, &c).unwrap();
        let obj = |q: &[f64]| -> f64 {
            let h = fmap.forward(q, &x).unwrap();
            h.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
        };
        for k in 0..p.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (obj(&plus) - obj(&minus)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8, "param {k}: {fd} vs {}", g[k]);
        }
    }
}
