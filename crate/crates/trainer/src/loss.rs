//! Scalar losses with their gradients.

use dcr_core::scalar::{bce_with_logit, sigmoid};
use dcr_core::{Matrix, Scalar};

/// Mean softmax cross-entropy and its gradient in the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[u8]) -> (f64, Matrix<T>) {
    let n = logits.rows();
    let inv = T::one() / T::from_usize_lossy(n);
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let y = labels[i] as usize;
        total += (sum.ln() + max - row[y]).to_f64_lossy();
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum;
            *g = (p - if j == y { T::one() } else { T::zero() }) * inv;
        }
    }
    (total / n as f64, grad)
}

/// Mean squared error over every pixel, and its gradient in `recon`.
pub fn pixel_mse<T: Scalar>(recon: &Matrix<T>, target: &[T]) -> (f64, Matrix<T>) {
    let count = recon.as_slice().len();
    let scale = T::lit(2.0) / T::from_usize_lossy(count);
    let mut grad = Matrix::zeros(recon.rows(), recon.cols());
    let mut total = 0.0;
    for ((g, &r), &x) in grad.as_mut_slice().iter_mut().zip(recon.as_slice()).zip(target) {
        let d = r - x;
        total += (d * d).to_f64_lossy();
        *g = scale * d;
    }
    (total / count as f64, grad)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = j;
        }
    }
    best
}

/// Mean BCE of `sigmoid(h v)` against concept labels.
pub fn concept_bce<T: Scalar>(h: &Matrix<T>, labels: &[u8], v: &[T]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: T = h.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum();
        total += bce_with_logit(z, T::lit(y as f64)).to_f64_lossy();
    }
    total / labels.len() as f64
}

/// Logistic classifier with a bias, used as the alternating adversary.
#[derive(Clone, Debug)]
pub struct LinearAdversary<T> {
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Scalar> LinearAdversary<T> {
    pub fn zeros(dim: usize) -> Self {
        LinearAdversary { w: vec![T::zero(); dim], b: T::zero() }
    }

    fn logit(&self, h: &[T]) -> T {
        h.iter().zip(&self.w).map(|(&a, &b)| a * b).sum::<T>() + self.b
    }

    /// Mean BCE, accuracy, and the BCE gradient in `h`.
    pub fn evaluate(&self, h: &Matrix<T>, labels: &[u8]) -> (f64, f64, Matrix<T>) {
        let n = h.rows();
        let inv = T::one() / T::from_usize_lossy(n);
        let mut grad = Matrix::zeros(n, h.cols());
        let (mut loss, mut hits) = (0.0, 0usize);
        for i in 0..n {
            let z = self.logit(h.row(i));
            let y = T::lit(labels[i] as f64);
            loss += bce_with_logit(z, y).to_f64_lossy();
            hits += ((z > T::zero()) == (labels[i] == 1)) as usize;
            let r = (sigmoid(z) - y) * inv;
            for (g, &w) in grad.row_mut(i).iter_mut().zip(&self.w) {
                *g = r * w;
            }
        }
        (loss / n as f64, hits as f64 / n as f64, grad)
    }

    /// One gradient step on the mean BCE.
    pub fn step(&mut self, h: &Matrix<T>, labels: &[u8], lr: T) {
        let n = h.rows();
        let inv = T::one() / T::from_usize_lossy(n);
        let mut gw = vec![T::zero(); self.w.len()];
        let mut gb = T::zero();
        for i in 0..n {
            let r = (sigmoid(self.logit(h.row(i))) - T::lit(labels[i] as f64)) * inv;
            gb += r;
            for (g, &x) in gw.iter_mut().zip(h.row(i)) {
                *g += r * x;
            }
        }
        for (w, g) in self.w.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        self.b -= lr * gb;
    }
}
