//! First-order optimisers over a flat parameter vector.

use dcr_core::Scalar;

use crate::config::OptimizerKind;

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![T::zero(); num_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { kind, lr: T::lit(lr), step: 0, m: vec![T::zero(); num_params], v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len(), "gradient length");
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let c1 = T::one() - T::lit(beta1.powi(self.step as i32));
                let c2 = T::one() - T::lit(beta2.powi(self.step as i32));
                let step = self.lr / c1;
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    params[i] -= step * self.m[i] / ((self.v[i] / c2).sqrt() + eps);
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::lit(momentum);
                for i in 0..params.len() {
                    self.m[i] = mu * self.m[i] + grads[i];
                    params[i] -= self.lr * self.m[i];
                }
            }
        }
    }
}
