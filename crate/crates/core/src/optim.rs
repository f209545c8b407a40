//! Adam with bias correction; the step mutates parameters in place (the
//! tensor layer's copy-on-write keeps any live graphs consistent).

use crate::autograd::Gradients;
use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state over a fixed parameter list; moments are kept in parameter
/// order, so updates are deterministic.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::with_config(AdamConfig::default())
    }

    pub fn with_config(cfg: AdamConfig) -> Self {
        Adam { cfg, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over `params` with gradients looked up by tensor identity.
    /// A parameter without a gradient is treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &Gradients<T>,
        lr: T,
    ) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state covers {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(self.steps as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(self.steps as i32));

        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::Config(format!(
                    "optimizer state for parameter {i} has {} elements, tensor has {}",
                    self.m[i].len(),
                    p.numel()
                )));
            }
            let g_owned;
            let g: &[T] = match grads.get_raw(p) {
                Some(g) => g,
                None => {
                    g_owned = vec![T::zero(); p.numel()];
                    &g_owned
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // From zero state: mhat = g, vhat = g^2, so the step is
        // -lr * g / (|g| + eps) = -lr (up to eps) for g = 1.
        let mut p = Tensor::from_vec(vec![1.0f64], &[1]).unwrap().requiring_grad();
        let loss = p.scale(1.0).sum_all();
        let grads = backward(&loss).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &grads, 5e-4).unwrap();
        let delta = p.data()[0] - 1.0;
        assert!((delta + 5e-4).abs() < 1e-10, "delta {delta}");
    }

    #[test]
    fn zero_gradient_from_zero_state_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![3.0f64, -2.0], &[2]).unwrap().requiring_grad();
        // Gradients that do not mention p at all.
        let q = Tensor::from_vec(vec![1.0f64], &[1]).unwrap().requiring_grad();
        let grads = backward(&q.scale(2.0).sum_all()).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &grads, 1e-2).unwrap();
        assert_eq!(p.data(), &[3.0, -2.0]);
    }

    #[test]
    fn two_steps_match_hand_rolled_recurrence() {
        let g1 = 0.5f64;
        let g2 = -1.5f64;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 2.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1f64(b1, t));
            let vhat = v / (1.0 - b1f64(b2, t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        fn b1f64(b: f64, t: i32) -> f64 {
            b.powi(t)
        }

        let mut p = Tensor::from_vec(vec![2.0f64], &[1]).unwrap().requiring_grad();
        let mut adam = Adam::new();
        for g in [g1, g2] {
            let loss = p.scale(g).sum_all();
            let grads = backward(&loss).unwrap();
            adam.step(&mut [&mut p], &grads, lr).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-12, "{} vs {x}", p.data()[0]);
    }

    #[test]
    fn param_count_mismatch_is_rejected() {
        let mut p = Tensor::from_vec(vec![1.0f64], &[1]).unwrap().requiring_grad();
        let mut q = Tensor::from_vec(vec![1.0f64], &[1]).unwrap().requiring_grad();
        let loss = p.scale(1.0).sum_all();
        let grads = backward(&loss).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &grads, 1e-3).unwrap();
        assert!(adam.step(&mut [&mut p, &mut q], &grads, 1e-3).is_err());
    }
}
