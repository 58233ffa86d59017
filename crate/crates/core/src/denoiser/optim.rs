//! Adam with bias correction and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> OptState<F> {
    pub fn new(config: AdamConfig, parameter_count: usize) -> Self {
        Self { config, step: 0, m: vec![F::zero(); parameter_count], v: vec![F::zero(); parameter_count] }
    }

    /// One update in place. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let clip = F::of(clip);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g * clip;
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            *p -= lr * *m / ((*v * inv_bc2).sqrt() + eps);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = OptState::<f64>::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.01, clip_norm: None, ..AdamConfig::default() };
        let mut s = OptState::<f64>::new(cfg, 3);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[0.3, -2.0, 50.0]).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn quadratic_bowl_decreases() {
        let cfg = AdamConfig { lr: 0.01, clip_norm: None, ..AdamConfig::default() };
        let mut s = OptState::<f64>::new(cfg, 2);
        let mut p = vec![3.0, -1.5];
        let f = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let mut last = f(&p);
        for _ in 0..100 {
            let g = [2.0 * p[0], 8.0 * p[1]];
            s.step(&mut p, &g).unwrap();
            let now = f(&p);
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = OptState::<f32>::new(AdamConfig::default(), 2);
        assert!(matches!(s.step(&mut [0.0; 3], &[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }
}
