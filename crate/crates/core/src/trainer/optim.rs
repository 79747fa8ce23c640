use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(3, 0.1, [0.9, 0.999], 1e-12, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -4.0, 0.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 1.9).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(1, 0.1, [0.9, 0.999], 1e-8, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn matches_hand_computed_second_step() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut opt = AdamW::new(1, lr, [b1, b2], eps, 0.0);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        opt.step(&mut p, &[-0.5]).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -0.5;
        let v: f64 = 0.999 * 0.001 + 0.001 * 0.25;
        let m_hat = m / (1.0 - b1 * b1);
        let v_hat = v / (1.0 - b2 * b2);
        let expected = -lr * 1.0 / (1.0 + eps) - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(2, 0.05, [0.9, 0.999], 1e-8, 0.0);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn length_mismatch_errors() {
        let mut opt = AdamW::new(2, 0.1, [0.9, 0.999], 1e-8, 0.0);
        assert!(opt.step(&mut [0.0], &[0.0]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }
}
