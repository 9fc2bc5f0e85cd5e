use serde::{Deserialize, Serialize};

use super::{Grads, HashModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut HashModel, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        let n = model.num_params();
        let glen: usize = grads.blocks().iter().map(|b| b.len()).sum();
        if glen != n {
            return Err(Error::Shape(format!("{glen} gradient entries for {n} parameters")));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut idx = 0;
        for (params, g) in model.blocks_mut().into_iter().zip(grads.blocks()) {
            for (p, &gi) in params.iter_mut().zip(g) {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                idx += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn scalar_model(v: f64) -> HashModel {
        let mut m = HashModel::zeros(1, 1, 1, 1);
        m.w1 = Matrix::from_vec(1, 1, vec![v]);
        m
    }

    fn scalar_grad(m: &HashModel, g: f64) -> Grads {
        let mut grads = Grads::zeros_like(m);
        grads.w1 = Matrix::from_vec(1, 1, vec![g]);
        grads
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut m = HashModel::new(2, 3, 4, 2, 1);
        let before = m.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut m, &Grads::zeros_like(&before)).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // m1 = 0.1 g, v1 = 0.001 g², m̂ = g, v̂ = g² → Δ = −lr g / (|g| + ε)
        let mut m = scalar_model(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        let g = scalar_grad(&m, 0.2);
        adam.step(&mut m, &g).unwrap();
        let expected = 0.5 - 1e-3 * 0.2 / (0.2 + 1e-8);
        assert!((m.w1.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut m = scalar_model(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            let g = scalar_grad(&m, -3.0);
            adam.step(&mut m, &g).unwrap();
        }
        assert!(m.w1.get(0, 0) > 0.05);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = scalar_model(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let g = scalar_grad(&m, f64::NAN);
        assert!(adam.step(&mut m, &g).is_err());
    }
}
