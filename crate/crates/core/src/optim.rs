//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<P: Parameters>(config: AdamWConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let g_all = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Mlp};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g) (eps aside).
        let mut p = Mlp {
            layers: vec![Linear::zeros(2, 1)],
            activation: crate::nn::Activation::Identity,
        };
        let mut g = p.clone();
        g.layers[0].weight.data = vec![3.0, -0.5];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &g);
        assert!((p.layers[0].weight.data[0] + 1e-3).abs() < 1e-9);
        assert!((p.layers[0].weight.data[1] - 1e-3).abs() < 1e-9);
        assert_eq!(p.layers[0].bias, vec![0.0]);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = Mlp {
            layers: vec![Linear::zeros(1, 1)],
            activation: crate::nn::Activation::Identity,
        };
        p.layers[0].weight.data = vec![2.0];
        let g = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g);
        assert!((p.layers[0].weight.data[0] - (2.0 - 1e-3 * 0.01 * 2.0)).abs() < 1e-15);
    }
}
