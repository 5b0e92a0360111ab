use serde::{Deserialize, Serialize};

use crate::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

/// Scales all gradients in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}

/// Adam with bias correction. Moment buffers mirror the parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from explicit gradients.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &mut [Vec<f64>]) {
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(grads, c);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// One update from the gradients accumulated on `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        let mut grads: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        let mut slices: Vec<&mut [f64]> = params.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
        self.apply(&mut slices, &mut grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_exactly() {
        let mut g = vec![vec![6.0], vec![8.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 10.0);
        assert_eq!(g, vec![vec![6.0 * 0.1], vec![8.0 * 0.1]]);
        let mut small = vec![vec![0.3]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.3]]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam {
            config: AdamConfig::default(),
            step: 0,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        adam.apply(&mut [&mut p], &mut [vec![0.0, 0.0]]);
        assert_eq!(p, vec![1.0, -2.0]);
    }
}
