//! Reversible instance normalisation.
//!
//! Each series instance is shifted by its own mean and scaled by
//! `sqrt(var + eps)` (population variance), optionally followed by a
//! per-channel affine `gamma·x + beta`. The statistics are kept so the
//! forecast can be mapped back with the exact inverse.

use serde::{Deserialize, Serialize};

/// Statistics of one series instance plus the affine applied to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: f64,
    pub var: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eps: f64,
}

impl RevinStats {
    /// `sqrt(var + eps)`.
    pub fn scale(&self) -> f64 {
        (self.var + self.eps).sqrt()
    }
}

/// Mean and population variance of a series.
pub fn instance_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Normalises `x` and returns the statistics needed to undo it.
pub fn revin_normalize(x: &[f64], gamma: f64, beta: f64, eps: f64) -> (Vec<f64>, RevinStats) {
    let (mean, var) = instance_moments(x);
    let stats = RevinStats {
        mean,
        var,
        gamma,
        beta,
        eps,
    };
    let scale = stats.scale();
    let out = x.iter().map(|v| gamma * (v - mean) / scale + beta).collect();
    (out, stats)
}

/// Inverse of [`revin_normalize`]: `((y − beta) / gamma) · sqrt(var + eps) + mean`.
pub fn revin_denormalize(y: &[f64], stats: &RevinStats) -> Vec<f64> {
    let scale = stats.scale();
    y.iter()
        .map(|v| (v - stats.beta) / stats.gamma * scale + stats.mean)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_normalises_to_zero() {
        let (out, stats) = revin_normalize(&[5.0, 5.0, 5.0], 1.0, 0.0, 1e-5);
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.var, 0.0);
        let back = revin_denormalize(&out, &stats);
        assert_eq!(back, vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn two_point_series() {
        let (out, _) = revin_normalize(&[1.0, 3.0], 1.0, 0.0, 1e-300);
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zeros_map_to_the_mean() {
        let (_, stats) = revin_normalize(&[6.0, 8.0, 7.0], 1.0, 0.0, 1e-5);
        for v in revin_denormalize(&[0.0; 4], &stats) {
            assert!((v - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalize_is_affine() {
        let (_, stats) = revin_normalize(&[0.3, -1.2, 4.4, 2.0], 1.7, -0.4, 1e-5);
        let y = [0.5, -2.0, 3.0];
        let a = 2.5;
        let d0 = revin_denormalize(&[0.0], &stats)[0];
        let dy = revin_denormalize(&y, &stats);
        let day = revin_denormalize(&y.map(|v| a * v), &stats);
        for (p, q) in dy.iter().zip(&day) {
            assert!(((q - d0) - a * (p - d0)).abs() < 1e-9);
        }
    }
}
