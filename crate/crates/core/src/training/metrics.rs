use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::shape(format!(
            "metric inputs of length {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Mean absolute error over all elements.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Forecast errors over a window set, overall and per horizon step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub per_step_mse: Vec<f64>,
    pub per_step_mae: Vec<f64>,
    pub windows: usize,
}

/// Running sums for [`Metrics`], filled in window order.
#[derive(Debug, Clone)]
pub(crate) struct MetricAccumulator {
    horizon: usize,
    channels: usize,
    sq: Vec<f64>,
    abs: Vec<f64>,
    windows: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, channels: usize) -> Self {
        MetricAccumulator {
            horizon,
            channels,
            sq: vec![0.0; horizon],
            abs: vec![0.0; horizon],
            windows: 0,
        }
    }

    /// Adds one `horizon × channels` window.
    pub fn push(&mut self, y: &[f64], yhat: &[f64]) -> Result<()> {
        check(y, yhat)?;
        if y.len() != self.horizon * self.channels {
            return Err(Error::shape(format!(
                "window of {} values, expected {}x{}",
                y.len(),
                self.horizon,
                self.channels
            )));
        }
        for t in 0..self.horizon {
            for c in 0..self.channels {
                let d = y[t * self.channels + c] - yhat[t * self.channels + c];
                self.sq[t] += d * d;
                self.abs[t] += d.abs();
            }
        }
        self.windows += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<Metrics> {
        if self.windows == 0 {
            return Err(Error::InsufficientData { needed: 1, available: 0 });
        }
        let per = (self.windows * self.channels) as f64;
        let total = per * self.horizon as f64;
        Ok(Metrics {
            mse: self.sq.iter().sum::<f64>() / total,
            mae: self.abs.iter().sum::<f64>() / total,
            per_step_mse: self.sq.iter().map(|s| s / per).collect(),
            per_step_mae: self.abs.iter().map(|s| s / per).collect(),
            windows: self.windows,
        })
    }
}
