use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Pearson coefficients of two channels over every sliding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub a: usize,
    pub b: usize,
    pub window: usize,
    /// Entry `t` covers rows `t .. t + window`; NaN where either channel is
    /// constant over the window.
    pub values: Vec<f64>,
}

/// Population Pearson coefficient of every length-`w` window of `x` and `y`.
///
/// Each window is centred on its own means before the co-moments are
/// summed, so the cost is `O(len · w)`. Results are clamped to `[-1, 1]`.
pub fn rolling_pearson(x: &[f64], y: &[f64], w: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::InvalidWindow(format!(
            "series lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if w < 2 {
        return Err(Error::InvalidWindow(format!("window must be >= 2, got {w}")));
    }
    if x.len() < w {
        return Err(Error::InvalidWindow(format!(
            "window {w} longer than the series ({})",
            x.len()
        )));
    }
    let flat_x = constant_runs(x, w);
    let flat_y = constant_runs(y, w);
    let n = w as f64;
    Ok((0..=x.len() - w)
        .map(|t| {
            if flat_x[t] || flat_y[t] {
                return f64::NAN;
            }
            let (xs, ys) = (&x[t..t + w], &y[t..t + w]);
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in xs.iter().zip(ys) {
                let (dx, dy) = (a - mx, b - my);
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
        })
        .collect())
}

/// `out[t]` is true when `v[t..t + w]` holds a single repeated value.
fn constant_runs(v: &[f64], w: usize) -> Vec<bool> {
    // run[i]: length of the run of equal values ending at i
    let mut run = vec![1usize; v.len()];
    for i in 1..v.len() {
        if v[i] == v[i - 1] {
            run[i] = run[i - 1] + 1;
        }
    }
    (0..=v.len() - w).map(|t| run[t + w - 1] >= w).collect()
}

/// Rolling correlation of channels `a` and `b` of `ds` with window `w`.
pub fn rolling_correlation(ds: &Dataset, a: usize, b: usize, w: usize) -> Result<CorrelationSeries> {
    let m = ds.channels();
    if a >= m || b >= m {
        return Err(Error::InvalidWindow(format!(
            "channel pair ({a}, {b}) out of range for {m} channels"
        )));
    }
    if a == b {
        return Err(Error::InvalidWindow(format!("channels must differ, got ({a}, {b})")));
    }
    let values = rolling_pearson(&ds.column(a), &ds.column(b), w)?;
    Ok(CorrelationSeries { a, b, window: w, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_window_is_nan() {
        let x = [1.0, 2.0, 2.0, 2.0, 3.0];
        let y = [0.5, 0.1, 0.7, 0.2, 0.9];
        let r = rolling_pearson(&x, &y, 3).unwrap();
        assert!(!r[0].is_nan() && r[1].is_nan() && !r[2].is_nan());
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(matches!(rolling_pearson(&[1.0, 2.0], &[1.0, 2.0], 1), Err(Error::InvalidWindow(_))));
        assert!(matches!(rolling_pearson(&[1.0, 2.0], &[1.0, 2.0], 3), Err(Error::InvalidWindow(_))));
    }
}
