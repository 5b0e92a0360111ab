use super::Dataset;
use crate::error::{Error, Result};

/// One look-back window and the horizon that immediately follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `lookback × channels`, time-major.
    pub x: Vec<f64>,
    /// `horizon × channels`, time-major.
    pub y: Vec<f64>,
    /// First row of `x` in the source dataset.
    pub t0: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
}

/// Number of windows [`make_windows`] produces, or `None` when the series is
/// too short.
pub fn window_count(rows: usize, lookback: usize, horizon: usize, stride: usize) -> Option<usize> {
    let span = lookback + horizon;
    (stride > 0 && rows >= span).then(|| (rows - span) / stride + 1)
}

/// Cuts every `(x, y)` pair starting at `0, stride, 2·stride, …`, in time
/// order.
pub fn make_windows(ds: &Dataset, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config(format!(
            "window sizes must be positive (L={lookback}, h={horizon}, stride={stride})"
        )));
    }
    let count = window_count(ds.rows(), lookback, horizon, stride).ok_or(Error::InsufficientData {
        needed: lookback + horizon,
        available: ds.rows(),
    })?;
    let m = ds.channels();
    let values = ds.values();
    Ok((0..count)
        .map(|k| {
            let t0 = k * stride;
            let split = (t0 + lookback) * m;
            WindowSample {
                x: values[t0 * m..split].to_vec(),
                y: values[split..split + horizon * m].to_vec(),
                t0,
                lookback,
                horizon,
                channels: m,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: usize) -> Dataset {
        Dataset::new((0..rows).map(|v| v as f64).collect(), vec!["v".into()], "", "").unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ds(10), 4, 2, 1).unwrap().len(), 5);
        assert_eq!(make_windows(&ds(6), 4, 2, 1).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&ds(5), 4, 2, 1),
            Err(Error::InsufficientData { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn target_follows_input() {
        let w = make_windows(&ds(10), 4, 2, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].t0, 3);
        assert_eq!(w[1].x, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w[1].y, vec![7.0, 8.0]);
    }
}
