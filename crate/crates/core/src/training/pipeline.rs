use super::config::TrainConfig;
use super::fit::{evaluate, fit, ForecastReport};
use crate::data::{chronological_split, make_windows, standardize, Dataset, Scaler, SplitSpec, WindowSample};
use crate::error::{Error, Result};
use crate::model::{build_model, Forecaster, ModelConfig};

/// Standardised train/validation/test windows of one dataset.
#[derive(Debug, Clone)]
pub struct WindowSets {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub scaler: Scaler,
}

/// Splits `ds` chronologically, standardises every segment with the
/// training statistics and cuts stride-1 windows from each.
pub fn prepare_windows(ds: &Dataset, split: &SplitSpec, lookback: usize, horizon: usize) -> Result<WindowSets> {
    let (train, val, test) = chronological_split(ds, split)?;
    let needed = lookback + horizon;
    for (name, seg) in [("train", &train), ("val", &val), ("test", &test)] {
        if seg.rows() < needed {
            return Err(Error::Config(format!(
                "{name} segment has {} rows, L+h needs {needed}",
                seg.rows()
            )));
        }
    }
    let (train, rest, scaler) = standardize(&train, &[&val, &test])?;
    Ok(WindowSets {
        train: make_windows(&train, lookback, horizon, 1)?,
        val: make_windows(&rest[0], lookback, horizon, 1)?,
        test: make_windows(&rest[1], lookback, horizon, 1)?,
        scaler,
    })
}

/// Builds a model seeded with `train.seed`, fits it and records the test
/// metrics in the report.
pub fn train_and_evaluate(
    model: &ModelConfig,
    train: &TrainConfig,
    sets: &WindowSets,
) -> Result<(Box<dyn Forecaster>, ForecastReport)> {
    let mut net = build_model(model, train.seed)?;
    let mut report = fit(net.as_mut(), &sets.train, &sets.val, train)?;
    report.test = Some(evaluate(net.as_ref(), &sets.test, train.batch_size)?);
    Ok((net, report))
}
