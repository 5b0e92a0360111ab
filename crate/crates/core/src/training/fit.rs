use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{config_hash, TrainConfig};
use super::metrics::{MetricAccumulator, Metrics};
use super::optim::Adam;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{mix_seed, mse_on_tape, Forecaster, ModelConfig, Mode};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

/// Everything a run produces apart from the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Validation metrics of the restored best parameters.
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub wall_time_s: f64,
}

impl ForecastReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mse).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_windows(cfg: &ModelConfig, windows: &[&WindowSample], what: &str) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    for w in windows {
        if w.lookback != cfg.lookback || w.horizon != cfg.horizon || w.channels != cfg.channels {
            return Err(Error::shape(format!(
                "{what} window (L={}, h={}, M={}) does not match model (L={}, h={}, M={})",
                w.lookback, w.horizon, w.channels, cfg.lookback, cfg.horizon, cfg.channels
            )));
        }
    }
    Ok(())
}

/// Stacks windows into `[B, L, M]` inputs and `[B, h, M]` targets.
pub fn stack_batch(windows: &[&WindowSample]) -> Result<(Tensor, Tensor)> {
    let first = windows.first().ok_or(Error::InsufficientData { needed: 1, available: 0 })?;
    let (l, h, m) = (first.lookback, first.horizon, first.channels);
    let b = windows.len();
    let mut x = Vec::with_capacity(b * l * m);
    let mut y = Vec::with_capacity(b * h * m);
    for w in windows {
        x.extend_from_slice(&w.x);
        y.extend_from_slice(&w.y);
    }
    Ok((Tensor::from_vec(&[b, l, m], x)?, Tensor::from_vec(&[b, h, m], y)?))
}

/// Forecast errors of `model` over `windows` in evaluation mode.
pub fn evaluate(model: &dyn Forecaster, windows: &[WindowSample], batch_size: usize) -> Result<Metrics> {
    let refs: Vec<&WindowSample> = windows.iter().collect();
    evaluate_refs(model, &refs, batch_size)
}

fn evaluate_refs(model: &dyn Forecaster, windows: &[&WindowSample], batch_size: usize) -> Result<Metrics> {
    let cfg = model.config();
    check_windows(cfg, windows, "evaluation")?;
    let mut acc = MetricAccumulator::new(cfg.horizon, cfg.channels);
    let per = cfg.horizon * cfg.channels;
    for chunk in windows.chunks(batch_size.max(1)) {
        let (x, _) = stack_batch(chunk)?;
        let pred = model.predict(&x)?;
        for (w, p) in chunk.iter().zip(pred.data().chunks(per)) {
            acc.push(&w.y, p)?;
        }
    }
    acc.finish()
}

fn tag_numeric(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { stage } => Error::Numeric {
            stage: format!("epoch {epoch} batch {batch}: {stage}"),
        },
        other => other,
    }
}

/// Trains `model` with Adam on MSE, reshuffling the training windows every
/// epoch, and leaves the parameters of the best validation epoch in place.
pub fn fit(
    model: &mut dyn Forecaster,
    train: &[WindowSample],
    val: &[WindowSample],
    tcfg: &TrainConfig,
) -> Result<ForecastReport> {
    tcfg.validate()?;
    let started = Instant::now();
    let mcfg = model.config().clone();
    let train: Vec<&WindowSample> = train.iter().step_by(tcfg.window_stride).collect();
    let val: Vec<&WindowSample> = val.iter().collect();
    check_windows(&mcfg, &train, "training")?;
    check_windows(&mcfg, &val, "validation")?;

    let mut adam = Adam::new(tcfg.adam(), model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, u64::MAX));
    let mut stopper = EarlyStopping::new(tcfg.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=tcfg.max_epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let (x, y) = stack_batch(chunk)?;
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape, true);
            let out = model
                .forward(&mut tape, &vars, &x, &mut Mode::Train(&mut dropout_rng))
                .map_err(|e| tag_numeric(e, epoch, bi))?;
            let loss = mse_on_tape(&mut tape, out.prediction, &y)?;
            let lv = tape.data(loss)[0];
            if !lv.is_finite() {
                return Err(tag_numeric(Error::Numeric { stage: "loss".into() }, epoch, bi));
            }
            tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&tape, &vars)?;
            adam.step(params);
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        let vm = evaluate_refs(model, &val, tcfg.batch_size).map_err(|e| tag_numeric(e, epoch, 0))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_mse: vm.mse,
            val_mae: vm.mae,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val mse {:.6} mae {:.6}",
            record.train_loss,
            record.val_mse,
            record.val_mae
        );
        epochs.push(record);
        match stopper.observe(epoch, vm.mse) {
            StopDecision::Improved => best_params = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < tcfg.max_epochs;
                break;
            }
        }
    }

    model.params_mut().load_values(&best_params)?;
    model.params_mut().zero_grads();
    let val_metrics = evaluate_refs(model, &val, tcfg.batch_size)?;
    Ok(ForecastReport {
        config_hash: config_hash(&mcfg, tcfg),
        seed: tcfg.seed,
        parameter_count: model.params().num_values(),
        model: mcfg,
        train: tcfg.clone(),
        epochs,
        best_epoch: stopper.best().map(|(e, _)| e),
        stopped_early,
        val: Some(val_metrics),
        test: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
