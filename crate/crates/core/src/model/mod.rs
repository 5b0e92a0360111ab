//! Forecasting models: the mixed-channels patch transformer and a linear
//! baseline, both behind [`Forecaster`].

mod config;
mod encoder;
mod linear;
mod mcformer;
mod mixing;
mod params;
mod revin;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use config::{token_count, ModelConfig, ModelKind};
pub use encoder::{encoder_forward, EncoderLayerIndex, EncoderOutput, EncoderSettings};
pub use linear::LinearBaseline;
pub use mcformer::Mcformer;
pub use mixing::{has_wraparound_duplicates, mix_channels, mixed_channel_indices, patch_gather_index};
pub use params::ParamSet;
pub(crate) use params::mix_seed;
pub use revin::{instance_moments, revin_denormalize, revin_normalize, RevinStats};

use crate::error::{Error, Result};
use crate::numerics::{grad_check, Tape, Tensor, Var};

/// Training draws dropout masks from the generator; evaluation is
/// deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    /// Inverted dropout with drop probability `rate`.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Output of one forward pass. `prediction` is `[B, h, M]`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub prediction: Var,
    pub attention: Vec<Var>,
}

pub trait Forecaster: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the forward pass of a `[B, L, M]` batch on `tape`, with
    /// `vars` bound from [`ParamSet::bind`].
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: &Tensor, mode: &mut Mode) -> Result<Forward>;

    /// Evaluation-mode forecast `[B, h, M]`.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, x, &mut Mode::Eval)?;
        Ok(tape.value(out.prediction).clone().with_requires_grad(false))
    }
}

/// Builds the model selected by `config.kind`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Box<dyn Forecaster>> {
    Ok(match config.kind {
        ModelKind::Mcformer => Box::new(Mcformer::new(config.clone(), seed)?),
        ModelKind::Linear => Box::new(LinearBaseline::new(config.clone(), seed)?),
    })
}

/// Mean squared error between a forward pass on `x` and `target`,
/// recorded on `tape`.
pub fn mse_on_tape(tape: &mut Tape, prediction: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(prediction, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Finite-difference check of the evaluation-mode MSE loss with respect to
/// every parameter tensor. Returns `(name, max relative error)` per tensor.
pub fn gradient_check(model: &dyn Forecaster, x: &Tensor, target: &Tensor, eps: f64) -> Result<Vec<(String, f64)>> {
    let params = model.params();
    let mut report = Vec::with_capacity(params.len());
    for (g, (name, tensor)) in params.iter().enumerate() {
        let loss = |tape: &mut Tape, probe: Var| -> Result<Var> {
            let vars: Vec<Var> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == g {
                        probe
                    } else {
                        tape.constant(t.clone().with_requires_grad(false))
                    }
                })
                .collect();
            let out = model.forward(tape, &vars, x, &mut Mode::Eval)?;
            mse_on_tape(tape, out.prediction, target)
        };
        let err = grad_check(loss, &tensor.clone().with_requires_grad(false), eps)?;
        report.push((name.to_string(), err));
    }
    Ok(report)
}

/// Per-sample, per-channel normalisation of a `[B, L, M]` batch.
pub(crate) struct InstanceNorm {
    pub normalized: Tensor,
    /// `[B, 1, M]`
    pub mean: Tensor,
    /// `[B, 1, M]`, `sqrt(var + eps)`
    pub scale: Tensor,
}

pub(crate) fn instance_normalize(x: &Tensor, eps: f64) -> Result<InstanceNorm> {
    let (b, l, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut normalized = vec![0.0; b * l * m];
    let mut mean = vec![0.0; b * m];
    let mut scale = vec![0.0; b * m];
    let data = x.data();
    for s in 0..b {
        for c in 0..m {
            let col: Vec<f64> = (0..l).map(|t| data[(s * l + t) * m + c]).collect();
            let (norm, stats) = revin_normalize(&col, 1.0, 0.0, eps);
            for (t, v) in norm.into_iter().enumerate() {
                normalized[(s * l + t) * m + c] = v;
            }
            mean[s * m + c] = stats.mean;
            scale[s * m + c] = stats.scale();
        }
    }
    Ok(InstanceNorm {
        normalized: Tensor::from_vec(&[b, l, m], normalized)?,
        mean: Tensor::from_vec(&[b, 1, m], mean)?,
        scale: Tensor::from_vec(&[b, 1, m], scale)?,
    })
}

/// Validates a `[B, L, M]` batch and returns `B`.
pub(crate) fn check_input(cfg: &ModelConfig, x: &Tensor) -> Result<usize> {
    let s = x.shape();
    if s.len() != 3 || s[1] != cfg.lookback || s[2] != cfg.channels || s[0] == 0 {
        return Err(Error::shape(format!(
            "input {:?} does not match [B, {}, {}]",
            s, cfg.lookback, cfg.channels
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric {
            stage: "input".into(),
        });
    }
    Ok(s[0])
}
