use super::config::{ModelConfig, ModelKind};
use super::encoder::ensure_finite;
use super::params::ParamSet;
use super::{check_input, instance_normalize, Forecaster, Forward, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// One shared `L → h` linear map per channel on instance-normalised input.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    config: ModelConfig,
    params: ParamSet,
}

impl LinearBaseline {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Linear {
            return Err(Error::config("LinearBaseline::new needs kind = linear"));
        }
        config.validate()?;
        let mut params = ParamSet::new();
        let l = config.lookback;
        params.push_normal("linear.weight", &[l, config.horizon], seed, 1.0 / (l as f64).sqrt())?;
        params.push_value("linear.bias", &[config.horizon], 0.0)?;
        Ok(LinearBaseline { config, params })
    }
}

impl Forecaster for LinearBaseline {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: &Tensor, _mode: &mut Mode) -> Result<Forward> {
        check_input(&self.config, x)?;
        if vars.len() != 2 {
            return Err(Error::shape(format!("{} variables bound for 2 parameters", vars.len())));
        }
        let norm = instance_normalize(x, self.config.revin_eps)?;
        let z = tape.constant(norm.normalized);
        let z = tape.permute(z, &[0, 2, 1])?;
        let y = tape.matmul(z, vars[0])?;
        let y = tape.add(y, vars[1])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let scale = tape.constant(norm.scale);
        let mean = tape.constant(norm.mean);
        let y = tape.mul(y, scale)?;
        let prediction = tape.add(y, mean)?;
        ensure_finite(tape, prediction, || "linear head".into())?;
        Ok(Forward {
            prediction,
            attention: Vec::new(),
        })
    }
}
