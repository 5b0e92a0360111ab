use std::sync::Arc;

use super::config::{ModelConfig, ModelKind};
use super::encoder::{encoder_forward, ensure_finite, EncoderLayerIndex, EncoderSettings};
use super::mixing::{has_wraparound_duplicates, mixed_channel_indices, patch_gather_index};
use super::params::ParamSet;
use super::{check_input, instance_normalize, Forecaster, Forward, InstanceNorm, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Debug, Clone)]
struct Index {
    revin_gamma: Option<usize>,
    revin_beta: Option<usize>,
    proj_w: usize,
    proj_b: usize,
    pos: usize,
    layers: Vec<EncoderLayerIndex>,
    head_w: usize,
    head_b: usize,
}

/// Mixed-channels patch transformer.
///
/// Per batch: instance-normalise every channel, treat each channel of each
/// sample as its own instance, stack its mixed companion channels, cut the
/// stack into patches, project them to tokens, add the positional table,
/// encode, map the flattened tokens to `h` values and undo the
/// normalisation. Only the target channel is forecast per instance.
#[derive(Debug, Clone)]
pub struct Mcformer {
    config: ModelConfig,
    params: ParamSet,
    index: Index,
    mix_table: Vec<Vec<usize>>,
    tokens: usize,
}

impl Mcformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.kind != ModelKind::Mcformer {
            return Err(Error::config("Mcformer::new needs kind = mcformer"));
        }
        let tokens = config.tokens()?;
        let (m, p_model) = (config.channels, config.d_model);
        let mut params = ParamSet::new();
        let (revin_gamma, revin_beta) = if config.revin_affine {
            (
                Some(params.push_value("revin.gamma", &[m], 1.0)?),
                Some(params.push_value("revin.beta", &[m], 0.0)?),
            )
        } else {
            (None, None)
        };
        let pw = config.patch_width();
        let proj_w = params.push_normal("proj.weight", &[pw, p_model], seed, 1.0 / (pw as f64).sqrt())?;
        let proj_b = params.push_value("proj.bias", &[p_model], 0.0)?;
        let pos = params.push_normal("pos", &[tokens, p_model], seed, 0.02)?;
        let layers = (0..config.n_layers)
            .map(|l| EncoderLayerIndex::register(&mut params, &format!("layers.{l}"), p_model, config.d_ff, seed))
            .collect::<Result<Vec<_>>>()?;
        let flat = tokens * p_model;
        let head_w = params.push_normal("head.weight", &[flat, config.horizon], seed, 1.0 / (flat as f64).sqrt())?;
        let head_b = params.push_value("head.bias", &[config.horizon], 0.0)?;

        let mix_table = (0..m)
            .map(|i| mixed_channel_indices(m, config.mix, i))
            .collect::<Result<Vec<_>>>()?;
        if has_wraparound_duplicates(m, config.mix) {
            log::warn!(
                "channel walk with M={m}, m={} wraps onto repeated channels; repeats replaced by unused channels",
                config.mix
            );
        }
        Ok(Mcformer {
            config,
            params,
            index: Index {
                revin_gamma,
                revin_beta,
                proj_w,
                proj_b,
                pos,
                layers,
                head_w,
                head_b,
            },
            mix_table,
            tokens,
        })
    }

    /// Token count N.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Mixed channel indices of every target channel.
    pub fn mix_table(&self) -> &[Vec<usize>] {
        &self.mix_table
    }

    /// Patches the (affine-normalised) `[B, L, M]` input, projects every
    /// patch to `P` values and adds the positional table. Result:
    /// `[B·M, N, P]`.
    pub fn patchify_project(&self, tape: &mut Tape, z: Var, vars: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let batch = tape.shape(z)[0];
        let index: Arc<[usize]> = patch_gather_index(
            batch,
            cfg.lookback,
            cfg.channels,
            cfg.patch_len,
            cfg.stride,
            self.tokens,
            &self.mix_table,
        )
        .into();
        let patches = tape.gather(z, index, &[batch * cfg.channels, self.tokens, cfg.patch_width()])?;
        let tok = tape.matmul(patches, vars[self.index.proj_w])?;
        let tok = tape.add(tok, vars[self.index.proj_b])?;
        tape.add(tok, vars[self.index.pos])
    }

    fn encoder_settings(&self) -> EncoderSettings {
        EncoderSettings {
            n_heads: self.config.n_heads,
            dropout: self.config.dropout,
            activation: self.config.activation,
            norm_first: self.config.norm_first,
            eps: self.config.layer_norm_eps,
        }
    }

    /// Undoes the affine and the instance statistics on `[B, h, M]`.
    fn denormalize(&self, tape: &mut Tape, y: Var, vars: &[Var], norm: InstanceNorm) -> Result<Var> {
        let mut y = y;
        if let (Some(g), Some(b)) = (self.index.revin_gamma, self.index.revin_beta) {
            y = tape.sub(y, vars[b])?;
            y = tape.div(y, vars[g])?;
        }
        let scale = tape.constant(norm.scale);
        let mean = tape.constant(norm.mean);
        let y = tape.mul(y, scale)?;
        tape.add(y, mean)
    }
}

impl Forecaster for Mcformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: &crate::numerics::Tensor, mode: &mut Mode) -> Result<Forward> {
        let cfg = &self.config;
        let batch = check_input(cfg, x)?;
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} variables bound for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let norm = instance_normalize(x, cfg.revin_eps)?;
        let mut z = tape.constant(norm.normalized.clone());
        if let (Some(g), Some(b)) = (self.index.revin_gamma, self.index.revin_beta) {
            z = tape.mul(z, vars[g])?;
            z = tape.add(z, vars[b])?;
        }
        let tokens = self.patchify_project(tape, z, vars)?;
        ensure_finite(tape, tokens, || "patch projection".into())?;

        let enc = encoder_forward(tape, tokens, vars, &self.index.layers, &self.encoder_settings(), mode)?;

        let instances = batch * cfg.channels;
        let flat = tape.reshape(enc.tokens, &[instances, self.tokens * cfg.d_model])?;
        let y = tape.matmul(flat, vars[self.index.head_w])?;
        let y = tape.add(y, vars[self.index.head_b])?;
        ensure_finite(tape, y, || "prediction head".into())?;
        let y = tape.reshape(y, &[batch, cfg.channels, cfg.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let prediction = self.denormalize(tape, y, vars, norm)?;
        ensure_finite(tape, prediction, || "denormalisation".into())?;
        Ok(Forward {
            prediction,
            attention: enc.attention,
        })
    }
}
