//! Transformer encoder over `[instances, tokens, width]` activations.

use super::params::ParamSet;
use super::Mode;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Var};

/// Parameter indices of one encoder layer inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct EncoderLayerIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm1_gamma: usize,
    pub norm1_beta: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub norm2_gamma: usize,
    pub norm2_beta: usize,
}

impl EncoderLayerIndex {
    /// Registers a freshly initialised layer under `prefix`.
    pub fn register(params: &mut ParamSet, prefix: &str, d_model: usize, d_ff: usize, seed: u64) -> Result<Self> {
        let attn_std = 1.0 / (d_model as f64).sqrt();
        let ff_std = 1.0 / (d_ff as f64).sqrt();
        let sq = [d_model, d_model];
        Ok(EncoderLayerIndex {
            wq: params.push_normal(&format!("{prefix}.attn.wq"), &sq, seed, attn_std)?,
            wk: params.push_normal(&format!("{prefix}.attn.wk"), &sq, seed, attn_std)?,
            wv: params.push_normal(&format!("{prefix}.attn.wv"), &sq, seed, attn_std)?,
            wo: params.push_normal(&format!("{prefix}.attn.wo"), &sq, seed, attn_std)?,
            norm1_gamma: params.push_value(&format!("{prefix}.norm1.gamma"), &[d_model], 1.0)?,
            norm1_beta: params.push_value(&format!("{prefix}.norm1.beta"), &[d_model], 0.0)?,
            w1: params.push_normal(&format!("{prefix}.ffn.w1"), &[d_model, d_ff], seed, attn_std)?,
            b1: params.push_value(&format!("{prefix}.ffn.b1"), &[d_ff], 0.0)?,
            w2: params.push_normal(&format!("{prefix}.ffn.w2"), &[d_ff, d_model], seed, ff_std)?,
            b2: params.push_value(&format!("{prefix}.ffn.b2"), &[d_model], 0.0)?,
            norm2_gamma: params.push_value(&format!("{prefix}.norm2.gamma"), &[d_model], 1.0)?,
            norm2_beta: params.push_value(&format!("{prefix}.norm2.beta"), &[d_model], 0.0)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderSettings {
    pub n_heads: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub norm_first: bool,
    pub eps: f64,
}

/// Encoder result. `attention` holds each layer's softmax weights,
/// `[instances, heads, tokens, tokens]`, before dropout.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

pub(crate) fn ensure_finite(tape: &Tape, v: Var, stage: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage() })
    }
}

/// Multi-head scaled dot-product self-attention over the token axis.
fn self_attention(
    tape: &mut Tape,
    x: Var,
    vars: &[Var],
    idx: &EncoderLayerIndex,
    settings: &EncoderSettings,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (n, tokens, width) = (shape[0], shape[1], shape[2]);
    let heads = settings.n_heads;
    if width % heads != 0 {
        return Err(Error::shape(format!("width {width} not divisible by {heads} heads")));
    }
    let dk = width / heads;
    let split = |tape: &mut Tape, w: usize| -> Result<Var> {
        let p = tape.matmul(x, vars[w])?;
        let p = tape.reshape(p, &[n, tokens, heads, dk])?;
        tape.permute(p, &[0, 2, 1, 3])
    };
    let q = split(tape, idx.wq)?;
    let k = split(tape, idx.wk)?;
    let v = split(tape, idx.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores, 3)?;
    let dropped = mode.dropout(tape, weights, settings.dropout)?;
    let ctx = tape.matmul(dropped, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, tokens, width])?;
    let out = tape.matmul(ctx, vars[idx.wo])?;
    Ok((out, weights))
}

fn feed_forward(
    tape: &mut Tape,
    x: Var,
    vars: &[Var],
    idx: &EncoderLayerIndex,
    settings: &EncoderSettings,
    mode: &mut Mode,
) -> Result<Var> {
    let h = tape.matmul(x, vars[idx.w1])?;
    let h = tape.add(h, vars[idx.b1])?;
    let h = tape.activation(h, settings.activation);
    let h = mode.dropout(tape, h, settings.dropout)?;
    let o = tape.matmul(h, vars[idx.w2])?;
    let o = tape.add(o, vars[idx.b2])?;
    mode.dropout(tape, o, settings.dropout)
}

/// Runs every layer: attention and feed-forward sub-layers, each wrapped
/// in a residual connection and layer normalisation (after the residual by
/// default, before the sub-layer when `norm_first`). Zero layers is the
/// identity.
pub fn encoder_forward(
    tape: &mut Tape,
    tokens: Var,
    vars: &[Var],
    layers: &[EncoderLayerIndex],
    settings: &EncoderSettings,
    mode: &mut Mode,
) -> Result<EncoderOutput> {
    if tape.shape(tokens).len() != 3 {
        return Err(Error::shape(format!(
            "encoder expects [instances, tokens, width], got {:?}",
            tape.shape(tokens)
        )));
    }
    let mut x = tokens;
    let mut attention = Vec::with_capacity(layers.len());
    for (l, idx) in layers.iter().enumerate() {
        let norm1 = |tape: &mut Tape, v: Var| {
            tape.layer_norm(v, vars[idx.norm1_gamma], vars[idx.norm1_beta], 2, settings.eps)
        };
        let norm2 = |tape: &mut Tape, v: Var| {
            tape.layer_norm(v, vars[idx.norm2_gamma], vars[idx.norm2_beta], 2, settings.eps)
        };
        if settings.norm_first {
            let h = norm1(tape, x)?;
            let (a, w) = self_attention(tape, h, vars, idx, settings, mode)?;
            attention.push(w);
            x = tape.add(x, a)?;
            ensure_finite(tape, x, || format!("encoder layer {l} attention"))?;
            let h = norm2(tape, x)?;
            let f = feed_forward(tape, h, vars, idx, settings, mode)?;
            x = tape.add(x, f)?;
        } else {
            let (a, w) = self_attention(tape, x, vars, idx, settings, mode)?;
            attention.push(w);
            let r = tape.add(x, a)?;
            x = norm1(tape, r)?;
            ensure_finite(tape, x, || format!("encoder layer {l} attention"))?;
            let f = feed_forward(tape, x, vars, idx, settings, mode)?;
            let r = tape.add(x, f)?;
            x = norm2(tape, r)?;
        }
        ensure_finite(tape, x, || format!("encoder layer {l} feed-forward"))?;
    }
    Ok(EncoderOutput { tokens: x, attention })
}
