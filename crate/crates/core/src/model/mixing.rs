use std::collections::BTreeSet;

use super::revin::revin_normalize;
use crate::error::{Error, Result};

fn raw_walk(channels: usize, mix: usize, target: usize) -> Vec<usize> {
    if mix == 0 {
        return vec![target];
    }
    let interval = channels / mix;
    (0..=mix).map(|k| (target + k * interval) % channels).collect()
}

fn check(channels: usize, mix: usize, target: usize) -> Result<()> {
    if channels == 0 || target >= channels {
        return Err(Error::config(format!(
            "target channel {target} out of range for M={channels}"
        )));
    }
    if mix >= channels {
        return Err(Error::config(format!("m must be < M (m={mix}, M={channels})")));
    }
    Ok(())
}

/// Channels stacked for `target`: `(target + k·⌊M/m⌋) mod M` for
/// `k = 0..=m`, target first.
///
/// When the walk wraps onto a channel it already visited, the repeat is
/// replaced by the lowest-index channel that the walk never reaches and that
/// has not been used as a replacement yet.
pub fn mixed_channel_indices(channels: usize, mix: usize, target: usize) -> Result<Vec<usize>> {
    check(channels, mix, target)?;
    let walk = raw_walk(channels, mix, target);
    let visited: BTreeSet<usize> = walk.iter().copied().collect();
    let mut spare = (0..channels).filter(|c| !visited.contains(c));
    let mut seen = BTreeSet::new();
    Ok(walk
        .into_iter()
        .map(|c| {
            if seen.insert(c) {
                c
            } else {
                spare.next().expect("m < M leaves a spare channel")
            }
        })
        .collect())
}

/// Whether any target's walk wraps onto a repeated channel for `(M, m)`.
pub fn has_wraparound_duplicates(channels: usize, mix: usize) -> bool {
    mix > 0
        && (0..channels).any(|i| {
            let walk = raw_walk(channels, mix, i);
            walk.iter().collect::<BTreeSet<_>>().len() != walk.len()
        })
}

/// Builds the `L × (m+1)` block for one target channel of a time-major
/// `L × M` window. Column 0 is the target; every column is instance
/// normalised on its own (no affine).
pub fn mix_channels(window: &[f64], lookback: usize, channels: usize, target: usize, mix: usize, eps: f64) -> Result<Vec<f64>> {
    if window.len() != lookback * channels {
        return Err(Error::shape(format!(
            "window of {} values is not {lookback}x{channels}",
            window.len()
        )));
    }
    let idx = mixed_channel_indices(channels, mix, target)?;
    let width = idx.len();
    let mut out = vec![0.0; lookback * width];
    for (k, &c) in idx.iter().enumerate() {
        let col: Vec<f64> = (0..lookback).map(|t| window[t * channels + c]).collect();
        let (norm, _) = revin_normalize(&col, 1.0, 0.0, eps);
        for (t, v) in norm.into_iter().enumerate() {
            out[t * width + k] = v;
        }
    }
    Ok(out)
}

/// Source offsets that turn a `[B, L, M]` tensor into patches of shape
/// `[B·M, N, p·(m+1)]`.
///
/// Instance `b·M + i` stacks the mixed channels of target `i`; patch `n`
/// covers rows `n·S .. n·S + p`, rows past the end repeat row `L − 1`, and
/// values inside a patch are laid out time-major (all `m+1` channels of one
/// step, then the next step).
pub fn patch_gather_index(
    batch: usize,
    lookback: usize,
    channels: usize,
    patch_len: usize,
    stride: usize,
    tokens: usize,
    mix_table: &[Vec<usize>],
) -> Vec<usize> {
    let width = mix_table.first().map_or(1, Vec::len);
    let mut index = Vec::with_capacity(batch * channels * tokens * patch_len * width);
    for b in 0..batch {
        let base = b * lookback * channels;
        for cols in mix_table {
            for n in 0..tokens {
                for t in 0..patch_len {
                    let row = (n * stride + t).min(lookback - 1);
                    for &c in cols {
                        index.push(base + row * channels + c);
                    }
                }
            }
        }
    }
    index
}
