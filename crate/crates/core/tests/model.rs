use mcformer::model::{
    build_model, encoder_forward, gradient_check, instance_moments, mix_channels, mixed_channel_indices,
    revin_denormalize, revin_normalize, token_count, EncoderSettings, Forecaster, LinearBaseline, Mcformer,
    ModelConfig, ModelKind, Mode,
};
use mcformer::numerics::{Activation, Init, Tape, Tensor};
use mcformer::Error;
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor {
    Tensor::new(shape, Init::Normal { seed, mean: 0.0, std }).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 4,
        lookback: 16,
        horizon: 4,
        mix: 1,
        patch_len: 4,
        stride: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..ModelConfig::default()
    }
}

/// Walks the channel ring step by step instead of using modular
/// arithmetic, then replaces repeats by scanning for the lowest channel the
/// walk never touched.
fn walker_oracle(channels: usize, mix: usize, target: usize) -> Vec<usize> {
    if mix == 0 {
        return vec![target];
    }
    let interval = channels / mix;
    let mut pos = target;
    let mut walk = vec![pos];
    for _ in 0..mix {
        for _ in 0..interval {
            pos += 1;
            if pos == channels {
                pos = 0;
            }
        }
        walk.push(pos);
    }
    let mut used_spares = Vec::new();
    let mut out = Vec::new();
    for &c in &walk {
        if out.contains(&c) {
            let spare = (0..channels)
                .find(|s| !walk.contains(s) && !used_spares.contains(s))
                .unwrap();
            used_spares.push(spare);
            out.push(spare);
        } else {
            out.push(c);
        }
    }
    out
}

#[test]
fn token_count_examples() {
    assert_eq!(token_count(96, 16, 8).unwrap(), 12);
    assert_eq!(token_count(96, 96, 96).unwrap(), 2);
    assert!(matches!(token_count(8, 9, 1), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn token_count_formula(l in 8usize..=256, p_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
        let p = 1 + ((l - 1) as f64 * p_frac) as usize;
        let s = 1 + ((p - 1) as f64 * s_frac) as usize;
        prop_assert_eq!(token_count(l, p, s).unwrap(), (l - p) / s + 2);
    }

    #[test]
    fn revin_round_trip(seed in 0u64..10_000, len in 2usize..64, scale in 0.0f64..100.0, shift in -50.0f64..50.0) {
        let x: Vec<f64> = randn(&[len], seed, 1.0).data().iter().map(|v| v * scale + shift).collect();
        let (y, stats) = revin_normalize(&x, 1.3, 0.2, 1e-5);
        let back = revin_denormalize(&y, &stats);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn mixed_indices_match_walker() {
    for channels in 2..=16 {
        for mix in 1..channels {
            for target in 0..channels {
                assert_eq!(
                    mixed_channel_indices(channels, mix, target).unwrap(),
                    walker_oracle(channels, mix, target),
                    "M={channels} m={mix} i={target}"
                );
            }
        }
    }
}

#[test]
fn normalised_output_has_zero_mean() {
    let x: Vec<f64> = randn(&[50], 3, 4.0).data().iter().map(|v| v + 9.0).collect();
    let (y, stats) = revin_normalize(&x, 1.0, 0.0, 1e-5);
    assert!(instance_moments(&y).0.abs() < 1e-10);
    assert!(stats.var >= 0.0);
}

#[test]
fn mixed_column_of_lagged_copy_is_a_shift() {
    let lag = 2;
    let l = 20;
    let driver: Vec<f64> = (0..l + lag).map(|t| (t as f64 * 0.7).sin() + 0.1 * t as f64).collect();
    // channel 1 leads channel 0 by `lag`
    let window: Vec<f64> = (0..l).flat_map(|t| [driver[t], driver[t + lag]]).collect();
    let u = mix_channels(&window, l, 2, 1, 1, 1e-12).unwrap();
    assert_eq!(u.len(), l * 2);
    let target_raw: Vec<f64> = (0..l).map(|t| driver[t + lag]).collect();
    let (target_norm, _) = revin_normalize(&target_raw, 1.0, 0.0, 1e-12);
    for t in 0..l {
        assert!((u[t * 2] - target_norm[t]).abs() < 1e-12);
    }
    // the companion column is the target's history; compare shapes via
    // correlation of the overlapping part
    let comp: Vec<f64> = (0..l).map(|t| u[t * 2 + 1]).collect();
    let a = &comp[lag..];
    let b = &target_norm[..l - lag];
    let da: Vec<f64> = a.windows(2).map(|w| w[1] - w[0]).collect();
    let db: Vec<f64> = b.windows(2).map(|w| w[1] - w[0]).collect();
    let ratio = da[0] / db[0];
    for (x, y) in da.iter().zip(&db) {
        assert!((x - ratio * y).abs() < 1e-9);
    }
}

#[test]
fn forecast_shape() {
    let cfg = ModelConfig {
        channels: 8,
        lookback: 96,
        horizon: 24,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..ModelConfig::default()
    };
    let model = Mcformer::new(cfg, 0).unwrap();
    let y = model.predict(&randn(&[4, 96, 8], 1, 1.0)).unwrap();
    assert_eq!(y.shape(), &[4, 24, 8]);
}

#[test]
fn rejects_bad_input() {
    let model = Mcformer::new(tiny(), 0).unwrap();
    assert!(model.predict(&randn(&[2, 15, 4], 1, 1.0)).is_err());
    let mut x = randn(&[2, 16, 4], 1, 1.0);
    x.data_mut()[5] = f64::NAN;
    assert!(matches!(model.predict(&x), Err(Error::Numeric { .. })));
}

#[test]
fn nan_parameter_names_the_stage() {
    let mut model = Mcformer::new(tiny(), 0).unwrap();
    let idx = model.params().index_of("layers.0.ffn.w1").unwrap();
    model.params_mut().get_mut(idx).data_mut()[0] = f64::NAN;
    match model.predict(&randn(&[1, 16, 4], 1, 1.0)) {
        Err(Error::Numeric { stage }) => assert!(stage.contains("layer 0"), "{stage}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn invalid_mix_count_is_config_error() {
    let cfg = ModelConfig { mix: 4, ..tiny() };
    assert!(matches!(Mcformer::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..5 {
        let model = Mcformer::new(ModelConfig { n_layers: 2, ..tiny() }, seed).unwrap();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let x = randn(&[3, 16, 4], seed + 100, 2.0);
        let out = model.forward(&mut tape, &vars, &x, &mut Mode::Eval).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in out.attention {
            let n = *tape.shape(a).last().unwrap();
            for row in tape.data(a).chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_projection_gives_positional_table() {
    let mut model = Mcformer::new(tiny(), 4).unwrap();
    for name in ["proj.weight", "proj.bias"] {
        let i = model.params().index_of(name).unwrap();
        model.params_mut().get_mut(i).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let z = tape.constant(randn(&[2, 16, 4], 9, 1.0));
    let tok = model.patchify_project(&mut tape, z, &vars).unwrap();
    let pos = model.params().get(model.params().index_of("pos").unwrap()).data().to_vec();
    for chunk in tape.data(tok).chunks(pos.len()) {
        assert_eq!(chunk, pos.as_slice());
    }
}

fn encoder_settings() -> EncoderSettings {
    EncoderSettings {
        n_heads: 2,
        dropout: 0.0,
        activation: Activation::Gelu,
        norm_first: false,
        eps: 1e-5,
    }
}

#[test]
fn encoder_without_layers_is_identity() {
    let mut tape = Tape::new();
    let x = randn(&[3, 5, 8], 2, 1.0);
    let v = tape.constant(x.clone());
    let out = encoder_forward(&mut tape, v, &[], &[], &encoder_settings(), &mut Mode::Eval).unwrap();
    assert_eq!(tape.data(out.tokens), x.data());
    assert!(out.attention.is_empty());
}

#[test]
fn encoder_is_token_permutation_equivariant() {
    let model = Mcformer::new(ModelConfig { n_layers: 2, ..tiny() }, 5).unwrap();
    // reuse the model's layer weights through a fresh encoder call
    let n = 5;
    let width = 8;
    let x = randn(&[2, n, width], 8, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let mut xp = vec![0.0; x.len()];
    for b in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..width {
                xp[(b * n + dst) * width + c] = x.data()[(b * n + src) * width + c];
            }
        }
    }
    let xp = Tensor::from_vec(&[2, n, width], xp).unwrap();
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let layers: Vec<_> = layer_indices(&model);
        let v = tape.constant(input.clone());
        let out = encoder_forward(&mut tape, v, &vars, &layers, &encoder_settings(), &mut Mode::Eval).unwrap();
        tape.data(out.tokens).to_vec()
    };
    let y = run(&x);
    let yp = run(&xp);
    for b in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..width {
                let a = yp[(b * n + dst) * width + c];
                let e = y[(b * n + src) * width + c];
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

fn layer_indices(model: &Mcformer) -> Vec<mcformer::model::EncoderLayerIndex> {
    let p = model.params();
    (0..model.config().n_layers)
        .map(|l| {
            let i = |s: &str| p.index_of(&format!("layers.{l}.{s}")).unwrap();
            mcformer::model::EncoderLayerIndex {
                wq: i("attn.wq"),
                wk: i("attn.wk"),
                wv: i("attn.wv"),
                wo: i("attn.wo"),
                norm1_gamma: i("norm1.gamma"),
                norm1_beta: i("norm1.beta"),
                w1: i("ffn.w1"),
                b1: i("ffn.b1"),
                w2: i("ffn.w2"),
                b2: i("ffn.b2"),
                norm2_gamma: i("norm2.gamma"),
                norm2_beta: i("norm2.beta"),
            }
        })
        .collect()
}

#[test]
fn pure_ci_is_channel_permutation_equivariant() {
    let cfg = ModelConfig { mix: 0, ..tiny() };
    let mut model = Mcformer::new(cfg, 6).unwrap();
    // a uniform affine keeps the per-channel parameters from breaking symmetry
    for name in ["revin.gamma", "revin.beta"] {
        let i = model.params().index_of(name).unwrap();
        model.params_mut().get_mut(i).data_mut().fill(if name.ends_with("gamma") { 1.4 } else { -0.3 });
    }
    let x = randn(&[2, 16, 4], 11, 1.0);
    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor, rows: usize| {
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            for (dst, &src) in perm.iter().enumerate() {
                out[r * 4 + dst] = t.data()[r * 4 + src];
            }
        }
        Tensor::from_vec(t.shape(), out).unwrap()
    };
    let y = model.predict(&x).unwrap();
    let yp = model.predict(&permute(&x, 32)).unwrap();
    let expected = permute(&y, 8);
    for (a, b) in yp.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_head_predicts_instance_mean() {
    let mut model = Mcformer::new(tiny(), 7).unwrap();
    for name in ["head.weight", "head.bias"] {
        let i = model.params().index_of(name).unwrap();
        model.params_mut().get_mut(i).data_mut().fill(0.0);
    }
    let x = randn(&[2, 16, 4], 12, 3.0);
    let y = model.predict(&x).unwrap();
    for b in 0..2 {
        for c in 0..4 {
            let col: Vec<f64> = (0..16).map(|t| x.data()[(b * 16 + t) * 4 + c]).collect();
            let mean = instance_moments(&col).0;
            for t in 0..4 {
                assert!((y.data()[(b * 4 + t) * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dropout_only_in_training() {
    use rand::SeedableRng;
    let model = Mcformer::new(ModelConfig { dropout: 0.5, ..tiny() }, 3).unwrap();
    let x = randn(&[1, 16, 4], 2, 1.0);
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, &x, &mut Mode::Train(&mut rng)).unwrap();
    assert_ne!(tape.data(out.prediction), model.predict(&x).unwrap().data());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for (cfg, label) in [
        (tiny(), "post-norm"),
        (
            ModelConfig {
                norm_first: true,
                ..tiny()
            },
            "pre-norm",
        ),
        (
            ModelConfig {
                kind: ModelKind::Linear,
                ..tiny()
            },
            "linear",
        ),
    ] {
        let model = build_model(&cfg, 1).unwrap();
        let x = randn(&[2, 16, 4], 21, 1.0);
        let y = randn(&[2, 4, 4], 22, 1.0);
        for (name, err) in gradient_check(model.as_ref(), &x, &y, 1e-5).unwrap() {
            assert!(err < 1e-4, "{label} {name}: {err:e}");
        }
    }
}

#[test]
fn linear_baseline_behaviour() {
    let cfg = ModelConfig {
        kind: ModelKind::Linear,
        lookback: 6,
        horizon: 6,
        channels: 2,
        ..ModelConfig::default()
    };
    let mut model = LinearBaseline::new(cfg, 0).unwrap();
    let w = model.params_mut().get_mut(0).data_mut();
    w.fill(0.0);
    for i in 0..6 {
        w[i * 6 + i] = 1.0;
    }
    let x = randn(&[3, 6, 2], 5, 2.0);
    let y = model.predict(&x).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-9);
    }
    let c = Tensor::new(&[1, 6, 2], Init::Value(4.5)).unwrap();
    for v in model.predict(&c).unwrap().data() {
        assert!((v - 4.5).abs() < 1e-12);
    }
}
