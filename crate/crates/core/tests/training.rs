use std::fs;

use mcformer::data::{make_windows, synth_generate, Dataset, SplitSpec, SynthKind, SynthSpec, WindowSample};
use mcformer::model::{build_model, mse_on_tape, ModelConfig, ModelKind, Mode, ParamSet};
use mcformer::numerics::{Init, Tape, Tensor};
use mcformer::training::{
    clip_grad_norm, evaluate, fit, load_checkpoint, mae, mse, prepare_windows, read_manifest, save_checkpoint,
    stack_batch, train_and_evaluate, Adam, AdamConfig, ForecastReport, TrainConfig,
};
use mcformer::Error;
use proptest::prelude::*;

fn tiny_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        channels: 3,
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

fn sine_windows(rows: usize, channels: usize, l: usize, h: usize) -> Vec<WindowSample> {
    let spec = SynthSpec {
        kind: SynthKind::SharedSeason,
        channels,
        length: rows,
        ar_std: 0.0,
        period: 12.0,
        ..SynthSpec::default()
    };
    make_windows(&synth_generate(&spec).unwrap(), l, h, 1).unwrap()
}

fn double_loop_mse(y: &[f64], yhat: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i == j {
                acc += (y[i] - yhat[j]).powi(2);
                count += 1.0;
            }
        }
    }
    acc / count
}

proptest! {
    #[test]
    fn mse_matches_oracle(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..60)) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let a = mse(&y, &yhat).unwrap();
        let b = double_loop_mse(&y, &yhat);
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn mae_bounded_by_root_mse(v in prop::collection::vec((-50f64..50.0, -50f64..50.0), 1..60)) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let (e2, e1) = (mse(&y, &yhat).unwrap(), mae(&y, &yhat).unwrap());
        prop_assert!(e1 >= 0.0 && e2 >= 0.0);
        prop_assert!(e1 <= e2.sqrt() + 1e-12);
        prop_assert_eq!(e2 == 0.0, y == yhat);
    }
}

#[test]
fn adam_minimises_quadratic() {
    let mut params = ParamSet::new();
    params.push("w", Tensor::scalar(0.0));
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        },
        &params,
    );
    for _ in 0..500 {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let three = tape.constant(Tensor::scalar(3.0));
        let d = tape.sub(vars[0], three).unwrap();
        let loss = tape.mul(d, d).unwrap();
        tape.backward(loss).unwrap();
        params.zero_grads();
        params.accumulate_grads(&tape, &vars).unwrap();
        adam.step(&mut params);
    }
    assert!((params.get(0).data()[0] - 3.0).abs() < 1e-3);
}

#[test]
fn adam_clips_before_update() {
    let mut g = vec![vec![3.0, 4.0], vec![0.0]];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0], vec![3.0, 4.0]);
}

#[test]
fn rebinding_does_not_leak_gradients() {
    let model = build_model(&tiny_model(ModelKind::Mcformer), 0).unwrap();
    let mut model = model;
    let x = Tensor::new(&[2, 16, 3], Init::Normal { seed: 1, mean: 0.0, std: 1.0 }).unwrap();
    let y = Tensor::new(&[2, 4, 3], Init::Normal { seed: 2, mean: 0.0, std: 1.0 }).unwrap();
    let mut grads = Vec::new();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, true);
        let out = model.forward(&mut tape, &vars, &x, &mut Mode::Eval).unwrap();
        let loss = mse_on_tape(&mut tape, out.prediction, &y).unwrap();
        tape.backward(loss).unwrap();
        model.params_mut().accumulate_grads(&tape, &vars).unwrap();
        grads.push(tape.grad(vars[3]).unwrap().to_vec());
    }
    assert_eq!(grads[0], grads[1]);
}

#[test]
fn one_step_decreases_loss_on_linear_target() {
    for seed in 0..10 {
        let cfg = ModelConfig {
            kind: ModelKind::Linear,
            channels: 2,
            lookback: 8,
            horizon: 2,
            ..ModelConfig::default()
        };
        let rows: Vec<f64> = (0..40).flat_map(|t| [t as f64 * 0.5, 3.0 - t as f64 * 0.25]).collect();
        let ds = Dataset::new(rows, vec!["a".into(), "b".into()], "", "").unwrap();
        let w = make_windows(&ds, 8, 2, 1).unwrap();
        let mut model = build_model(&cfg, seed).unwrap();
        let before = evaluate(model.as_ref(), &w, 64).unwrap().mse;
        let tcfg = TrainConfig {
            batch_size: w.len(),
            max_epochs: 1,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let report = fit(model.as_mut(), &w, &w, &tcfg).unwrap();
        assert!(report.epochs[0].val_mse < before, "seed {seed}");
    }
}

#[test]
fn fit_converges_on_noiseless_sinusoid() {
    let w = sine_windows(600, 3, 16, 4);
    let (train, val) = w.split_at(450);
    let mut model = build_model(&tiny_model(ModelKind::Mcformer), 0).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 15,
        learning_rate: 3e-3,
        early_stop_patience: 15,
        ..TrainConfig::default()
    };
    let report = fit(model.as_mut(), train, &val[20..], &tcfg).unwrap();
    let first = report.epochs[0].val_mse;
    let best = report.val.as_ref().unwrap().mse;
    assert!(best < 0.1 * first, "{first} -> {best}");
    assert!(report.epochs.len() <= tcfg.max_epochs);
}

#[test]
fn linear_baseline_learns_sinusoid() {
    let w = sine_windows(800, 2, 16, 4);
    let (train, val) = w.split_at(600);
    let cfg = ModelConfig {
        channels: 2,
        ..tiny_model(ModelKind::Linear)
    };
    let mut model = build_model(&cfg, 0).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 40,
        learning_rate: 1e-2,
        early_stop_patience: 40,
        ..TrainConfig::default()
    };
    let report = fit(model.as_mut(), train, &val[20..], &tcfg).unwrap();
    assert!(report.val.unwrap().mse < 1e-3);
}

#[test]
fn fit_is_deterministic_and_restores_best() {
    let w = sine_windows(300, 3, 16, 4);
    let (train, val) = w.split_at(220);
    let tcfg = TrainConfig {
        max_epochs: 4,
        batch_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig {
        dropout: 0.1,
        ..tiny_model(ModelKind::Mcformer)
    };
    let run = || {
        let mut model = build_model(&cfg, 7).unwrap();
        let report = fit(model.as_mut(), train, &val[20..], &tcfg).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-9);
        assert!((a.val_mse - b.val_mse).abs() <= 1e-9);
    }
    assert_eq!(m1.params(), m2.params());
    let best = r1.best_epoch.unwrap();
    let restored = evaluate(m1.as_ref(), &val[20..], 64).unwrap().mse;
    assert!((restored - r1.epochs[best - 1].val_mse).abs() < 1e-12);
}

#[test]
fn evaluate_is_pure_and_checks_shapes() {
    let w = sine_windows(200, 3, 16, 4);
    let model = build_model(&tiny_model(ModelKind::Mcformer), 1).unwrap();
    let a = evaluate(model.as_ref(), &w, 7).unwrap();
    let b = evaluate(model.as_ref(), &w, 50).unwrap();
    assert_eq!(a.windows, w.len());
    assert!((a.mse - b.mse).abs() < 1e-12);
    assert_eq!(a.per_step_mse.len(), 4);
    let wrong = sine_windows(200, 3, 16, 5);
    assert!(matches!(evaluate(model.as_ref(), &wrong, 8), Err(Error::Shape(_))));
}

#[test]
fn pems_style_horizons_run() {
    let ds = synth_generate(&SynthSpec {
        channels: 3,
        length: 2000,
        ..SynthSpec::default()
    })
    .unwrap();
    for h in [12, 24, 48, 96] {
        let cfg = ModelConfig {
            horizon: h,
            lookback: 32,
            patch_len: 8,
            stride: 8,
            ..tiny_model(ModelKind::Mcformer)
        };
        let sets = prepare_windows(&ds, &SplitSpec::default(), 32, h).unwrap();
        let tcfg = TrainConfig {
            max_epochs: 1,
            window_stride: 16,
            ..TrainConfig::default()
        };
        let (_, report) = train_and_evaluate(&cfg, &tcfg, &sets).unwrap();
        assert_eq!(report.test.unwrap().per_step_mse.len(), h);
    }
}

#[test]
fn memorised_window_has_zero_error() {
    // L = h with identity weights reproduces the window, so a series that
    // repeats with period L is forecast exactly
    let cfg = ModelConfig {
        kind: ModelKind::Linear,
        channels: 1,
        lookback: 4,
        horizon: 4,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 0).unwrap();
    let w = model.params_mut().get_mut(0).data_mut();
    w.fill(0.0);
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let series: Vec<f64> = (0..40).map(|t| [1.0, 4.0, -2.0, 0.5][t % 4]).collect();
    let ds = Dataset::new(series, vec!["v".into()], "", "").unwrap();
    let windows = make_windows(&ds, 4, 4, 1).unwrap();
    assert!(evaluate(model.as_ref(), &windows, 8).unwrap().mse < 1e-20);
}

#[test]
fn stack_batch_layout() {
    let w = sine_windows(100, 2, 8, 3);
    let (x, y) = stack_batch(&[&w[0], &w[5]]).unwrap();
    assert_eq!(x.shape(), &[2, 8, 2]);
    assert_eq!(y.shape(), &[2, 3, 2]);
    assert_eq!(&x.data()[16..], w[5].x.as_slice());
}

#[test]
fn report_serialises() {
    let w = sine_windows(120, 3, 16, 4);
    let mut model = build_model(&tiny_model(ModelKind::Linear), 0).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let report = fit(model.as_mut(), &w[..60], &w[70..], &tcfg).unwrap();
    let back: ForecastReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.config_hash.len(), 64);
    assert!(report.wall_time_s >= 0.0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Mcformer, ModelKind::Linear] {
        let mut model = build_model(&tiny_model(kind), 3).unwrap();
        model.params_mut().randomize(99, 0.7).unwrap();
        let path = dir.path().join(format!("{kind:?}"));
        save_checkpoint(model.as_ref(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.params().tensors().iter().zip(model.params().tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model(&tiny_model(ModelKind::Mcformer), 3).unwrap();
    save_checkpoint(model.as_ref(), dir.path()).unwrap();

    let blob = dir.path().join("params.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    fs::write(&blob, &bytes).unwrap();

    let manifest_path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest_path).unwrap();
    let mut manifest = read_manifest(dir.path()).unwrap();
    manifest.params[2].shape = vec![7, 7];
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Shape(_))));

    let mut manifest = read_manifest(dir.path()).unwrap();
    manifest.format_version = 99;
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::write(&manifest_path, "{ not json").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::write(&manifest_path, text).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn numeric_failure_names_epoch_and_batch() {
    let w = sine_windows(120, 3, 16, 4);
    let mut model = build_model(&tiny_model(ModelKind::Mcformer), 0).unwrap();
    let tcfg = TrainConfig {
        learning_rate: 1e300,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    match fit(model.as_mut(), &w[..80], &w[90..], &tcfg) {
        Err(Error::Numeric { stage }) => assert!(stage.starts_with("epoch "), "{stage}"),
        other => panic!("expected a numeric failure, got {:?}", other.map(|r| r.epochs.len())),
    }
}

#[test]
fn prepare_rejects_short_segments() {
    let ds = synth_generate(&SynthSpec {
        channels: 2,
        length: 100,
        ..SynthSpec::default()
    })
    .unwrap();
    assert!(matches!(
        prepare_windows(&ds, &SplitSpec::default(), 16, 8),
        Err(Error::Config(_))
    ));
}
