use hetnoise::checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
};
use hetnoise::datagen::{Dataset, Labels};
use hetnoise::trainer::{
    ensemble_predict_dataset, evaluate, l2_penalty, regularized_loss, train, train_epochs,
    EvalOverrides, FeatureNet, ModelSpec, OptimizerConfig, TrainState,
};
use hetnoise::{Error, RandomSource, Variant};
use ndarray::{Array1, Array2};

/// Gaussian blobs around well-separated centres, one per class.
fn blobs(n: usize, k: usize, dim: usize, spread: f64, seed: u64) -> Dataset {
    let mut rng = RandomSource::new(seed);
    let centres = Array2::from_shape_fn((k, dim), |_| 4.0 * rng.normal());
    let mut features = Array2::<f32>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let c = i % k;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (centres[[c, j]] + spread * rng.normal()) as f32;
        }
        labels.push(c as u32);
    }
    Dataset {
        features,
        labels: Labels::Multiclass(labels),
        classes: k,
        seed,
        spec_hash: String::new(),
    }
}

fn model(variant: Variant, dim: usize, k: usize, samples: usize) -> ModelSpec {
    let mut m = ModelSpec::new(dim, FeatureNet::Identity, variant, k);
    m.head.train_samples = samples;
    m.head.eval_samples = samples;
    m.head.rank = 2;
    m
}

fn quick(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        batch_size: 32,
        seed: 7,
        validation_samples: 10,
        ..OptimizerConfig::default()
    }
}

#[test]
fn separable_data_is_fit() {
    let data = blobs(600, 4, 5, 0.5, 1);
    let state = train(
        model(Variant::Homoscedastic, 5, 4, 1),
        &data,
        &data.slice(0..0),
        quick(10),
    )
    .unwrap();
    let report = evaluate(&state, &data, &EvalOverrides::default(), 0).unwrap();
    assert!(report.top1.unwrap() >= 0.99, "{:?}", report.top1);
}

#[test]
fn zero_epochs_keep_initialization() {
    let data = blobs(64, 3, 4, 1.0, 2);
    let m = model(Variant::Full, 4, 3, 4);
    let fresh = TrainState::new(m.clone(), quick(0)).unwrap();
    let trained = train(m, &data, &data, quick(0)).unwrap();
    assert_eq!(fresh, trained);
    assert!(trained.history.is_empty());
}

#[test]
fn training_is_deterministic() {
    let data = blobs(200, 3, 4, 1.5, 3);
    let a = train(
        model(Variant::Efficient, 4, 3, 8),
        &data,
        &data.slice(0..50),
        quick(3),
    )
    .unwrap();
    let b = train(
        model(Variant::Efficient, 4, 3, 8),
        &data,
        &data.slice(0..50),
        quick(3),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        encode_checkpoint(&a).unwrap(),
        encode_checkpoint(&b).unwrap()
    );
}

/// Full-batch softmax regression with momentum, warmup and step decay,
/// written against plain vectors.
fn reference_softmax_regression(
    data: &Dataset,
    w0: &Array2<f64>,
    b0: &Array1<f64>,
    opt: &OptimizerConfig,
    warmup: u64,
) -> (Array2<f64>, Array1<f64>) {
    let Labels::Multiclass(y) = &data.labels else {
        unreachable!()
    };
    let (dim, k) = w0.dim();
    let n = data.len();
    let (mut w, mut b) = (w0.clone(), b0.clone());
    let (mut mw, mut mb) = (Array2::<f64>::zeros((dim, k)), Array1::<f64>::zeros(k));
    let total = opt.epochs as u64;
    for t in 0..total {
        let mut gw = Array2::<f64>::zeros((dim, k));
        let mut gb = Array1::<f64>::zeros(k);
        for i in 0..n {
            let x = data.features.row(i).mapv(|v| v as f64);
            let z = w.t().dot(&x) + &b;
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = z.mapv(|v| (v - m).exp());
            let mut p = &e / e.sum();
            p[y[i] as usize] -= 1.0;
            for a in 0..dim {
                for c in 0..k {
                    gw[[a, c]] += x[a] * p[c] / n as f64;
                }
            }
            gb += &(&p / n as f64);
        }
        gw += &(&w * opt.l2);
        let lr = if t < warmup {
            opt.base_lr * t as f64 / warmup as f64
        } else {
            let drops = opt
                .decay_milestones
                .iter()
                .filter(|&&f| t as f64 >= f * total as f64)
                .count();
            opt.base_lr / 10f64.powi(drops as i32)
        };
        mw = &mw * opt.momentum + &gw;
        mb = &mb * opt.momentum + &gb;
        w = &w - &(&mw * lr);
        b = &b - &(&mb * lr);
    }
    (w, b)
}

#[test]
fn homoscedastic_head_matches_reference_softmax_regression() {
    let data = blobs(90, 3, 4, 2.0, 4);
    let opt = OptimizerConfig {
        epochs: 20,
        batch_size: 90,
        warmup_steps: Some(3),
        l2: 1e-3,
        base_lr: 0.05,
        ..quick(20)
    };
    let m = model(Variant::Homoscedastic, 4, 3, 1);
    let init = TrainState::new(m.clone(), opt.clone()).unwrap();
    let state = train(m, &data, &data.slice(0..0), opt.clone()).unwrap();
    let (w, b) = reference_softmax_regression(
        &data,
        &init.params.head.mean.weight,
        &init.params.head.mean.bias,
        &opt,
        3,
    );
    let got = &state.params.head.mean;
    for (a, e) in got
        .weight
        .iter()
        .zip(w.iter())
        .chain(got.bias.iter().zip(b.iter()))
    {
        assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
    }
}

#[test]
fn l2_term_is_half_weight_norm_at_initialization() {
    let data = blobs(40, 3, 4, 1.0, 5);
    let m = model(Variant::Full, 4, 3, 4);
    let opt = OptimizerConfig {
        l2: 0.02,
        factor_l2_multiplier: 3.0,
        ..quick(1)
    };
    let state = TrainState::new(m.clone(), opt.clone()).unwrap();
    let p = &state.params.head;
    let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
    let hetnoise::head::FactorParams::Full(factor) = p.factor.as_ref().unwrap() else {
        panic!()
    };
    let expected = 0.01 * (sq(&p.mean.weight) + sq(&p.diag.as_ref().unwrap().weight))
        + 0.01 * 3.0 * sq(&factor.weight);
    assert!((l2_penalty(&state.params, &opt) - expected).abs() < 1e-14);

    let idx: Vec<usize> = (0..40).collect();
    let with = regularized_loss(
        &m,
        &state.params,
        &opt,
        &data,
        &idx,
        &mut RandomSource::new(1),
    )
    .unwrap();
    let without = regularized_loss(
        &m,
        &state.params,
        &OptimizerConfig { l2: 0.0, ..opt },
        &data,
        &idx,
        &mut RandomSource::new(1),
    )
    .unwrap();
    assert!((with - without - expected).abs() < 1e-12);
}

#[test]
fn warmup_then_step_decay() {
    let opt = OptimizerConfig {
        warmup_steps: None,
        ..OptimizerConfig::default()
    };
    let total = 1000;
    assert_eq!(opt.warmup(total), 30);
    assert_eq!(opt.learning_rate(0, total), 0.0);
    assert!((opt.learning_rate(15, total) - 0.05).abs() < 1e-15);
    assert_eq!(opt.learning_rate(30, total), 0.1);
    assert!((opt.learning_rate(334, total) - 0.01).abs() < 1e-15);
    assert!((opt.learning_rate(667, total) - 0.001).abs() < 1e-15);
    assert!((opt.learning_rate(999, total) - 1e-4).abs() < 1e-18);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = blobs(120, 3, 4, 1.5, 6);
    let val = data.slice(0..30);
    let m = model(Variant::Diagonal, 4, 3, 6);
    let full = train(m.clone(), &data, &val, quick(4)).unwrap();

    let mut partial = TrainState::new(m, quick(4)).unwrap();
    train_epochs(&mut partial, &data, &val, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&partial, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, partial);
    train_epochs(&mut resumed, &data, &val, 4).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn checkpoint_version_and_truncation_are_detected() {
    let data = blobs(40, 3, 4, 1.5, 7);
    let state = train(model(Variant::Full, 4, 3, 4), &data, &data, quick(1)).unwrap();
    let bytes = encode_checkpoint(&state).unwrap();

    let text = String::from_utf8_lossy(&bytes[..64]).to_string();
    let bumped = [
        text.replacen("version 1", "version 9", 1).as_bytes(),
        &bytes[64..],
    ]
    .concat();
    assert!(matches!(
        decode_checkpoint(&bumped),
        Err(Error::Version {
            found: 9,
            expected: 1
        })
    ));

    let cut = &bytes[..bytes.len() - 5];
    assert!(matches!(decode_checkpoint(cut), Err(Error::Corrupt(_))));
}

#[test]
fn divergence_keeps_last_finite_parameters() {
    let data = blobs(64, 3, 4, 1.0, 8);
    let opt = OptimizerConfig {
        base_lr: 1e200,
        warmup_steps: Some(0),
        ..quick(3)
    };
    let mut state = TrainState::new(model(Variant::Full, 4, 3, 4), opt).unwrap();
    let err = train_epochs(&mut state, &data, &data, 3).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    let mut finite = true;
    state
        .params
        .visit(&mut |_, _, _, v| finite &= v.iter().all(|x| x.is_finite()));
    assert!(finite);
}

#[test]
fn single_member_ensemble_equals_member() {
    let data = blobs(80, 3, 4, 1.5, 9);
    let state = train(model(Variant::Efficient, 4, 3, 16), &data, &data, quick(2)).unwrap();
    let (members, mean) = ensemble_predict_dataset(&[&state], &data, None, 11).unwrap();
    let direct = state
        .predict_dataset(&data, 16, &mut RandomSource::new(11))
        .unwrap();
    assert_eq!(mean, direct);
    assert_eq!(members[0], direct);
}
