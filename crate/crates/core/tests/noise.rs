use hetnoise::noise::empirical_covariance;
use hetnoise::{Factor, NoiseModel, RandomSource};
use nalgebra::DMatrix;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn random_model(rng: &mut RandomSource, k: usize, r: usize) -> NoiseModel {
    let d = Array1::from_shape_fn(k, |_| rng.normal() * 0.5);
    let v = Array2::from_shape_fn((k, r), |_| rng.normal() * 0.5);
    NoiseModel::new(Array1::zeros(k), d, Factor::Full(v)).unwrap()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn hand_example_matches_large_sample() {
    let model = NoiseModel::new(
        array![0.0, 0.0],
        array![1.0, 2.0],
        Factor::Full(array![[1.0], [-1.0]]),
    )
    .unwrap();
    let sigma = model.reconstruct_covariance().unwrap();
    assert_eq!(sigma, array![[2.0, -1.0], [-1.0, 5.0]]);

    let samples = model
        .sample_noise(&mut RandomSource::new(17), 1_000_000)
        .unwrap();
    let emp = empirical_covariance(&samples);
    for (e, s) in emp.iter().zip(sigma.iter()) {
        assert!((e - s).abs() < 0.03, "{e} vs {s}");
    }
}

#[test]
fn empirical_covariance_within_frobenius_bound() {
    let mut shapes = RandomSource::new(5);
    let s = 100_000;
    for trial in 0..20 {
        let k = 2 + shapes.below(49);
        let r = 1 + shapes.below(5.min(k));
        let model = random_model(&mut shapes, k, r);
        let sigma = model.reconstruct_covariance().unwrap();
        let samples = model
            .sample_noise(&mut RandomSource::new(100 + trial), s)
            .unwrap();
        let err = frobenius(&(empirical_covariance(&samples) - &sigma));
        let max_diag = sigma.diag().iter().cloned().fold(0.0, f64::max);
        let bound = 5.0 * k as f64 / (s as f64).sqrt() * max_diag;
        assert!(err <= bound, "trial {trial} K={k} R={r}: {err} > {bound}");

        let mean = samples.mean_axis(ndarray::Axis(0)).unwrap();
        for c in 0..k {
            let limit = 4.0 * sigma[[c, c]].sqrt() / (s as f64).sqrt();
            assert!(
                mean[c].abs() <= limit,
                "trial {trial} class {c} mean {}",
                mean[c]
            );
        }
    }
}

#[test]
fn efficient_factor_matches_materialized_under_shared_draws() {
    let shared = array![[0.3, -1.2], [0.7, 0.4]];
    let scale = array![1.0, 2.0];
    let eff = NoiseModel::new(
        array![0.0, 0.0],
        array![0.5, 0.1],
        Factor::Efficient { scale, shared },
    )
    .unwrap();
    let full = NoiseModel::new(
        array![0.0, 0.0],
        array![0.5, 0.1],
        Factor::Full(eff.materialized_factor().unwrap()),
    )
    .unwrap();
    let a = eff.sample_noise(&mut RandomSource::new(8), 500).unwrap();
    let b = full.sample_noise(&mut RandomSource::new(8), 500).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

fn model_strategy() -> impl Strategy<Value = NoiseModel> {
    (2usize..12, 1usize..5, any::<u64>())
        .prop_map(|(k, r, seed)| random_model(&mut RandomSource::new(seed), k, r.min(k)))
}

proptest! {
    #[test]
    fn covariance_is_exactly_symmetric_and_psd(model in model_strategy()) {
        let sigma = model.reconstruct_covariance().unwrap();
        let k = sigma.nrows();
        for i in 0..k {
            for j in 0..k {
                prop_assert_eq!(sigma[[i, j]].to_bits(), sigma[[j, i]].to_bits());
            }
        }
        let m = DMatrix::from_fn(k, k, |i, j| sigma[[i, j]]);
        let scale = sigma.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for ev in m.symmetric_eigenvalues().iter() {
            prop_assert!(*ev >= -1e-10 * scale, "eigenvalue {}", ev);
        }
    }

    #[test]
    fn efficient_identity_holds_for_all_shapes(
        k in 2usize..16,
        r in 1usize..6,
        seed in any::<u64>(),
    ) {
        let r = r.min(k);
        let mut rng = RandomSource::new(seed);
        let scale = Array1::from_shape_fn(k, |_| rng.normal());
        let shared = Array2::from_shape_fn((k, r), |_| rng.normal());
        let eps_r: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        let eps_k = vec![0.0; k];
        let eff = NoiseModel::new(Array1::zeros(k), Array1::zeros(k), Factor::Efficient { scale, shared }).unwrap();
        let dense = eff.materialized_factor().unwrap();
        let mut scratch = vec![0.0; k];
        let mut out = vec![0.0; k];
        eff.noise_from(&eps_k, &eps_r, &mut scratch, &mut out);
        for c in 0..k {
            let expected: f64 = (0..r).map(|j| dense[[c, j]] * eps_r[j]).sum();
            prop_assert!((out[c] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic(model in model_strategy(), seed in any::<u64>()) {
        let a = model.sample_noise(&mut RandomSource::new(seed), 8).unwrap();
        let b = model.sample_noise(&mut RandomSource::new(seed), 8).unwrap();
        prop_assert_eq!(a, b);
    }
}
