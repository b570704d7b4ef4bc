use hetnoise::datagen::{argmax, GenerativeSpec, LabelKind, NoiseKind, PairKind, ScaleHook};
use hetnoise::dataset_file::encode_dataset;
use hetnoise::RandomSource;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{self, SPLIT_NAMES};
use crate::error::CliResult;
use crate::output::RunDir;
use crate::{Resolved, SimulateArgs};

/// Draws used by the closed-form softmax check.
pub const GUMBEL_CHECK_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub a: usize,
    pub b: usize,
    pub kind: PairKind,
    /// Correlation in the base covariance.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCheck {
    pub class: usize,
    pub expected: f64,
    pub observed: f64,
    pub standard_error: f64,
    pub pass: bool,
}

/// Label frequencies at one fixed input against softmax of its utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxCheck {
    pub samples: usize,
    pub classes: Vec<ClassCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub spec_hash: String,
    pub seed: u64,
    pub labels: LabelKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: String,
    pub input_dependent_scale: bool,
    pub planted_pairs: Vec<PairSummary>,
    /// Eigenvalues of the base noise covariance, descending.
    pub spectrum: Option<Vec<f64>>,
    pub softmax_check: Option<SoftmaxCheck>,
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    let mut r = Resolved::load(&args.common)?;
    r.set("data.seed", args.common.seed, |c, v| c.data.seed = v);
    r.set("data.n", args.n, |c, v| c.data.n = v);
    let cfg = r.config.clone();
    cfg.validate()?;
    let (spec, ds) = data::synthesize(&cfg)?;
    let (train, val, test) = data::split(&cfg, &ds);
    let summary = summarize(
        &spec,
        cfg.data.seed,
        cfg.data.labels,
        [train.len(), val.len(), test.len()],
    )?;

    let mut run = RunDir::open(&cfg.output.dir, args.common.force)?;
    for (name, split) in SPLIT_NAMES.iter().zip([&train, &val, &test]) {
        run.write_bytes(name, &encode_dataset(split))?;
    }
    run.write_json("spec.json", &spec)?;
    run.write_json("summary.json", &summary)?;
    run.write_json("config.json", &cfg)?;
    print_summary(&summary);
    run.finish(
        "simulate",
        r.started,
        &cfg,
        cfg.data.seed,
        args.common.deterministic,
        r.sources,
        Vec::new(),
    )?;
    Ok(())
}

pub fn summarize(
    spec: &GenerativeSpec,
    seed: u64,
    labels: LabelKind,
    sizes: [usize; 3],
) -> CliResult<SimulationSummary> {
    let (noise, base) = match &spec.noise {
        NoiseKind::Gumbel => ("gumbel", None),
        NoiseKind::DiagGaussian { .. } => ("diag_gaussian", Some(spec.base_covariance()?)),
        NoiseKind::LowRankGaussian { .. } => ("lowrank_gaussian", Some(spec.base_covariance()?)),
    };
    let planted_pairs = spec
        .planted_pairs
        .iter()
        .map(|p| PairSummary {
            a: p.a,
            b: p.b,
            kind: p.kind,
            correlation: base
                .as_ref()
                .map(|s| s[[p.a, p.b]] / (s[[p.a, p.a]] * s[[p.b, p.b]]).sqrt())
                .unwrap_or(0.0),
        })
        .collect();
    let spectrum = base.map(|s| {
        let k = s.nrows();
        let m = DMatrix::from_fn(k, k, |i, j| s[[i, j]]);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    });
    let softmax_check = match (&spec.noise, labels) {
        (NoiseKind::Gumbel, LabelKind::Multiclass) => Some(softmax_check(spec, seed)),
        _ => None,
    };
    Ok(SimulationSummary {
        spec_hash: spec.hash(),
        seed,
        labels,
        n_train: sizes[0],
        n_val: sizes[1],
        n_test: sizes[2],
        noise: noise.to_string(),
        input_dependent_scale: !matches!(spec.scale_hook, ScaleHook::Constant { .. }),
        planted_pairs,
        spectrum,
        softmax_check,
    })
}

/// Under Gumbel noise the argmax frequencies at a fixed input must follow
/// softmax of the utilities; each class is checked within 3 standard errors
/// plus a continuity correction of half a count.
pub fn softmax_check(spec: &GenerativeSpec, seed: u64) -> SoftmaxCheck {
    let mut rng = RandomSource::substream(seed, 1);
    let x = spec.sample_features(&mut rng);
    let mu = spec.utility(x.view());
    let max = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = mu.iter().map(|m| (m - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut counts = vec![0usize; spec.classes];
    for _ in 0..GUMBEL_CHECK_SAMPLES {
        let u = spec.sample_utility(x.view(), &mut rng);
        counts[argmax(u.as_slice().expect("contiguous"))] += 1;
    }
    let n = GUMBEL_CHECK_SAMPLES as f64;
    let classes: Vec<ClassCheck> = counts
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let expected = exp[c] / z;
            let observed = k as f64 / n;
            let standard_error = (expected * (1.0 - expected) / n).sqrt();
            ClassCheck {
                class: c,
                expected,
                observed,
                standard_error,
                pass: (observed - expected).abs() <= 3.0 * standard_error + 0.5 / n,
            }
        })
        .collect();
    SoftmaxCheck {
        samples: GUMBEL_CHECK_SAMPLES,
        pass: classes.iter().all(|c| c.pass),
        classes,
    }
}

fn print_summary(s: &SimulationSummary) {
    println!(
        "simulated {} labels: train {} / val {} / test {} (seed {}, spec {})",
        match s.labels {
            LabelKind::Multiclass => "multiclass",
            LabelKind::Multilabel => "multilabel",
        },
        s.n_train,
        s.n_val,
        s.n_test,
        s.seed,
        &s.spec_hash[..12]
    );
    println!(
        "noise: {} (input-dependent scale: {})",
        s.noise, s.input_dependent_scale
    );
    for p in &s.planted_pairs {
        println!(
            "planted {:?} pair ({}, {}): corr {:+.3}",
            p.kind, p.a, p.b, p.correlation
        );
    }
    if let Some(ev) = &s.spectrum {
        let head: Vec<String> = ev.iter().take(6).map(|v| format!("{v:.3}")).collect();
        println!("covariance spectrum (top): {}", head.join(" "));
    }
    if let Some(c) = &s.softmax_check {
        println!(
            "closed-form softmax check ({} draws): {}",
            c.samples,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
}
