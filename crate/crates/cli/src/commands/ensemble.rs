use hetnoise::analysis::{count_parameters, EvalReport};
use hetnoise::checkpoint::load_checkpoint;
use hetnoise::datagen::{Dataset, Labels};
use hetnoise::head::{nll_from_probs, Target};
use hetnoise::trainer::{ensemble_predict_dataset, TrainState};
use hetnoise::Link;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{reliability_rows, summary_line, RELIABILITY_HEADER};
use crate::data;
use crate::error::CliResult;
use crate::output::RunDir;
use crate::{EnsembleArgs, Resolved};

/// Slack for rounding in the per-example comparison.
pub const JENSEN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub checkpoint: String,
    pub report: EvalReport,
}

/// Per-example check that the ensemble NLL is at most the mean member NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenCheck {
    pub holds: bool,
    pub examples: usize,
    pub violations: usize,
    /// Largest `ensemble - mean member` NLL difference.
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub config_hash: String,
    pub dataset: Option<String>,
    pub members: Vec<MemberReport>,
    pub ensemble: EvalReport,
    pub jensen: JensenCheck,
}

pub struct EnsembleResult {
    pub members: Vec<EvalReport>,
    pub ensemble: EvalReport,
    pub jensen: JensenCheck,
}

pub fn run(args: &EnsembleArgs) -> CliResult<()> {
    let mut r = Resolved::load(&args.common)?;
    r.set("eval.seed", args.common.seed, |c, v| c.eval.seed = v);
    r.set("eval.samples", args.samples, |c, v| {
        c.eval.samples = Some(v)
    });
    let cfg = r.config.clone();
    cfg.validate()?;
    let states = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<hetnoise::Result<Vec<_>>>()?;
    let (ds, data_inputs) = data::eval_set(&cfg, args.data.as_deref())?;
    let refs: Vec<&TrainState> = states.iter().collect();
    let result = score_ensemble(&refs, &ds, cfg.eval.samples, cfg.eval.seed)?;

    let names: Vec<String> = args
        .checkpoints
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let mut run = RunDir::open(&cfg.output.dir, args.common.force)?;
    for (name, rep) in names.iter().zip(&result.members) {
        println!("member {name}: {}", summary_line(rep));
    }
    println!(
        "ensemble of {}: {}",
        names.len(),
        summary_line(&result.ensemble)
    );
    println!(
        "jensen check (ensemble nll <= mean member nll per example): {} ({} violations)",
        if result.jensen.holds { "pass" } else { "FAIL" },
        result.jensen.violations
    );
    let file = EnsembleFile {
        config_hash: cfg.hash(),
        dataset: args.data.as_ref().map(|p| p.display().to_string()),
        members: names
            .iter()
            .cloned()
            .zip(result.members.iter().cloned())
            .map(|(checkpoint, report)| MemberReport { checkpoint, report })
            .collect(),
        ensemble: result.ensemble.clone(),
        jensen: result.jensen.clone(),
    };
    run.write_json("ensemble.json", &file)?;
    if let Some(bins) = &result.ensemble.reliability {
        run.write_csv(
            "reliability.csv",
            &RELIABILITY_HEADER,
            &reliability_rows(bins),
        )?;
    }
    let mut inputs = names;
    inputs.extend(data_inputs);
    run.finish(
        "ensemble",
        r.started,
        &cfg,
        cfg.eval.seed,
        args.common.deterministic,
        r.sources,
        inputs,
    )?;
    Ok(())
}

/// Member and ensemble metrics plus the Jensen check.
pub fn score_ensemble(
    states: &[&TrainState],
    ds: &Dataset,
    samples: Option<usize>,
    seed: u64,
) -> CliResult<EnsembleResult> {
    for s in states {
        s.model.check_dataset(ds)?;
    }
    let (member_probs, mean) = ensemble_predict_dataset(states, ds, samples, seed)?;
    let eval_samples = samples.unwrap_or(states[0].model.head.eval_samples);
    let members = states
        .iter()
        .zip(&member_probs)
        .map(|(s, p)| {
            EvalReport::from_probs(
                p.view(),
                &ds.labels,
                samples.unwrap_or(s.model.head.eval_samples),
                count_parameters(&s.model),
            )
        })
        .collect::<hetnoise::Result<Vec<_>>>()?;
    let mut params = count_parameters(&states[0].model);
    for s in &states[1..] {
        for (k, v) in count_parameters(&s.model).blocks {
            *params.blocks.entry(k).or_insert(0) += v;
        }
    }
    params.total = params.blocks.values().sum();
    let ensemble = EvalReport::from_probs(mean.view(), &ds.labels, eval_samples, params)?;
    let jensen = jensen_check(states[0].model.head.link, &member_probs, &mean, &ds.labels);
    Ok(EnsembleResult {
        members,
        ensemble,
        jensen,
    })
}

pub fn jensen_check(
    link: Link,
    members: &[Array2<f64>],
    mean: &Array2<f64>,
    labels: &Labels,
) -> JensenCheck {
    let n = mean.nrows();
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..n {
        let target = match labels {
            Labels::Multiclass(y) => Target::Class(y[i] as usize),
            Labels::Multilabel(y) => {
                Target::MultiHot(y.row(i).to_slice().expect("standard layout"))
            }
        };
        let nll = |p: &Array2<f64>| {
            nll_from_probs(link, p.row(i).as_slice().expect("standard layout"), target)
        };
        let member_mean = members.iter().map(nll).sum::<f64>() / members.len() as f64;
        let excess = nll(mean) - member_mean;
        max_excess = max_excess.max(excess);
        if excess > JENSEN_SLACK {
            violations += 1;
        }
    }
    JensenCheck {
        holds: violations == 0,
        examples: n,
        violations,
        max_excess,
    }
}
