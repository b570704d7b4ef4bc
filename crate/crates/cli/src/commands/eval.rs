use hetnoise::analysis::{
    average_covariance, covariance_rank_histogram, top_covariance_pairs, CovarianceReport,
    EvalReport, RankHistogram, TopPairs,
};
use hetnoise::checkpoint::load_checkpoint;
use hetnoise::datagen::Dataset;
use hetnoise::trainer::{evaluate, EvalOverrides, TrainState};
use hetnoise::RandomSource;
use serde::{Deserialize, Serialize};

use super::{reliability_rows, summary_line, RELIABILITY_HEADER};
use crate::config::ExperimentConfig;
use crate::data;
use crate::error::CliResult;
use crate::output::RunDir;
use crate::{EvalArgs, Resolved};

pub const PAIRS_HEADER: [&str; 4] = ["rank", "a", "b", "covariance"];
pub const RANK_HEADER: [&str; 4] = ["rank", "count", "fraction", "uniform_fraction"];

/// `report.json` layout shared by `eval` and `ensemble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub checkpoint: String,
    pub dataset: Option<String>,
    pub report: EvalReport,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let mut r = Resolved::load(&args.common)?;
    r.set("eval.seed", args.common.seed, |c, v| c.eval.seed = v);
    r.set("eval.samples", args.samples, |c, v| {
        c.eval.samples = Some(v)
    });
    r.set("eval.tau", args.tau, |c, v| c.eval.tau = Some(v));
    r.set("eval.pairs", args.pairs, |c, v| c.eval.pairs = v);
    r.set(
        "eval.covariance",
        args.covariance.then_some(true),
        |c, v| c.eval.covariance = v,
    );
    let cfg = r.config.clone();
    cfg.validate()?;

    let state = load_checkpoint(&args.checkpoint)?;
    let baseline = args.baseline.as_deref().map(load_checkpoint).transpose()?;
    let (ds, mut inputs) = data::eval_set(&cfg, args.data.as_deref())?;
    let report = report_for(&cfg, &state, &ds, baseline.as_ref())?;
    inputs.insert(0, args.checkpoint.display().to_string());
    if let Some(b) = &args.baseline {
        inputs.push(b.display().to_string());
    }

    let mut run = RunDir::open(&cfg.output.dir, args.common.force)?;
    write_report(
        &mut run,
        &cfg,
        &args.checkpoint.display().to_string(),
        args.data.as_ref().map(|p| p.display().to_string()),
        &report,
    )?;
    println!("{}", summary_line(&report));
    if let Some(cov) = &report.covariance {
        print!("{}", pairs_table(&cov.top_pairs));
        if let Some(h) = &cov.rank_histogram {
            println!(
                "rank histogram: {} qualifying examples, mass at rank <= 3 {:.3} (uniform {:.3})",
                h.qualifying,
                h.mass_up_to(3),
                h.uniform_mass_up_to(3)
            );
        }
    }
    run.finish(
        "eval",
        r.started,
        &cfg,
        cfg.eval.seed,
        args.common.deterministic,
        r.sources,
        inputs,
    )?;
    Ok(())
}

/// Metrics plus, when requested, covariance diagnostics.
pub fn report_for(
    cfg: &ExperimentConfig,
    state: &TrainState,
    ds: &Dataset,
    baseline: Option<&TrainState>,
) -> CliResult<EvalReport> {
    let overrides = EvalOverrides {
        eval_samples: cfg.eval.samples,
        tau: cfg.eval.tau,
    };
    let mut report = evaluate(state, ds, &overrides, cfg.eval.seed)?;
    if cfg.eval.covariance || baseline.is_some() {
        let avg = average_covariance(state, ds)?;
        let top_pairs = top_covariance_pairs(avg.view(), cfg.eval.pairs)?;
        let rank_histogram = baseline
            .map(|b| {
                covariance_rank_histogram(
                    state,
                    b,
                    ds,
                    &mut RandomSource::substream(cfg.eval.seed, 1),
                )
            })
            .transpose()?;
        report.covariance = Some(CovarianceReport {
            average: avg.rows().into_iter().map(|r| r.to_vec()).collect(),
            top_pairs,
            rank_histogram,
        });
    }
    Ok(report)
}

pub(crate) fn write_report(
    run: &mut RunDir,
    cfg: &ExperimentConfig,
    checkpoint: &str,
    dataset: Option<String>,
    report: &EvalReport,
) -> CliResult<()> {
    run.write_json(
        "report.json",
        &ReportFile {
            config_hash: cfg.hash(),
            checkpoint: checkpoint.to_string(),
            dataset,
            report: report.clone(),
        },
    )?;
    if let Some(bins) = &report.reliability {
        run.write_csv(
            "reliability.csv",
            &RELIABILITY_HEADER,
            &reliability_rows(bins),
        )?;
    }
    if let Some(cov) = &report.covariance {
        run.write_csv("pairs.csv", &PAIRS_HEADER, &pair_rows(&cov.top_pairs))?;
        if let Some(h) = &cov.rank_histogram {
            run.write_csv("rank_histogram.csv", &RANK_HEADER, &rank_rows(h))?;
        }
    }
    Ok(())
}

pub fn pair_rows(top: &TopPairs) -> Vec<Vec<String>> {
    top.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                (i + 1).to_string(),
                p.a.to_string(),
                p.b.to_string(),
                p.value.to_string(),
            ]
        })
        .collect()
}

pub fn rank_rows(h: &RankHistogram) -> Vec<Vec<String>> {
    let total = h.qualifying.max(1) as f64;
    let uniform = 1.0 / h.counts.len() as f64;
    h.counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            vec![
                (i + 1).to_string(),
                c.to_string(),
                (c as f64 / total).to_string(),
                uniform.to_string(),
            ]
        })
        .collect()
}

/// Pair table sorted by descending magnitude of the signed average covariance.
pub fn pairs_table(top: &TopPairs) -> String {
    let mut s = format!("{:>4}  {:>5}  {:>5}  {:>12}\n", "rank", "a", "b", "avg cov");
    for (i, p) in top.pairs.iter().enumerate() {
        s += &format!("{:>4}  {:>5}  {:>5}  {:>+12.5}\n", i + 1, p.a, p.b, p.value);
    }
    s
}
