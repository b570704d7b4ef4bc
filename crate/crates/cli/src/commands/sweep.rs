use hetnoise::analysis::EvalReport;
use hetnoise::checkpoint::load_checkpoint;
use hetnoise::trainer::{evaluate, train_epochs, EvalOverrides, TrainState};
use serde::{Deserialize, Serialize};

use super::{opt, train::fresh_state};
use crate::config::ExperimentConfig;
use crate::data::{self, Splits};
use crate::error::{CliError, CliResult};
use crate::output::RunDir;
use crate::{Resolved, SweepArgs, SweepAxis};

pub const SWEEP_HEADER: [&str; 10] = [
    "axis",
    "value",
    "val_nll",
    "top1",
    "top5",
    "nll",
    "ece",
    "gap",
    "best_epoch",
    "best_val_nll",
];
pub const CURVE_HEADER: [&str; 3] = ["value", "metric", "score"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// `None` when the validation split is empty.
    pub val_nll: Option<f64>,
    pub test: EvalReport,
    pub best_epoch: Option<usize>,
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::McSamples => "mc_samples",
        SweepAxis::Tau => "tau",
        SweepAxis::Rank => "rank",
    }
}

/// Parses a comma-separated list; integers are required except for `tau`.
pub fn parse_values(axis: SweepAxis, text: &str) -> CliResult<Vec<f64>> {
    let items: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    items
        .iter()
        .map(|s| {
            let bad = || CliError::Usage(format!("invalid {} value {s:?}", axis_name(axis)));
            match axis {
                SweepAxis::Tau => s.parse::<f64>().map_err(|_| bad()),
                _ => s.parse::<usize>().map(|v| v as f64).map_err(|_| bad()),
            }
        })
        .collect()
}

/// Index of the row with the lowest validation NLL.
pub fn best_row(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| r.val_nll.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let values = parse_values(args.axis, &args.values)?;
    let mut r = Resolved::load(&args.common)?;
    r.set("optimizer.seed", args.common.seed, |c, v| {
        c.optimizer.seed = v
    });
    r.set("data.dir", args.data.clone(), |c, v| c.data.dir = Some(v));
    let cfg = r.config.clone();
    cfg.validate()?;
    let splits = data::splits(&cfg, None)?;
    let mut inputs = splits.inputs.clone();

    let rows = match args.axis {
        SweepAxis::McSamples => {
            let state = match &args.checkpoint {
                Some(p) => {
                    inputs.push(p.display().to_string());
                    load_checkpoint(p)?
                }
                None => trained(&cfg, &splits)?,
            };
            values
                .iter()
                .map(|&v| {
                    let overrides = EvalOverrides {
                        eval_samples: Some(v as usize),
                        tau: cfg.eval.tau,
                    };
                    score(&cfg, &state, &splits, &overrides, v)
                })
                .collect::<CliResult<Vec<_>>>()?
        }
        axis => values
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                match axis {
                    SweepAxis::Tau => c.model.tau = v,
                    _ => c.model.rank = v as usize,
                }
                c.validate()?;
                let state = trained(&c, &splits)?;
                let overrides = EvalOverrides {
                    eval_samples: c.eval.samples,
                    tau: None,
                };
                score(&c, &state, &splits, &overrides, v)
            })
            .collect::<CliResult<Vec<_>>>()?,
    };

    let best = best_row(&rows);
    let name = axis_name(args.axis);
    let mut run = RunDir::open(&cfg.output.dir, args.common.force)?;
    run.write_csv("sweep.csv", &SWEEP_HEADER, &sweep_rows(name, &rows, best))?;
    run.write_csv("sweep_curve.csv", &CURVE_HEADER, &curve_rows(&rows))?;
    run.write_json("config.json", &cfg)?;
    for (i, row) in rows.iter().enumerate() {
        println!(
            "{}={} val_nll={} {}{}",
            name,
            row.value,
            row.val_nll
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
            super::summary_line(&row.test),
            if Some(i) == best {
                "  <- best validation NLL"
            } else {
                ""
            }
        );
    }
    run.finish(
        "sweep",
        r.started,
        &cfg,
        cfg.optimizer.seed,
        args.common.deterministic,
        r.sources,
        inputs,
    )?;
    Ok(())
}

fn trained(cfg: &ExperimentConfig, splits: &Splits) -> CliResult<TrainState> {
    let mut state = fresh_state(cfg, splits)?;
    let epochs = state.optimizer.epochs;
    train_epochs(&mut state, &splits.train, &splits.val, epochs)?;
    Ok(state)
}

fn score(
    cfg: &ExperimentConfig,
    state: &TrainState,
    splits: &Splits,
    overrides: &EvalOverrides,
    value: f64,
) -> CliResult<SweepRow> {
    let val_nll = if splits.val.is_empty() {
        None
    } else {
        Some(evaluate(state, &splits.val, overrides, cfg.eval.seed)?.nll)
    };
    Ok(SweepRow {
        value,
        val_nll,
        test: evaluate(state, &splits.test, overrides, cfg.eval.seed)?,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
    })
}

pub fn sweep_rows(axis: &str, rows: &[SweepRow], best: Option<usize>) -> Vec<Vec<String>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                axis.to_string(),
                r.value.to_string(),
                opt(r.val_nll),
                opt(r.test.top1),
                opt(r.test.top5),
                r.test.nll.to_string(),
                opt(r.test.ece),
                opt(r.test.gap),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                (Some(i) == best).to_string(),
            ]
        })
        .collect()
}

/// Long-form rows, one per (value, metric).
pub fn curve_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in rows {
        let metrics = [
            ("val_nll", r.val_nll),
            ("top1", r.test.top1),
            ("top5", r.test.top5),
            ("nll", Some(r.test.nll)),
            ("ece", r.test.ece),
            ("gap", r.test.gap),
        ];
        for (m, v) in metrics {
            if let Some(v) = v {
                out.push(vec![r.value.to_string(), m.to_string(), v.to_string()]);
            }
        }
    }
    out
}
