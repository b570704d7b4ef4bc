use hetnoise::checkpoint::{encode_checkpoint, load_checkpoint};
use hetnoise::trainer::{train_epochs, EpochRecord, TrainState};

use super::opt;
use crate::config::ExperimentConfig;
use crate::data::{self, Splits};
use crate::error::CliResult;
use crate::output::RunDir;
use crate::{Resolved, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_HEADER: [&str; 6] =
    ["epoch", "lr", "train_nll", "val_nll", "val_top1", "val_gap"];

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut r = Resolved::load(&args.common)?;
    r.set("optimizer.seed", args.common.seed, |c, v| {
        c.optimizer.seed = v
    });
    r.set("data.dir", args.data.clone(), |c, v| c.data.dir = Some(v));
    let cfg = r.config.clone();
    cfg.validate()?;
    let splits = data::splits(&cfg, None)?;
    let mut inputs = splits.inputs.clone();
    let mut state = match &args.resume {
        Some(path) => {
            inputs.push(path.display().to_string());
            load_checkpoint(path)?
        }
        None => fresh_state(&cfg, &splits)?,
    };
    state.model.check_dataset(&splits.train)?;
    let until = args.until_epoch.unwrap_or(state.optimizer.epochs);

    let mut run = RunDir::open(&cfg.output.dir, args.common.force)?;
    while state.epoch < until.min(state.optimizer.epochs) {
        let next = state.epoch + 1;
        train_epochs(&mut state, &splits.train, &splits.val, next)?;
        if let Some(rec) = state.history.last() {
            eprintln!("{}", epoch_line(rec));
        }
    }
    run.write_bytes(CHECKPOINT_FILE, &encode_checkpoint(&state)?)?;
    run.write_csv(
        "history.csv",
        &HISTORY_HEADER,
        &history_rows(&state.history),
    )?;
    run.write_json("config.json", &cfg)?;
    if let Some(b) = &state.best {
        println!("best epoch {} (val nll {:.4})", b.epoch, b.val_nll);
    }
    run.finish(
        "train",
        r.started,
        &cfg,
        state.optimizer.seed,
        args.common.deterministic,
        r.sources,
        inputs,
    )?;
    Ok(())
}

/// Initial state for the configured model, checked against the data
/// before any step is taken.
pub fn fresh_state(cfg: &ExperimentConfig, splits: &Splits) -> CliResult<TrainState> {
    let g = &cfg.data.generator;
    let model = cfg.model_spec(g.dim, g.classes)?;
    model.check_dataset(&splits.train)?;
    if !splits.val.is_empty() {
        model.check_dataset(&splits.val)?;
    }
    Ok(TrainState::new(model, cfg.optimizer.clone())?)
}

pub fn history_rows(history: &[EpochRecord]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|h| {
            vec![
                h.epoch.to_string(),
                h.lr.to_string(),
                h.train_nll.to_string(),
                opt(h.val_nll),
                opt(h.val_top1),
                opt(h.val_gap),
            ]
        })
        .collect()
}

fn epoch_line(h: &EpochRecord) -> String {
    let mut s = format!(
        "epoch {:>3} lr {:.2e} train_nll {:.4}",
        h.epoch, h.lr, h.train_nll
    );
    if let Some(v) = h.val_nll {
        s += &format!(" val_nll {v:.4}");
    }
    if let Some(v) = h.val_top1 {
        s += &format!(" val_top1 {v:.4}");
    }
    if let Some(v) = h.val_gap {
        s += &format!(" val_gap {v:.4}");
    }
    s
}
