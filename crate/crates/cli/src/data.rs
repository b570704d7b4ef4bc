//! Loading or synthesizing the configured datasets.

use std::path::{Path, PathBuf};

use hetnoise::datagen::{
    synthesize_multiclass, synthesize_multilabel, Dataset, GenerativeSpec, LabelKind,
};
use hetnoise::dataset_file::read_dataset;
use hetnoise::RandomSource;

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const SPLIT_NAMES: [&str; 3] = ["train.dataset", "val.dataset", "test.dataset"];

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Files read, empty when synthesized.
    pub inputs: Vec<String>,
}

/// The full dataset described by the config, before splitting.
pub fn synthesize(cfg: &ExperimentConfig) -> CliResult<(GenerativeSpec, Dataset)> {
    let spec = cfg.data.generator.build()?;
    let mut rng = RandomSource::new(cfg.data.seed);
    let ds = match cfg.data.labels {
        LabelKind::Multiclass => synthesize_multiclass(&spec, cfg.data.n, &mut rng)?,
        LabelKind::Multilabel => synthesize_multilabel(&spec, cfg.data.n, &mut rng)?,
    };
    Ok((spec, ds))
}

pub fn split(cfg: &ExperimentConfig, ds: &Dataset) -> (Dataset, Dataset, Dataset) {
    ds.split(cfg.data.train_fraction, cfg.data.val_fraction)
}

/// Reads the splits from `dir`, or from `data.dir`, or synthesizes them.
pub fn splits(cfg: &ExperimentConfig, dir: Option<&Path>) -> CliResult<Splits> {
    match dir.map(Path::to_path_buf).or_else(|| cfg.data.dir.clone()) {
        Some(dir) => {
            let paths: Vec<PathBuf> = SPLIT_NAMES.iter().map(|n| dir.join(n)).collect();
            Ok(Splits {
                train: read_dataset(&paths[0])?,
                val: read_dataset(&paths[1])?,
                test: read_dataset(&paths[2])?,
                inputs: paths.iter().map(|p| p.display().to_string()).collect(),
            })
        }
        None => {
            let (_, ds) = synthesize(cfg)?;
            let (train, val, test) = split(cfg, &ds);
            Ok(Splits {
                train,
                val,
                test,
                inputs: Vec::new(),
            })
        }
    }
}

/// An explicit dataset file, or the configured test split.
pub fn eval_set(cfg: &ExperimentConfig, file: Option<&Path>) -> CliResult<(Dataset, Vec<String>)> {
    match file {
        Some(p) => Ok((read_dataset(p)?, vec![p.display().to_string()])),
        None => {
            let s = splits(cfg, None)?;
            Ok((s.test, s.inputs.into_iter().skip(2).collect()))
        }
    }
}
