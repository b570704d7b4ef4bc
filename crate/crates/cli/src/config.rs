//! Experiment configuration file.

use std::path::{Path, PathBuf};

use hetnoise::datagen::{GeneratorConfig, LabelKind};
use hetnoise::taylor::TaylorForm;
use hetnoise::trainer::{FeatureNet, ModelSpec, Objective, OptimizerConfig};
use hetnoise::{HeadConfig, Link, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    pub labels: LabelKind,
    /// Total rows before splitting.
    pub n: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Directory with `train.dataset`, `val.dataset` and `test.dataset`;
    /// when absent the data is synthesized in memory.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            labels: LabelKind::Multiclass,
            n: 62_500,
            train_fraction: 0.8,
            val_fraction: 0.1,
            seed: 0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_net: FeatureNet,
    pub variant: Variant,
    pub link: Link,
    pub tau: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub rank: usize,
    pub objective: Objective,
    pub taylor_form: TaylorForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let head = HeadConfig::new(Variant::Full, 2, 1);
        Self {
            feature_net: FeatureNet::Identity,
            variant: head.variant,
            link: head.link,
            tau: head.tau,
            train_samples: head.train_samples,
            eval_samples: head.eval_samples,
            rank: head.rank,
            objective: Objective::McNll,
            taylor_form: TaylorForm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Overrides the checkpoint's `eval_samples`.
    pub samples: Option<usize>,
    /// Overrides the checkpoint's temperature.
    pub tau: Option<f64>,
    pub seed: u64,
    pub covariance: bool,
    pub pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: None,
            tau: None,
            seed: 0,
            covariance: false,
            pairs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Lib(hetnoise::Error::Config(e.to_string())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Model spec for data of the given shape.
    pub fn model_spec(&self, input_dim: usize, classes: usize) -> CliResult<ModelSpec> {
        let m = &self.model;
        let mut spec = ModelSpec::new(input_dim, m.feature_net, m.variant, classes);
        spec.head.link = m.link;
        spec.head.tau = m.tau;
        spec.head.train_samples = m.train_samples;
        spec.head.eval_samples = m.eval_samples;
        spec.head.rank = m.rank;
        spec.objective = m.objective;
        spec.taylor_form = m.taylor_form;
        spec.validate().map_err(|e| prefix("model", e))?;
        Ok(spec)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if d.n == 0 {
            return Err(CliError::Usage("data.n must be at least 1".into()));
        }
        if !(d.train_fraction > 0.0
            && d.val_fraction >= 0.0
            && d.train_fraction + d.val_fraction <= 1.0)
        {
            return Err(CliError::Usage(
                "data.train_fraction and data.val_fraction must be non-negative and sum to at most 1".into(),
            ));
        }
        d.generator
            .validate()
            .map_err(|e| prefix("data.generator", e))?;
        let expected = match self.model.link {
            Link::Softmax => LabelKind::Multiclass,
            Link::Sigmoid => LabelKind::Multilabel,
        };
        if d.labels != expected {
            return Err(prefix(
                "model",
                hetnoise::Error::Config(format!(
                    "link {:?} cannot fit {:?} labels",
                    self.model.link, d.labels
                )),
            ));
        }
        self.model_spec(d.generator.dim, d.generator.classes)?;
        self.optimizer
            .validate()
            .map_err(|e| prefix("optimizer", e))?;
        if self.eval.samples == Some(0) {
            return Err(prefix(
                "eval",
                hetnoise::Error::Config("samples must be at least 1".into()),
            ));
        }
        if let Some(t) = self.eval.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(prefix(
                    "eval",
                    hetnoise::Error::Config(format!("tau must be positive, got {t}")),
                ));
            }
        }
        Ok(())
    }
}

fn prefix(section: &str, e: hetnoise::Error) -> CliError {
    use hetnoise::Error as E;
    CliError::Lib(match e {
        E::Config(m) => E::Config(format!("{section}: {m}")),
        E::Domain(m) => E::Domain(format!("{section}: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.tau = 0.15;
        cfg.optimizer.base_lr = 0.1 + 1e-17;
        cfg.data.dir = Some("data/x".into());
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"model": {"tua": 1.0}}"#,
            r#"{"data": {"generator": {"clases": 3}}}"#,
            r#"{"optimizer": {"lr": 0.1}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"model": {"variant": "diagonal"}}"#).unwrap();
        assert_eq!(cfg.model.variant, Variant::Diagonal);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
    }

    #[test]
    fn zero_tau_names_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.tau = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("tau"), "{msg}");
    }

    #[test]
    fn hash_changes_with_any_knob() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.data.generator.jitter += 0.1;
        assert_ne!(base.hash(), other.hash());
    }
}
