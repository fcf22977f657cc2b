//! Run configuration: one JSON document covering the model, the optimizer,
//! the schedule, and the dataset locations. Unknown keys are hard errors —
//! a silently ignored typo in a training config wastes hours.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::optim::OptimConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dataset directories, each holding `annotations.json` + `images/`.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Horizontal flip + scale jitter during training.
    #[serde(default)]
    pub augment: bool,
    /// Run validation AP every this many epochs (0 = only at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (last epoch always saved).
    #[serde(default = "default_ckpt_every")]
    pub ckpt_every: usize,
}

fn default_batch() -> usize {
    2
}
fn default_epochs() -> usize {
    10
}
fn default_eval_every() -> usize {
    1
}
fn default_ckpt_every() -> usize {
    1
}

impl RunConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        RunConfig {
            model: ModelConfig::with_kind(kind),
            optim: OptimConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            train_dir: None,
            val_dir: None,
            augment: false,
            eval_every: default_eval_every(),
            ckpt_every: default_ckpt_every(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        for (label, dir) in [("train_dir", &self.train_dir), ("val_dir", &self.val_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    return Err(Error::config(format!(
                        "{label} {} does not exist",
                        d.display()
                    )));
                }
                let ann = d.join("annotations.json");
                if !ann.is_file() {
                    return Err(Error::config(format!(
                        "{label} {} has no annotations.json",
                        d.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_split(&self, dir: &Path) -> Result<DatasetIndex> {
        crate::data::load_coco(&dir.join("annotations.json"), dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::with_kind(ModelKind::RsprompterAnchor);
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::with_kind(ModelKind::SamCls).to_json()).unwrap();
        v["warmup_stps"] = serde_json::json!(100);
        let text = serde_json::to_string(&v).unwrap();
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn missing_dataset_paths_fail_validation() {
        let mut cfg = RunConfig::with_kind(ModelKind::RsprompterQuery);
        cfg.train_dir = Some(PathBuf::from("/nonexistent/place"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_dir_without_annotations_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::with_kind(ModelKind::RsprompterQuery);
        cfg.val_dir = Some(dir.path().to_path_buf());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_batch_or_epochs_rejected() {
        let mut cfg = RunConfig::with_kind(ModelKind::SamDet);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::with_kind(ModelKind::SamDet);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
