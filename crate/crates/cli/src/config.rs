use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use lapse_core::dataset::{EventClass, SplitMode};
use lapse_core::training::TrainConfig;

use crate::invalid;

/// Settings that may come from a config file. Every key is optional and
/// command-line flags win over file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub event: Option<EventClass>,
    pub backbone: Option<String>,
    pub head: Option<String>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub fine_tune_backbone: Option<bool>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    /// Values from `self`, with anything set in `over` taking precedence.
    pub fn overlay(self, over: FileConfig) -> FileConfig {
        FileConfig {
            seed: over.seed.or(self.seed),
            workers: over.workers.or(self.workers),
            data_root: over.data_root.or(self.data_root),
            annotations: over.annotations.or(self.annotations),
            event: over.event.or(self.event),
            backbone: over.backbone.or(self.backbone),
            head: over.head.or(self.head),
            learning_rate: over.learning_rate.or(self.learning_rate),
            batch_size: over.batch_size.or(self.batch_size),
            max_epochs: over.max_epochs.or(self.max_epochs),
            early_stop_patience: over.early_stop_patience.or(self.early_stop_patience),
            fine_tune_backbone: over.fine_tune_backbone.or(self.fine_tune_backbone),
            out: over.out.or(self.out),
        }
    }

    pub fn train_config(&self, event: EventClass) -> TrainConfig {
        let mut cfg = TrainConfig::new(event);
        cfg.global_seed = self.seed.unwrap_or(0);
        cfg.workers = self.workers.unwrap_or(1);
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.early_stop_patience {
            cfg.early_stop_patience = v;
        }
        cfg
    }
}

/// What `prepare` recorded next to its manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareRecord {
    pub annotations: PathBuf,
    pub event: EventClass,
    pub seed: u64,
    pub ratio: f64,
    pub split_mode: SplitMode,
    pub balance: bool,
    pub min_duration_sec: f64,
    pub train_segments: usize,
    pub test_segments: usize,
    pub listing_entries: usize,
}

pub const PREPARE_RECORD: &str = "prepare.json";
pub const SPLIT_FILE: &str = "split.csv";
pub const LISTING_FILE: &str = "augmented.csv";

impl PrepareRecord {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(PREPARE_RECORD);
        let text = fs::read_to_string(&path).map_err(|e| {
            invalid(format!(
                "{} is not a prepared manifest directory: {e}",
                dir.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(PREPARE_RECORD);
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
