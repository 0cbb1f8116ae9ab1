//! Experiment configuration: TOML file plus flag overrides, with the
//! resolved form hashed for report provenance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arbor_core::encoder::{AdapterConfig, EncoderConfig};
use arbor_core::pipeline::{Intermediate, TrainSchedule, TuneMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub task_train: Option<PathBuf>,
    pub task_dev: Option<PathBuf>,
    pub task_test: Option<PathBuf>,
    pub task_kind: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        EncoderSection {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            ffn: d.ffn,
            max_len: d.max_len,
            dropout: d.dropout,
            vocab_size: d.vocab_size,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            dropout: self.dropout,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSection {
    pub size: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            size: AdapterConfig::default().size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub lr: f64,
    pub mode: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = TrainSchedule::treebank();
        ScheduleSection {
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            patience: d.patience,
            lr: d.lr,
            mode: "standard".to_string(),
        }
    }
}

impl ScheduleSection {
    pub fn to_schedule(&self) -> Result<TrainSchedule> {
        let mode = match self.mode.as_str() {
            "standard" => TuneMode::Standard,
            "adapter" => TuneMode::Adapter,
            other => bail!("config key `schedule.mode`: unknown value `{other}` (expected `standard` or `adapter`)"),
        };
        Ok(TrainSchedule {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            patience: self.patience,
            lr: self.lr,
            mode,
        })
    }

    /// Downstream defaults depend on the task family.
    pub fn downstream_default(task_kind: &str) -> ScheduleSection {
        let base = match task_kind {
            "seqc" => TrainSchedule::seqc(),
            _ => TrainSchedule::mcc(),
        };
        ScheduleSection {
            max_epochs: base.max_epochs,
            batch_size: base.batch_size,
            eval_every: base.eval_every,
            patience: base.patience,
            lr: base.lr,
            mode: "standard".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub arms: Vec<String>,
    pub mask_rate: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            arms: vec!["none".into(), "parsing".into(), "mlm".into()],
            mask_rate: 0.15,
        }
    }
}

impl FinetuneSection {
    pub fn parse_arms(&self) -> Result<Vec<Intermediate>> {
        self.arms
            .iter()
            .map(|a| match a.as_str() {
                "none" => Ok(Intermediate::None),
                "parsing" => Ok(Intermediate::Parsing),
                "mlm" => Ok(Intermediate::Mlm),
                other => bail!("config key `finetune.arms`: unknown arm `{other}`"),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub downstream: Option<ScheduleSection>,
    #[serde(default)]
    pub finetune: FinetuneSection,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> Result<ExperimentFile> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let file: ExperimentFile = toml::from_str(&text)
            .with_context(|| format!("config file {} is not valid", path.display()))?;
        Ok(file)
    }

    /// Hash of the resolved configuration for provenance lines in reports.
    pub fn fingerprint(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn require(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .clone()
            .with_context(|| format!("config key `data.{field}` is required for this command"))
    }
}
