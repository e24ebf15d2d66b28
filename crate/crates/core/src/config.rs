//! Run configuration with defaults for every field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignConfig;
use crate::data::DataConfig;
use crate::error::{invalid, Result};
use crate::evaluation::{GenerationConfig, MatchMode};
use crate::models::lm::LmConfig;
use crate::models::{PromptTemplate, VisionConfig};
use crate::peft::nf4::DEFAULT_BLOCK;
use crate::peft::LoraConfig;
use crate::planner::PlannerConfig;
use crate::training::{OptimizerConfig, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Corpus file; the bundled fixture corpus when absent.
    pub corpus: Option<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vision: VisionConfig,
    /// `vocab_size` is ignored and taken from the tokenizer.
    pub lm: LmConfig,
    pub template: PromptTemplate,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            lm: LmConfig::default(),
            template: PromptTemplate::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftSection {
    pub lora: LoraConfig,
    /// NF4-quantize the frozen language-model base.
    pub quantize: bool,
    pub block_size: usize,
}

impl Default for PeftSection {
    fn default() -> Self {
        Self {
            lora: LoraConfig::default(),
            quantize: true,
            block_size: DEFAULT_BLOCK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    /// Fine-tuning optimizer. The toy model needs a larger step than the
    /// library default.
    pub optimizer: OptimizerConfig,
    /// Independent fine-tuning runs differing only in shuffle seed.
    pub runs: usize,
    pub task: MatchMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 5e-3,
                warmup_steps: 10,
                ..OptimizerConfig::default()
            },
            runs: 1,
            task: MatchMode::Classification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub generation: GenerationConfig,
    /// Case- and whitespace-insensitive matching instead of exact.
    pub normalized_match: bool,
    /// Test items per class used by the attribute probe.
    pub probe_per_class: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            normalized_match: false,
            probe_per_class: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub peft: PeftSection,
    pub align: AlignConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub planner: PlannerConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write the fully resolved configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.vision.validate()?;
        self.peft.lora.validate()?;
        self.train.finetune.validate()?;
        self.train.optimizer.validate()?;
        self.eval.generation.validate()?;
        self.model.template.validate()?;
        if self.train.runs == 0 {
            return Err(invalid("train.runs must be at least 1"));
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(invalid("per-class caps must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_rejected() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        assert!(RunConfig::from_json(r#"{"train": {"epochz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = RunConfig::from_json(r#"{"train": {"runs": 3}}"#).unwrap();
        assert_eq!(partial.train.runs, 3);
        assert_eq!(partial.train.finetune.batch_size, 8);
    }
}
