//! Plain-text `key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{MediumForm, PretrainConfig, TrainConfig};
use crate::error::io_err;
use crate::fusion::{FusionConfig, FusionMode};
use crate::lm::{LmConfig, LoraConfig};
use crate::model::ModelConfig;
use crate::prompt::Level;
use crate::{Result, TmfError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub adaptor_hidden: usize,
    pub fusion_heads: usize,

    pub pretrain_steps: u64,
    pub pretrain_lr: f32,

    pub steps: u64,
    pub t1: u64,
    pub lr: f32,
    pub batch: usize,
    pub warmup_frac: f64,
    pub medium_form: MediumForm,
    pub resample_negatives: bool,
    pub window_frac: f64,

    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        let lora = LoraConfig::default();
        let pre = PretrainConfig::default();
        let tr = TrainConfig::default();
        Self {
            seed: 0,
            d_llm: lm.d_llm,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_seq_len: lm.max_seq_len,
            mlp_ratio: lm.mlp_ratio,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            adaptor_hidden: 0,
            fusion_heads: 1,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            steps: tr.steps,
            t1: tr.t1,
            lr: tr.lr,
            batch: tr.batch,
            warmup_frac: tr.warmup_frac,
            medium_form: tr.medium_form,
            resample_negatives: tr.resample_negatives,
            window_frac: tr.window_frac,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TmfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| TmfError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(TmfError::Config("batch must be positive".into()));
        }
        if self.steps < 2 {
            return Err(TmfError::Config("steps must be at least 2".into()));
        }
        if self.t1 >= self.steps {
            return Err(TmfError::Config(format!("t1 = {} must be below steps = {}", self.t1, self.steps)));
        }
        if !(0.0..=1.0).contains(&self.window_frac) {
            return Err(TmfError::Config(format!("window_frac = {} is outside [0, 1]", self.window_frac)));
        }
        if self.ablation_seeds.is_empty() {
            return Err(TmfError::Config("ablation_seeds is empty".into()));
        }
        self.model_config(FusionMode::Full).lm.validate_shape()
    }

    pub fn model_config(&self, mode: FusionMode) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            lm: LmConfig {
                d_llm: self.d_llm,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                max_seq_len: self.max_seq_len,
                vocab_size: 0,
                mlp_ratio: self.mlp_ratio,
            },
            fusion: FusionConfig {
                heads: self.fusion_heads,
                mode,
                ..FusionConfig::default()
            },
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
            },
            adaptor_hidden: self.adaptor_hidden,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch: self.batch,
            warmup_frac: self.warmup_frac,
            window_frac: self.window_frac,
        }
    }

    pub fn train_config(&self, max_level: Level) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.steps,
            t1: self.t1,
            lr: self.lr,
            batch: self.batch,
            warmup_frac: self.warmup_frac,
            medium_form: self.medium_form,
            max_level,
            resample_negatives: self.resample_negatives,
            window_frac: self.window_frac,
        }
    }
}

impl LmConfig {
    /// Checks everything except the vocabulary size, which comes from data.
    pub fn validate_shape(&self) -> Result<()> {
        LmConfig {
            vocab_size: 6,
            ..self.clone()
        }
        .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_value_text() {
        let cfg = RunConfig::parse("steps = 300\nlr = 0.002\nmedium_form = \"phase_normalized\"\n").unwrap();
        assert_eq!(cfg.steps, 300);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.medium_form, MediumForm::PhaseNormalized);
        assert_eq!(cfg.batch, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("stepz = 3").is_err());
        assert!(RunConfig::parse("steps = 10\nt1 = 10").is_err());
        assert!(RunConfig::parse("d_llm = 30\nn_heads = 4").is_err());
    }
}
