use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tasks::{TaskKind, TaskSpec};
use crate::align::{EndOfSource, EPSILON_DENOM, EPSILON_P};
use crate::error::{Error, Result};
use crate::model::{AlignmentForm, ModelConfig, Variant};

/// Everything needed to reproduce one training run. Serialized as flat TOML;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub epsilon_p: f64,
    pub epsilon_denom: f64,
    pub noise_var: f64,
    pub energy_offset: f64,
    pub lambda_avg: f64,
    pub lambda_var: f64,
    pub max_len: usize,
    pub alignment: AlignmentForm,
    pub end_of_source: EndOfSource,
    // task
    pub task: TaskKind,
    pub shift: usize,
    pub min_len: usize,
    pub max_src_len: usize,
    // optimization
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub warmup_init_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    // validation
    pub valid_size: usize,
    pub eval_every: usize,
    /// Stop as soon as validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            d_model: 64,
            ffn_dim: 128,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            variant: Variant::MmaIl,
            epsilon_p: EPSILON_P,
            epsilon_denom: EPSILON_DENOM,
            noise_var: 1.0,
            energy_offset: -1.0,
            lambda_avg: 0.0,
            lambda_var: 0.0,
            max_len: 24,
            alignment: AlignmentForm::Recurrent,
            end_of_source: EndOfSource::Absorb,
            task: TaskKind::Copy,
            shift: 1,
            min_len: 5,
            max_src_len: 15,
            seed: 1,
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            warmup: 400,
            warmup_init_lr: 1e-7,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            valid_size: 512,
            eval_every: 250,
            stop_at_accuracy: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.task_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.max_src_len + 1 > self.max_len {
            return Err(Error::Config(format!(
                "max_src_len {} plus the end token exceeds max_len {}",
                self.max_src_len, self.max_len
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !(0.0..1.0).contains(&self.label_smoothing) || self.clip_norm < 0.0 {
            return Err(Error::Config("lr must be positive, label_smoothing in [0, 1), clip_norm >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            n_heads: self.n_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            dropout: self.dropout,
            variant: self.variant,
            epsilon_p: self.epsilon_p,
            epsilon_denom: self.epsilon_denom,
            noise_var: self.noise_var,
            energy_offset: self.energy_offset,
            lambda_avg: self.lambda_avg,
            lambda_var: self.lambda_var,
            max_len: self.max_len,
            alignment: self.alignment,
            end_of_source: self.end_of_source,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            shift: self.shift,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_src_len,
            seed: self.seed,
        }
    }
}
