use serde::{Deserialize, Serialize};

use crate::align::{EndOfSource, EPSILON_DENOM, EPSILON_P};
use crate::error::{Error, Result};

/// Decoder-encoder attention flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Ordinary softmax attention over the whole source.
    Offline,
    /// One infinite-lookback monotonic head per decoder layer.
    Milk,
    /// Every head is a hard monotonic attention.
    MmaH,
    /// Every head is an infinite-lookback monotonic attention.
    MmaIl,
}

impl Variant {
    pub fn is_monotonic(self) -> bool {
        !matches!(self, Variant::Offline)
    }

    pub fn has_lookback(self) -> bool {
        matches!(self, Variant::Milk | Variant::MmaIl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Offline => "offline",
            Variant::Milk => "milk",
            Variant::MmaH => "mma_h",
            Variant::MmaIl => "mma_il",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Variant::Offline),
            "milk" => Ok(Variant::Milk),
            "mma_h" => Ok(Variant::MmaH),
            "mma_il" => Ok(Variant::MmaIl),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// How training computes the expected alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    /// Division-free first-order scan.
    #[default]
    Recurrent,
    /// Closed form with a clamped cumulative-product denominator.
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Includes the three reserved ids (pad, bos, eos).
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
    /// Initial value of the learnable per-head energy offset.
    pub energy_offset: f64,
    pub lambda_avg: f64,
    pub lambda_var: f64,
    /// Longest sequence (including the end token) on either side.
    pub max_len: usize,
    pub alignment: AlignmentForm,
    pub end_of_source: EndOfSource,
}

impl Default for ModelConfig {
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
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= super::FIRST_CONTENT_TOKEN {
            return fail(format!("vocab_size must exceed the {} reserved ids", super::FIRST_CONTENT_TOKEN));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lambda_avg < 0.0 || self.lambda_var < 0.0 {
            return fail("latency weights must be non-negative".into());
        }
        if self.noise_var < 0.0 {
            return fail("noise_var must be non-negative".into());
        }
        if !(self.epsilon_p > 0.0 && self.epsilon_p < 0.5) {
            return fail(format!("epsilon_p {} outside (0, 0.5)", self.epsilon_p));
        }
        if !(self.epsilon_denom > 0.0 && self.epsilon_denom < 1.0) {
            return fail(format!("epsilon_denom {} outside (0, 1)", self.epsilon_denom));
        }
        Ok(())
    }

    /// Heads in each decoder-encoder attention; MILk keeps a single head.
    pub fn cross_heads(&self) -> usize {
        if self.variant == Variant::Milk {
            1
        } else {
            self.n_heads
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
