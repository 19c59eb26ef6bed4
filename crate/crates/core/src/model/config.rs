use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Learned absolute positions, pre-norm LayerNorm, GELU MLP, biases.
    Gpt2Style,
    /// Rotary positions, RMSNorm, SwiGLU MLP, no biases.
    LlamaStyle,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gpt2Style => "gpt2_style",
            Family::LlamaStyle => "llama_style",
        }
    }
}

/// Switch (top-1) mixture-of-experts replacement for the decoder MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub n_experts: usize,
    #[serde(default = "default_capacity")]
    pub capacity_factor: f64,
    #[serde(default = "default_aux")]
    pub aux_loss_coeff: f64,
}

fn default_capacity() -> f64 {
    1.0
}
fn default_aux() -> f64 {
    0.01
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 1 {
            return Err(Error::config("moe.n_experts must be >= 1"));
        }
        if !(self.capacity_factor > 0.0) {
            return Err(Error::config("moe.capacity_factor must be > 0"));
        }
        if !(self.aux_loss_coeff >= 0.0) {
            return Err(Error::config("moe.aux_loss_coeff must be >= 0"));
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub tie_embeddings: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEConfig>,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_rope_base() -> f64 {
    10_000.0
}

pub const PRESET_NAMES: &[&str] = &[
    "gpt2_teacher_705m",
    "llama_teacher_360m",
    "student_58m",
    "desk_teacher",
    "desk_teacher_llama",
    "desk_student",
];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn make(family: Family, n_layers: usize, n_heads: usize, hidden: usize, intermediate: usize, max_seq: usize) -> Self {
        Self {
            family,
            n_layers,
            n_heads,
            hidden,
            intermediate,
            max_seq,
            vocab: 16_000,
            tie_embeddings: family == Family::Gpt2Style,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
            moe: None,
        }
    }

    /// Named architecture presets. The three full-size presets carry the
    /// published teacher/student hyperparameters; the `desk_*` presets are
    /// laptop-sized versions with the same family split.
    pub fn preset(name: &str) -> Result<Self> {
        use Family::*;
        Ok(match name {
            "gpt2_teacher_705m" => Self::make(Gpt2Style, 24, 16, 1536, 6144, 128),
            "llama_teacher_360m" => Self::make(LlamaStyle, 24, 8, 1024, 3072, 256),
            // Student context length is not published; it inherits the LLaMA teacher's.
            "student_58m" => Self::make(LlamaStyle, 16, 8, 512, 1024, 256),
            "desk_teacher" => Self::make(Gpt2Style, 4, 4, 128, 512, 128),
            "desk_teacher_llama" => Self::make(LlamaStyle, 4, 4, 128, 256, 256),
            "desk_student" => Self::make(LlamaStyle, 2, 4, 64, 128, 256),
            other => {
                return Err(Error::UnknownName {
                    kind: "model preset",
                    name: other.to_string(),
                    known: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
                })
            }
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden ({}) must be a positive multiple of n_heads ({})",
                self.hidden, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::config("max_seq must be >= 2"));
        }
        if self.vocab < 4 {
            return Err(Error::config("vocab must be >= 4"));
        }
        if self.intermediate == 0 {
            return Err(Error::config("intermediate must be > 0"));
        }
        if self.family == Family::LlamaStyle && self.head_dim() % 2 != 0 {
            return Err(Error::config("rotary embeddings need an even head dimension"));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }
}
