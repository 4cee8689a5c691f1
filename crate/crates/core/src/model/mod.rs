//! Small decoder-only transformer used as the pruning subject.

mod checkpoint;
mod decoder;
mod lora;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decoder::{Block, DecoderModel, Linear, Recorded, Trainable};
pub use lora::{LoraAdapter, LoraTargets, MergeOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Byte-level vocabulary, 64-wide, 4 blocks of 4 heads, 256-wide MLP.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            d_ff: 256,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Builds a config with `head_dim = d_model / n_heads`.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let cfg = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model / n_heads,
            d_ff,
            max_seq,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the dense model.
    pub fn dense_param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        self.vocab_size * d + self.max_seq * d + self.n_layers * per_block + d + d * self.vocab_size
    }
}

/// The seven projection matrices of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Wq,
    Wk,
    Wv,
    Wo,
    Wgate,
    Wup,
    Wdown,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Wq,
        Role::Wk,
        Role::Wv,
        Role::Wo,
        Role::Wgate,
        Role::Wup,
        Role::Wdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Wq => "wq",
            Role::Wk => "wk",
            Role::Wv => "wv",
            Role::Wo => "wo",
            Role::Wgate => "wgate",
            Role::Wup => "wup",
            Role::Wdown => "wdown",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Parameter name of a block matrix, e.g. `layers.2.wup`.
pub fn param_name(layer: usize, role: Role) -> String {
    format!("layers.{layer}.{}", role.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_is_enforced() {
        assert!(matches!(
            ModelConfig::new(256, 65, 4, 4, 256, 128, 0),
            Err(Error::Config(_))
        ));
        assert!(ModelConfig::new(256, 64, 4, 4, 256, 128, 0).is_ok());
        assert!(ModelConfig::new(1, 64, 4, 4, 256, 128, 0).is_err());
        assert!(ModelConfig::new(256, 64, 0, 4, 256, 128, 0).is_err());
    }

    #[test]
    fn default_matches_constructor() {
        assert_eq!(
            ModelConfig::default(),
            ModelConfig::new(256, 64, 4, 4, 256, 128, 0).unwrap()
        );
    }
}
