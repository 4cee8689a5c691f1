//! JSON run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{LoraConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, DEFAULT_FUSION_DIM};
use crate::importance::CoarseUnit;
use crate::model::ModelConfig;
use crate::pruning::default_protected_layers;

pub const SEED_ENV: &str = "HYWIA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fine,
    Coarse,
    Hybrid,
    FixedAlpha,
    LiteralAttention,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fine => "fine",
            Method::Coarse => "coarse",
            Method::Hybrid => "hybrid",
            Method::FixedAlpha => "fixed-alpha",
            Method::LiteralAttention => "literal-attention",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fine" => Method::Fine,
            "coarse" => Method::Coarse,
            "hybrid" => Method::Hybrid,
            "fixed-alpha" | "fixed" | "fixed-α" => Method::FixedAlpha,
            "literal-attention" | "literal" => Method::LiteralAttention,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Calibration sequences for gradient accumulation.
    pub samples: usize,
    pub target_ratio: f64,
    pub method: Method,
    /// Required when `method` is `fixed-alpha`.
    pub fixed_alpha: Option<f64>,
    pub seed: u64,
    /// `None` protects the first and last blocks.
    pub protected_layers: Option<BTreeSet<usize>>,
    pub uniform_per_layer: bool,
    pub coarse_unit: CoarseUnit,
    pub fusion_dim: usize,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    /// Text file to train on; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            samples: 50,
            target_ratio: 0.2,
            method: Method::Hybrid,
            fixed_alpha: None,
            seed: 0,
            protected_layers: None,
            uniform_per_layer: false,
            coarse_unit: CoarseUnit::Group,
            fusion_dim: DEFAULT_FUSION_DIM,
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            corpus: None,
            synthetic_bytes: 100_000,
        }
    }
}

/// Seeds for every random consumer of a run, drawn from one generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub model: u64,
    pub pretrain: u64,
    pub projections: u64,
    pub lora: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!("target_ratio {} outside [0, 1)", self.target_ratio)));
        }
        if self.method == Method::FixedAlpha {
            match self.fixed_alpha {
                Some(a) if (0.0..=1.0).contains(&a) => {}
                Some(a) => return Err(Error::Config(format!("fixed_alpha {a} outside [0, 1]"))),
                None => return Err(Error::Config("method fixed-alpha requires fixed_alpha".into())),
            }
        }
        if self.fusion_dim == 0 {
            return Err(Error::Config("fusion_dim must be at least 1".into()));
        }
        if let Some(bad) = self.protected().iter().find(|&&l| l >= self.model.n_layers) {
            return Err(Error::Config(format!(
                "protected layer {bad} does not exist ({} layers)",
                self.model.n_layers
            )));
        }
        Ok(())
    }

    pub fn protected(&self) -> BTreeSet<usize> {
        self.protected_layers
            .clone()
            .unwrap_or_else(|| default_protected_layers(self.model.n_layers))
    }

    pub fn fusion_mode(&self, method: Method) -> FusionMode {
        match method {
            Method::Fine => FusionMode::Fixed(1.0),
            Method::Coarse => FusionMode::Fixed(0.0),
            Method::Hybrid => FusionMode::TwoWay,
            Method::FixedAlpha => FusionMode::Fixed(self.fixed_alpha.unwrap_or(0.5)),
            Method::LiteralAttention => FusionMode::LiteralAttention,
        }
    }

    pub fn seeds(&self) -> RunSeeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        RunSeeds {
            model: rng.next_u64(),
            pretrain: rng.next_u64(),
            projections: rng.next_u64(),
            lora: rng.next_u64(),
        }
    }
}

/// Parses a protected-layer spec: `none`, `default`, or a comma list of
/// indices and inclusive ranges such as `0,3-5`.
pub fn parse_layer_spec(spec: &str) -> Result<Option<BTreeSet<usize>>> {
    let spec = spec.trim();
    match spec {
        "default" => return Ok(None),
        "none" | "" => return Ok(Some(BTreeSet::new())),
        _ => {}
    }
    let bad = || Error::Config(format!("bad layer spec {spec:?}"));
    let mut out = BTreeSet::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.insert(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(Some(out))
}
