use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Low-rank update `scale · gamma · beta` added to a frozen base matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `rows × rank`, random-normal at attach time.
    pub gamma: Tensor,
    /// `rank × cols`, zero at attach time.
    pub beta: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `scale · gamma · beta`, shaped like the target matrix.
    pub fn delta(&self) -> Result<Tensor> {
        let s = self.scale();
        Ok(self.gamma.matmul(&self.beta)?.map(|v| v * s))
    }
}

/// Which matrices receive adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub roles: Vec<Role>,
    /// `None` means every block.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets {
            roles: Role::ALL.to_vec(),
            layers: None,
        }
    }
}

impl LoraTargets {
    pub fn matches(&self, layer: usize, role: Role) -> bool {
        self.roles.contains(&role) && self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeOutcome {
    Merged(usize),
    /// Nothing was attached; the model is unchanged.
    NothingToMerge,
}

pub(crate) fn check_rank(rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Input("LoRA rank must be at least 1".into()));
    }
    Ok(())
}
