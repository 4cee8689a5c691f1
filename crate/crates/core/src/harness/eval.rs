//! Perplexity, parameter and multiply-accumulate accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::chunk_windows;
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::pruning::LayerAllocation;

/// `exp` of the token-weighted mean next-token NLL over non-overlapping
/// windows of `stream`.
pub fn perplexity(model: &DecoderModel, stream: &[usize]) -> Result<f64> {
    let windows = chunk_windows(stream, model.config.max_seq + 1);
    if windows.is_empty() {
        return Err(Error::Input("evaluation stream is shorter than two tokens".into()));
    }
    let per: Vec<Result<(f64, usize)>> = windows
        .par_iter()
        .map(|w| Ok((model.sequence_loss(w)? * (w.len() - 1) as f64, w.len() - 1)))
        .collect();
    let (mut nll, mut count) = (0.0, 0usize);
    for r in per {
        let (l, n) = r?;
        nll += l;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// Multiply-accumulates per token in the linear layers:
/// `Σ_l (3·d·A_l + A_l·d + 3·d·F_l) + d·V`, with `A_l`/`F_l` the surviving
/// attention and MLP widths. Attention-score products are excluded.
pub fn mac_estimate(model: &DecoderModel) -> usize {
    let d = model.config.d_model;
    let blocks: usize = model
        .blocks
        .iter()
        .map(|b| {
            let a = b.attn_width();
            let f = b.ff_width();
            3 * d * a + a * d + 3 * d * f
        })
        .sum();
    blocks + d * model.config.vocab_size
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub perplexity: f64,
    pub param_count: usize,
    pub mac_estimate: usize,
    pub allocation: Vec<LayerAllocation>,
    /// Summed over the run's fuse calls; zero for unpruned reports.
    pub fusion_seconds: f64,
    pub fusion_mem_bytes: usize,
}

impl EvalReport {
    pub fn evaluate(label: &str, model: &DecoderModel, eval_stream: &[usize], allocation: Vec<LayerAllocation>) -> Result<Self> {
        Ok(EvalReport {
            label: label.to_string(),
            perplexity: perplexity(model, eval_stream)?,
            param_count: model.param_count(),
            mac_estimate: mac_estimate(model),
            allocation,
            fusion_seconds: 0.0,
            fusion_mem_bytes: 0,
        })
    }
}
