//! Pre-training with SGD + momentum and LoRA recovery with Adam.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{evenly_spaced_windows, random_windows};
use super::optim::{Adam, Sgd};
use crate::error::{Error, Result};
use crate::model::{DecoderModel, LoraTargets, MergeOutcome, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            lr: 0.1,
            momentum: 0.9,
            batch: 8,
            clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            lr: 1e-4,
            steps: 500,
            batch: 64,
            targets: LoraTargets::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss on a fixed probe batch before the first step.
    pub initial_loss: f64,
    /// Mean loss on the same probe batch after the last step.
    pub final_loss: f64,
    /// L2 norm of the last batch's mean gradient.
    pub final_grad_norm: f64,
}

/// Mean loss and mean gradients over `seqs`, reduced in order.
pub fn batch_grads(
    model: &DecoderModel,
    seqs: &[Vec<usize>],
    trainable: Trainable,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if seqs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per: Vec<Result<(f64, BTreeMap<String, Tensor>)>> =
        seqs.par_iter().map(|s| model.sequence_grads(s, trainable)).collect();
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (name, t) in g {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&t)?,
                None => {
                    total.insert(name, t);
                }
            }
        }
    }
    let n = seqs.len() as f64;
    for t in total.values_mut() {
        *t = t.map(|v| v / n);
    }
    Ok((loss / n, total))
}

pub fn mean_loss(model: &DecoderModel, seqs: &[Vec<usize>]) -> Result<f64> {
    let losses: Vec<Result<f64>> = seqs.par_iter().map(|s| model.sequence_loss(s)).collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / seqs.len().max(1) as f64)
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            *t = t.map(|v| v * s);
        }
    }
    norm
}

fn check_finite(step: usize, loss: f64, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            reason: format!("loss became {loss}"),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Training {
            step,
            reason: format!("non-finite gradient in {name}"),
        });
    }
    Ok(())
}

fn window_len(model: &DecoderModel, stream: &[usize]) -> Result<usize> {
    let len = (model.config.max_seq + 1).min(stream.len());
    if len < 2 {
        return Err(Error::Input("training stream is shorter than two tokens".into()));
    }
    Ok(len)
}

/// Next-token training of every base parameter.
pub fn pretrain(model: &mut DecoderModel, stream: &[usize], cfg: &PretrainConfig, seed: u64) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let len = window_len(model, stream)?;
    let probe = evenly_spaced_windows(stream, cfg.batch, len)?;
    let initial_loss = mean_loss(model, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut last_norm = 0.0;
    for step in 0..cfg.steps {
        let batch = random_windows(stream, cfg.batch, len, &mut rng);
        let (loss, mut grads) = batch_grads(model, &batch, Trainable::Base)?;
        check_finite(step, loss, &grads)?;
        last_norm = clip(&mut grads, cfg.clip);
        for (name, g) in &grads {
            let p = model.param_mut(name).expect("gradient for known parameter");
            opt.step(name, p, g)?;
        }
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    let final_loss = mean_loss(model, &probe)?;
    if !final_loss.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            reason: format!("final loss {final_loss}"),
        });
    }
    Ok(TrainReport {
        steps: cfg.steps,
        initial_loss,
        final_loss,
        final_grad_norm: last_norm,
    })
}

/// Attaches adapters, trains only them with Adam, then merges.
pub fn lora_finetune(model: &mut DecoderModel, stream: &[usize], cfg: &LoraConfig, seed: u64) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("LoRA steps and batch must be at least 1".into()));
    }
    let len = window_len(model, stream)?;
    let probe = evenly_spaced_windows(stream, cfg.batch.min(16), len)?;
    let initial_loss = mean_loss(model, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.attach_lora(&cfg.targets, cfg.rank, cfg.alpha, seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut last_norm = 0.0;
    for step in 0..cfg.steps {
        let batch = random_windows(stream, cfg.batch, len, &mut rng);
        let (loss, grads) = batch_grads(model, &batch, Trainable::Adapters)?;
        check_finite(step, loss, &grads)?;
        last_norm = global_norm(&grads);
        opt.tick();
        for (name, g) in &grads {
            let p = model.adapter_param_mut(name).expect("gradient for known adapter");
            opt.step(name, p, g)?;
        }
    }
    if model.merge_lora()? == MergeOutcome::NothingToMerge {
        return Err(Error::Contract("no adapters were merged".into()));
    }
    Ok(TrainReport {
        steps: cfg.steps,
        initial_loss,
        final_loss: mean_loss(model, &probe)?,
        final_grad_norm: last_norm,
    })
}
