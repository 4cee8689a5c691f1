use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderModel, LoraAdapter, ModelConfig, Role};
use crate::artifact::{read_archive, write_archive, ArtifactHeader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    target: String,
    rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    #[serde(default)]
    adapters: Vec<AdapterMeta>,
}

/// Writes a JSON manifest at `path` plus a little-endian f64 blob beside it.
pub fn save_checkpoint(model: &DecoderModel, path: &Path, header: ArtifactHeader) -> Result<()> {
    let mut adapters = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for role in Role::ALL {
            if let Some(a) = &b.linear(role).adapter {
                adapters.push(AdapterMeta {
                    target: super::param_name(l, role),
                    rank: a.rank,
                    alpha: a.alpha,
                });
            }
        }
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        adapters,
    };
    let mut tensors = model.named_params();
    tensors.extend(model.named_adapter_params());
    write_archive(path, header, serde_json::to_value(meta)?, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(DecoderModel, ArtifactHeader)> {
    let (manifest, tensors) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta)?;
    meta.config.validate()?;
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();

    // Start from a dense skeleton and swap every tensor in; widths may differ.
    let mut model = DecoderModel::init(&meta.config)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Input(format!("checkpoint is missing tensor {name}")))?;
        *model.param_mut(&name).expect("known parameter") = t;
    }
    for am in meta.adapters {
        let (layer, role) = am
            .target
            .strip_prefix("layers.")
            .and_then(|r| r.split_once('.'))
            .and_then(|(l, r)| Some((l.parse::<usize>().ok()?, Role::parse(r)?)))
            .ok_or_else(|| Error::Input(format!("bad adapter target {}", am.target)))?;
        let mut take = |suffix: &str| {
            let key = format!("{}.{suffix}", am.target);
            by_name
                .remove(&key)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing tensor {key}")))
        };
        let gamma = take("lora_gamma")?;
        let beta = take("lora_beta")?;
        let block = model
            .blocks
            .get_mut(layer)
            .ok_or_else(|| Error::Input(format!("adapter for missing layer {layer}")))?;
        block.linear_mut(role).adapter = Some(LoraAdapter {
            gamma,
            beta,
            rank: am.rank,
            alpha: am.alpha,
        });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Input(format!("unexpected tensor {extra} in checkpoint")));
    }
    model.check_shapes()?;
    Ok((model, manifest.header))
}
