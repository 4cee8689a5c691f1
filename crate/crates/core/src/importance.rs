//! Gradient accumulation and diagonal empirical-Fisher importance.
//!
//! Gradients are taken with respect to a multiplicative keep-mask over the
//! weights, evaluated at the keep-all mask: for a weight `w`,
//! `∂L/∂m_w = w · ∂L/∂w`. Fine scores sum the per-weight Fisher over the
//! weights a channel owns; coarse scores pool the accumulated gradients of a
//! whole group (or layer) into one number.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_archive, write_archive, ArtifactHeader};
use crate::error::{Error, Result};
use crate::grouping::{DependencyGroup, Slice};
use crate::model::{DecoderModel, Trainable};
use crate::tensor::Tensor;

/// Running per-parameter sums of gradients and squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Tensor>,
    sq_sums: BTreeMap<String, Tensor>,
    sample_count: usize,
}

impl GradAccumulator {
    pub fn new<'a>(shapes: impl IntoIterator<Item = (String, &'a [usize])>) -> Self {
        let sums: BTreeMap<String, Tensor> = shapes
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        GradAccumulator {
            sq_sums: sums.clone(),
            sums,
            sample_count: 0,
        }
    }

    pub fn for_model(model: &DecoderModel) -> Self {
        Self::new(model.named_params().into_iter().map(|(n, t)| (n, t.shape())))
    }

    /// Adds one sample's gradients; every tracked parameter must be present.
    pub fn add(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(Error::Shape(format!(
                "sample carries {} gradients, accumulator tracks {}",
                grads.len(),
                self.sums.len()
            )));
        }
        for (name, g) in grads {
            let (sum, sq) = match (self.sums.get_mut(name), self.sq_sums.get_mut(name)) {
                (Some(s), Some(q)) => (s, q),
                _ => return Err(Error::Input(format!("untracked parameter {name}"))),
            };
            if sum.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    sum.shape()
                )));
            }
            for ((s, q), &v) in sum.data_mut().iter_mut().zip(sq.data_mut()).zip(g.data()) {
                *s += v;
                *q += v * v;
            }
        }
        self.sample_count += 1;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn sum(&self, name: &str) -> Option<&Tensor> {
        self.sums.get(name)
    }

    pub fn sq_sum(&self, name: &str) -> Option<&Tensor> {
        self.sq_sums.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sums.keys().map(String::as_str)
    }

    /// Per-weight empirical Fisher `F_w = mean over samples of g_w²`.
    pub fn fisher(&self, name: &str) -> Option<Tensor> {
        let n = self.sample_count.max(1) as f64;
        self.sq_sums.get(name).map(|t| t.map(|v| v / n))
    }

    pub fn fisher_diag(&self) -> BTreeMap<String, Tensor> {
        self.sums
            .keys()
            .map(|n| (n.clone(), self.fisher(n).expect("tracked")))
            .collect()
    }

    fn sum_values<'a>(&'a self, s: &'a Slice) -> Result<impl Iterator<Item = f64> + 'a> {
        let t = self.lookup(&self.sums, s)?;
        Ok(s.offsets().map(move |o| t.data()[o]))
    }

    fn sq_values<'a>(&'a self, s: &'a Slice) -> Result<impl Iterator<Item = f64> + 'a> {
        let t = self.lookup(&self.sq_sums, s)?;
        Ok(s.offsets().map(move |o| t.data()[o]))
    }

    fn lookup<'a>(&self, map: &'a BTreeMap<String, Tensor>, s: &Slice) -> Result<&'a Tensor> {
        let t = map
            .get(&s.param)
            .ok_or_else(|| Error::Input(format!("no gradients for {}", s.param)))?;
        if t.shape() != s.shape {
            return Err(Error::Structural(format!(
                "slice of {} expects shape {:?}, accumulator has {:?}",
                s.param,
                s.shape,
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Accumulated gradient entries of the given slices, in order.
    pub fn slice_sums(&self, slices: &[&Slice]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in slices {
            out.extend(self.sum_values(s)?);
        }
        Ok(out)
    }

    /// Per-weight Fisher values of the given slices, in order.
    pub fn slice_fisher(&self, slices: &[&Slice]) -> Result<Vec<f64>> {
        let n = self.sample_count.max(1) as f64;
        let mut out = Vec::new();
        for s in slices {
            out.extend(self.sq_values(s)?.map(|v| v / n));
        }
        Ok(out)
    }

    /// Writes the sums in the checkpoint archive format.
    pub fn save(&self, path: &Path, header: ArtifactHeader) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in &self.sums {
            tensors.push((format!("sum.{n}"), t));
        }
        for (n, t) in &self.sq_sums {
            tensors.push((format!("sq.{n}"), t));
        }
        let meta = AccumulatorMeta {
            sample_count: self.sample_count,
        };
        write_archive(path, header, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = read_archive(path)?;
        let meta: AccumulatorMeta = serde_json::from_value(manifest.meta)?;
        let mut sums = BTreeMap::new();
        let mut sq_sums = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("sum.") {
                sums.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("sq.") {
                sq_sums.insert(n.to_string(), t);
            } else {
                return Err(Error::Input(format!("unexpected tensor {name} in accumulator dump")));
            }
        }
        if sums.keys().ne(sq_sums.keys()) {
            return Err(Error::Input("accumulator dump has unmatched sum/sq tensors".into()));
        }
        Ok(GradAccumulator {
            sums,
            sq_sums,
            sample_count: meta.sample_count,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AccumulatorMeta {
    sample_count: usize,
}

/// Next-token loss of `seq` and the gradient with respect to a keep-mask on
/// every base parameter, at the keep-all mask.
pub fn mask_gradients(model: &DecoderModel, seq: &[usize]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let (loss, grads) = model.sequence_grads(seq, Trainable::Base)?;
    let mut out = BTreeMap::new();
    for (name, g) in grads {
        let w = model
            .param(&name)
            .ok_or_else(|| Error::Structural(format!("gradient for unknown parameter {name}")))?;
        out.insert(name, g.zip_with(w, |gv, wv| gv * wv)?);
    }
    Ok((loss, out))
}

/// Forward and backward over every sample, summing mask gradients.
///
/// Samples are processed in a canonical (sorted) order so the result does not
/// depend on how the caller ordered them. Per-sample passes run in parallel;
/// the reduction is sequential.
pub fn accumulate(model: &DecoderModel, samples: &[Vec<usize>]) -> Result<GradAccumulator> {
    if samples.is_empty() {
        return Err(Error::Input("gradient accumulation needs at least one sample".into()));
    }
    let mut order: Vec<&Vec<usize>> = samples.iter().collect();
    order.sort();
    let mut acc = GradAccumulator::for_model(model);
    let chunk = rayon::current_num_threads().max(1) * 2;
    for batch in order.chunks(chunk) {
        let grads: Vec<Result<BTreeMap<String, Tensor>>> = batch
            .par_iter()
            .map(|s| mask_gradients(model, s).map(|(_, g)| g))
            .collect();
        for g in grads {
            acc.add(&g?)?;
        }
    }
    Ok(acc)
}

/// Pooling unit for coarse scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseUnit {
    /// One score per dependency group.
    #[default]
    Group,
    /// Every group in a layer shares one score pooled over the layer's groups.
    Layer,
}

/// Fine score of each channel of each group: `Σ F_w` over the weights the
/// channel's removal deletes.
pub fn fine_importance(acc: &GradAccumulator, groups: &[DependencyGroup]) -> Result<Vec<Vec<f64>>> {
    check_samples(acc)?;
    groups
        .iter()
        .map(|g| {
            g.channels
                .iter()
                .map(|c| {
                    let refs: Vec<&Slice> = c.members.iter().collect();
                    Ok(acc.slice_fisher(&refs)?.iter().sum())
                })
                .collect()
        })
        .collect()
}

/// Coarse score of each group: mean of the squared accumulated gradient
/// entries over the pooled slices.
pub fn coarse_importance(
    acc: &GradAccumulator,
    groups: &[DependencyGroup],
    unit: CoarseUnit,
) -> Result<Vec<f64>> {
    check_samples(acc)?;
    let mean_sq = |slices: &[&Slice]| -> Result<f64> {
        let v = acc.slice_sums(slices)?;
        if v.is_empty() {
            return Ok(0.0);
        }
        Ok(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64)
    };
    match unit {
        CoarseUnit::Group => groups
            .iter()
            .map(|g| mean_sq(&g.members().collect::<Vec<_>>()))
            .collect(),
        CoarseUnit::Layer => {
            let mut per_layer: BTreeMap<usize, Vec<&Slice>> = BTreeMap::new();
            for g in groups {
                per_layer.entry(g.layer).or_default().extend(g.members());
            }
            let scores: BTreeMap<usize, f64> = per_layer
                .into_iter()
                .map(|(l, s)| Ok((l, mean_sq(&s)?)))
                .collect::<Result<_>>()?;
            Ok(groups.iter().map(|g| scores[&g.layer]).collect())
        }
    }
}

fn check_samples(acc: &GradAccumulator) -> Result<()> {
    if acc.sample_count() == 0 {
        return Err(Error::Input("accumulator holds no samples".into()));
    }
    Ok(())
}

/// Fine, coarse and Fisher values for one estimation run.
#[derive(Clone, Debug)]
pub struct ImportanceTable {
    /// `fine[g][c]`: channel `c` of group `g`.
    pub fine: Vec<Vec<f64>>,
    pub coarse: Vec<f64>,
    pub fisher_diag: BTreeMap<String, Tensor>,
}

impl ImportanceTable {
    pub fn estimate(acc: &GradAccumulator, groups: &[DependencyGroup], unit: CoarseUnit) -> Result<Self> {
        Ok(ImportanceTable {
            fine: fine_importance(acc, groups)?,
            coarse: coarse_importance(acc, groups, unit)?,
            fisher_diag: acc.fisher_diag(),
        })
    }
}

/// Diagonal quadratic form `(1 − m)ᵀ diag(F) (1 − m)`: the summed Fisher of
/// every pruned weight. Parameters absent from `mask` count as kept.
pub fn taylor_objective(mask: &BTreeMap<String, Tensor>, fisher: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut total = 0.0;
    for (name, m) in mask {
        if let Some(bad) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("mask for {name} holds non-binary value {bad}")));
        }
        let f = fisher
            .get(name)
            .ok_or_else(|| Error::Input(format!("no Fisher values for {name}")))?;
        if f.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "{name}: mask {:?} vs Fisher {:?}",
                m.shape(),
                f.shape()
            )));
        }
        total += m
            .data()
            .iter()
            .zip(f.data())
            .filter(|(&mv, _)| mv == 0.0)
            .map(|(_, &fv)| fv)
            .sum::<f64>();
    }
    Ok(total)
}
