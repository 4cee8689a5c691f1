//! Training-free attention fusion of fine and coarse importance.
//!
//! Each channel gets a blend factor `α` from fixed random projections of
//! gradient statistics: queries come from the channel's own (fine) features,
//! keys and values from its owning group's (coarse) features. The fused score
//! is `α·fine + (1 − α)·coarse`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::grouping::{DependencyGroup, GroupKind, Slice};
use crate::importance::{GradAccumulator, ImportanceTable};
use crate::resources::{measure, ResourceUsage};
use crate::tensor::Tensor;

/// Number of gradient statistics per feature vector.
pub const FEATURE_DIM: usize = 5;
pub const DEFAULT_FUSION_DIM: usize = 32;

/// Fixed query/key/value projections. Never updated after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionProjections {
    /// `[d_f, d_model]`
    pub wq: Tensor,
    /// `[d_c, d_model]`
    pub wk: Tensor,
    /// `[d_c, d_model]`
    pub wv: Tensor,
    pub d_model: usize,
    pub seed: u64,
}

impl FusionProjections {
    /// Little-endian bytes of all three matrices, for identity checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        [&self.wq, &self.wk, &self.wv]
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Entries drawn i.i.d. from N(0, 1/d_model).
pub fn init_projections(d_f: usize, d_c: usize, d_model: usize, seed: u64) -> Result<FusionProjections> {
    if d_f == 0 || d_c == 0 || d_model == 0 {
        return Err(Error::Config("fusion dimensions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d_model as f64).sqrt();
    Ok(FusionProjections {
        wq: Tensor::randn(&[d_f, d_model], std, &mut rng),
        wk: Tensor::randn(&[d_c, d_model], std, &mut rng),
        wv: Tensor::randn(&[d_c, d_model], std, &mut rng),
        d_model,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `α_i = logistic(Q_i·K_i / √d_model)`.
    TwoWay,
    /// Row-softmax of `QKᵀ/√d_model` averaged along each row. Every `α_i`
    /// comes out as `1/n`; kept to pin down that reading.
    LiteralAttention,
    /// The same `α` for every channel.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub alpha: Vec<f64>,
    pub fused: Vec<f64>,
    pub mode: FusionMode,
    /// `A·V` in literal mode; absent otherwise.
    pub interaction: Option<Tensor>,
}

/// Raw statistics of accumulated gradients and per-weight Fisher values:
/// `[mean, mean |g|, max |g|, L2, mean Fisher]`.
pub fn raw_stats(grad_sums: &[f64], fisher: &[f64]) -> [f64; FEATURE_DIM] {
    if grad_sums.is_empty() {
        return [0.0; FEATURE_DIM];
    }
    let n = grad_sums.len() as f64;
    let mean = grad_sums.iter().sum::<f64>() / n;
    let mean_abs = grad_sums.iter().map(|v| v.abs()).sum::<f64>() / n;
    let max_abs = grad_sums.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2 = grad_sums.iter().map(|v| v * v).sum::<f64>().sqrt();
    let fisher_mean = if fisher.is_empty() {
        0.0
    } else {
        fisher.iter().sum::<f64>() / fisher.len() as f64
    };
    [mean, mean_abs, max_abs, l2, fisher_mean]
}

/// In-place z-score of a vector; a constant vector becomes all zeros.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 0.0 && sd.is_finite() { (*v - mean) / sd } else { 0.0 };
    }
}

/// Standardizes each column of an `[n, d]` matrix across its rows.
pub fn standardize_columns(m: &mut Tensor) -> Result<()> {
    if m.shape().len() != 2 {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", m.shape())));
    }
    let (n, d) = (m.rows(), m.cols());
    let mut col = vec![0.0; n];
    for j in 0..d {
        for (i, c) in col.iter_mut().enumerate() {
            *c = m.data()[i * d + j];
        }
        standardize(&mut col);
        for (i, c) in col.iter().enumerate() {
            m.data_mut()[i * d + j] = *c;
        }
    }
    Ok(())
}

/// Standardized fine and coarse features, one row per channel, for a batch
/// of channels. Each entry pairs a channel's own slices with the slices of
/// its owning group.
pub fn features(acc: &GradAccumulator, channels: &[(&[Slice], Vec<&Slice>)]) -> Result<(Tensor, Tensor)> {
    let n = channels.len();
    let mut fine = Vec::with_capacity(n * FEATURE_DIM);
    let mut coarse = Vec::with_capacity(n * FEATURE_DIM);
    for (own, group) in channels {
        let own: Vec<&Slice> = own.iter().collect();
        fine.extend(raw_stats(&acc.slice_sums(&own)?, &acc.slice_fisher(&own)?));
        coarse.extend(raw_stats(&acc.slice_sums(group)?, &acc.slice_fisher(group)?));
    }
    let mut fine = Tensor::new(vec![n, FEATURE_DIM], fine)?;
    let mut coarse = Tensor::new(vec![n, FEATURE_DIM], coarse)?;
    standardize_columns(&mut fine)?;
    standardize_columns(&mut coarse)?;
    Ok((fine, coarse))
}

/// Blends fine and coarse scores channel by channel.
pub fn fuse(
    fine: &[f64],
    coarse: &[f64],
    fine_feats: &Tensor,
    coarse_feats: &Tensor,
    proj: &FusionProjections,
    mode: FusionMode,
) -> Result<FusionResult> {
    let n = fine.len();
    if n == 0 {
        return Err(Error::Input("fusion needs at least one channel".into()));
    }
    if coarse.len() != n {
        return Err(Error::Input(format!(
            "fine has {n} scores, coarse has {}",
            coarse.len()
        )));
    }
    for (what, f, w) in [("fine", fine_feats, &proj.wq), ("coarse", coarse_feats, &proj.wk)] {
        if f.shape() != [n, w.rows()] {
            return Err(Error::Input(format!(
                "{what} features {:?}, expected [{n}, {}]",
                f.shape(),
                w.rows()
            )));
        }
    }
    let scale = (proj.d_model as f64).sqrt();
    let (alpha, interaction) = match mode {
        FusionMode::Fixed(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")));
            }
            (vec![a; n], None)
        }
        FusionMode::TwoWay => {
            let q = fine_feats.matmul(&proj.wq)?;
            let k = coarse_feats.matmul(&proj.wk)?;
            let alpha = (0..n)
                .map(|i| {
                    let s: f64 = q.row(i).iter().zip(k.row(i)).map(|(a, b)| a * b).sum();
                    sigmoid(s / scale)
                })
                .collect();
            (alpha, None)
        }
        FusionMode::LiteralAttention => {
            let q = fine_feats.matmul(&proj.wq)?;
            let k = coarse_feats.matmul(&proj.wk)?;
            let v = coarse_feats.matmul(&proj.wv)?;
            let a = q.matmul(&k.transpose()?)?.map(|x| x / scale).softmax(1)?;
            let alpha = (0..n).map(|i| a.row(i).iter().sum::<f64>() / n as f64).collect();
            (alpha, Some(a.matmul(&v)?))
        }
    };
    let fused = alpha
        .iter()
        .zip(fine.iter().zip(coarse))
        .map(|(&a, (&f, &c))| a * f + (1.0 - a) * c)
        .collect();
    Ok(FusionResult {
        alpha,
        fused,
        mode,
        interaction,
    })
}

/// One channel's row in the fusion report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelRecord {
    pub layer: usize,
    pub kind: GroupKind,
    pub channel: usize,
    pub alpha: f64,
    pub fine: f64,
    pub coarse: f64,
    pub fused: f64,
}

/// Fused scores for every unprotected group plus per-family measurements.
#[derive(Clone, Debug)]
pub struct FusionOutcome {
    pub records: Vec<ChannelRecord>,
    /// Group id → mean fused score of its channels.
    pub group_scores: BTreeMap<usize, f64>,
    /// One entry per fuse call: (layer, kind, usage).
    pub resources: Vec<(usize, GroupKind, ResourceUsage)>,
}

/// Scores every group outside `protected`.
///
/// Fine scores are z-scored across channels and coarse scores across groups,
/// separately per group kind, pooled over all unprotected layers. Fusion then
/// runs once per (layer, kind) family.
pub fn fuse_groups(
    acc: &GradAccumulator,
    groups: &[DependencyGroup],
    table: &ImportanceTable,
    proj: &FusionProjections,
    mode: FusionMode,
    protected: &BTreeSet<usize>,
) -> Result<FusionOutcome> {
    if table.fine.len() != groups.len() || table.coarse.len() != groups.len() {
        return Err(Error::Input("importance table does not match the group list".into()));
    }
    let active: Vec<usize> = (0..groups.len())
        .filter(|&g| !protected.contains(&groups[g].layer))
        .collect();

    let mut fine_z: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut coarse_z: BTreeMap<usize, f64> = BTreeMap::new();
    for kind in [GroupKind::AttentionHead, GroupKind::MlpChannel] {
        let of_kind: Vec<usize> = active.iter().copied().filter(|&g| groups[g].kind == kind).collect();
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for &g in &of_kind {
            for (c, &v) in table.fine[g].iter().enumerate() {
                keys.push((g, c));
                vals.push(v);
            }
        }
        standardize(&mut vals);
        fine_z.extend(keys.into_iter().zip(vals));
        let mut cvals: Vec<f64> = of_kind.iter().map(|&g| table.coarse[g]).collect();
        standardize(&mut cvals);
        coarse_z.extend(of_kind.iter().copied().zip(cvals));
    }

    let mut families: BTreeMap<(usize, GroupKind), Vec<usize>> = BTreeMap::new();
    for &g in &active {
        families.entry((groups[g].layer, groups[g].kind)).or_default().push(g);
    }

    let mut outcome = FusionOutcome {
        records: Vec::new(),
        group_scores: BTreeMap::new(),
        resources: Vec::new(),
    };
    for ((layer, kind), members) in families {
        let mut batch: Vec<(&[Slice], Vec<&Slice>)> = Vec::new();
        let mut fine = Vec::new();
        let mut coarse = Vec::new();
        let mut owners = Vec::new();
        for &g in &members {
            let group_slices: Vec<&Slice> = groups[g].members().collect();
            for (c, ch) in groups[g].channels.iter().enumerate() {
                batch.push((&ch.members, group_slices.clone()));
                fine.push(fine_z[&(g, c)]);
                coarse.push(coarse_z[&g]);
                owners.push((g, ch.index));
            }
        }
        let (ff, cf) = features(acc, &batch)?;
        let (result, usage) = measure(|| fuse(&fine, &coarse, &ff, &cf, proj, mode));
        let result = result?;
        outcome.resources.push((layer, kind, usage));

        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (i, &(g, channel)) in owners.iter().enumerate() {
            let e = sums.entry(g).or_insert((0.0, 0));
            e.0 += result.fused[i];
            e.1 += 1;
            outcome.records.push(ChannelRecord {
                layer,
                kind,
                channel,
                alpha: result.alpha[i],
                fine: fine[i],
                coarse: coarse[i],
                fused: result.fused[i],
            });
        }
        for (g, (s, n)) in sums {
            outcome.group_scores.insert(groups[g].id, s / n as f64);
        }
    }
    Ok(outcome)
}

/// CSV with columns (layer, group-kind, channel, alpha, fine, coarse, fused).
pub fn write_fusion_csv(path: &Path, header: &ArtifactHeader, records: &[ChannelRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.csv_comment())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["layer", "group-kind", "channel", "alpha", "fine", "coarse", "fused"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.layer.to_string(),
            r.kind.label().to_string(),
            r.channel.to_string(),
            r.alpha.to_string(),
            r.fine.to_string(),
            r.coarse.to_string(),
            r.fused.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
