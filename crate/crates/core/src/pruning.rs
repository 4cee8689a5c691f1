//! Global ranking of scored groups, the resulting mask, and physical removal.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};
use crate::fusion::csv_err;
use crate::grouping::{Axis, DependencyGroup, GroupKind};
use crate::model::DecoderModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Fraction of prunable parameters to remove, in `[0, 1)`.
    pub target_ratio: f64,
    pub protected_layers: BTreeSet<usize>,
    /// Apply the ratio inside every layer instead of one global pool.
    #[serde(default)]
    pub uniform_per_layer: bool,
}

impl PlanOptions {
    pub fn new(target_ratio: f64, protected_layers: BTreeSet<usize>) -> Self {
        PlanOptions {
            target_ratio,
            protected_layers,
            uniform_per_layer: false,
        }
    }
}

/// First and last block, or nothing when there are fewer than three blocks.
pub fn default_protected_layers(n_layers: usize) -> BTreeSet<usize> {
    if n_layers < 3 {
        BTreeSet::new()
    } else {
        BTreeSet::from([0, n_layers - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub score: f64,
    pub params: usize,
    pub group: DependencyGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Ascending by (score, layer, kind, index).
    pub removals: Vec<Removal>,
    pub target_ratio: f64,
    /// Removed fraction of prunable parameters.
    pub achieved_ratio: f64,
    pub protected_layers: BTreeSet<usize>,
    pub prunable_params: usize,
    pub removed_params: usize,
    /// Largest single group's share of the prunable pool.
    pub max_group_share: f64,
}

impl PruningPlan {
    pub fn group_ids(&self) -> Vec<usize> {
        self.removals.iter().map(|r| r.group.id).collect()
    }
}

fn rank_key(score: f64, g: &DependencyGroup) -> (f64, usize, GroupKind, usize) {
    (score, g.layer, g.kind, g.index)
}

fn cmp_ranked(a: &(f64, usize, GroupKind, usize), b: &(f64, usize, GroupKind, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

/// Selects the lowest-scored groups until the removed share of prunable
/// parameters first reaches the target.
pub fn make_plan(scores: &BTreeMap<usize, f64>, groups: &[DependencyGroup], opts: &PlanOptions) -> Result<PruningPlan> {
    let t = opts.target_ratio;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Infeasible(format!("target ratio {t} outside [0, 1)")));
    }
    let pool: Vec<&DependencyGroup> = groups
        .iter()
        .filter(|g| !opts.protected_layers.contains(&g.layer))
        .collect();
    let prunable: usize = pool.iter().map(|g| g.param_count()).sum();
    if t > 0.0 && prunable == 0 {
        return Err(Error::Infeasible(
            "every prunable structure sits in a protected layer".into(),
        ));
    }
    let mut ranked = Vec::with_capacity(pool.len());
    for g in pool {
        let s = *scores
            .get(&g.id)
            .ok_or_else(|| Error::Input(format!("no score for group {}", g.id)))?;
        if !s.is_finite() {
            return Err(Error::Input(format!("group {} has non-finite score {s}", g.id)));
        }
        ranked.push((s, g));
    }
    ranked.sort_by(|a, b| cmp_ranked(&rank_key(a.0, a.1), &rank_key(b.0, b.1)));

    let select = |items: &[(f64, &DependencyGroup)], budget: usize| -> Vec<Removal> {
        let mut removed = 0usize;
        let mut out = Vec::new();
        for &(score, g) in items {
            if removed as f64 >= t * budget as f64 {
                break;
            }
            removed += g.param_count();
            out.push(Removal {
                score,
                params: g.param_count(),
                group: g.clone(),
            });
        }
        out
    };
    let mut removals = if opts.uniform_per_layer {
        let mut by_layer: BTreeMap<usize, Vec<(f64, &DependencyGroup)>> = BTreeMap::new();
        for &(s, g) in &ranked {
            by_layer.entry(g.layer).or_default().push((s, g));
        }
        by_layer
            .values()
            .flat_map(|items| select(items, items.iter().map(|(_, g)| g.param_count()).sum()))
            .collect()
    } else {
        select(&ranked, prunable)
    };
    removals.sort_by(|a, b| cmp_ranked(&rank_key(a.score, &a.group), &rank_key(b.score, &b.group)));

    let removed: usize = removals.iter().map(|r| r.params).sum();
    let max_group = ranked.iter().map(|(_, g)| g.param_count()).max().unwrap_or(0);
    let share = |n: usize| if prunable == 0 { 0.0 } else { n as f64 / prunable as f64 };
    Ok(PruningPlan {
        removals,
        target_ratio: t,
        achieved_ratio: share(removed),
        protected_layers: opts.protected_layers.clone(),
        prunable_params: prunable,
        removed_params: removed,
        max_group_share: share(max_group),
    })
}

/// Record of one pruning decision against the pre-prune shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub pre_shapes: BTreeMap<String, Vec<usize>>,
    pub pruned_groups: Vec<DependencyGroup>,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    /// Removed fraction of the whole model's parameters.
    pub whole_model_ratio: f64,
}

impl Mask {
    /// The keep-all mask of `model`.
    pub fn keep_all(model: &DecoderModel) -> Self {
        Mask {
            pre_shapes: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
            pruned_groups: Vec::new(),
            target_ratio: 0.0,
            achieved_ratio: 0.0,
            whole_model_ratio: 0.0,
        }
    }

    /// Binary keep-indicator per parameter: 1 keep, 0 prune.
    pub fn indicators(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .pre_shapes
            .iter()
            .map(|(n, s)| (n.clone(), Tensor::ones(s)))
            .collect();
        for g in &self.pruned_groups {
            for s in g.members() {
                if let Some(t) = out.get_mut(&s.param) {
                    for o in s.offsets() {
                        t.data_mut()[o] = 0.0;
                    }
                }
            }
        }
        out
    }

    pub fn removed_params(&self) -> usize {
        self.pruned_groups.iter().map(DependencyGroup::param_count).sum()
    }

    pub fn save(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            header: &'a ArtifactHeader,
            #[serde(flatten)]
            mask: &'a Mask,
        }
        std::fs::write(path, serde_json::to_vec_pretty(&File { header, mask: self })?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Mask, ArtifactHeader)> {
        #[derive(Deserialize)]
        struct File {
            header: ArtifactHeader,
            #[serde(flatten)]
            mask: Mask,
        }
        let f: File = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok((f.mask, f.header))
    }
}

/// Physically deletes every slice in the plan and returns the new model.
pub fn apply(model: &DecoderModel, plan: &PruningPlan) -> Result<(DecoderModel, Mask)> {
    if model.has_adapters() {
        return Err(Error::Contract("prune before attaching adapters, or merge them first".into()));
    }
    let pre_shapes: BTreeMap<String, Vec<usize>> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();

    let mut drop: BTreeMap<(String, Axis), BTreeSet<usize>> = BTreeMap::new();
    for r in &plan.removals {
        for s in r.group.members() {
            let current = pre_shapes
                .get(&s.param)
                .ok_or_else(|| Error::Structural(format!("plan names unknown parameter {}", s.param)))?;
            if current[..] != s.shape[..] {
                return Err(Error::Structural(format!(
                    "stale plan: {} is {:?} but the plan expects {:?}",
                    s.param, current, s.shape
                )));
            }
            if !drop.entry((s.param.clone(), s.axis)).or_default().insert(s.index) {
                return Err(Error::Structural(format!(
                    "plan removes {} {:?} {} twice",
                    s.param, s.axis, s.index
                )));
            }
        }
    }

    let mut pruned = model.clone();
    for ((name, axis), gone) in &drop {
        let t = pruned.param_mut(name).expect("checked above");
        let extent = match axis {
            Axis::Row => t.rows(),
            Axis::Col => t.cols(),
        };
        let keep: Vec<usize> = (0..extent).filter(|i| !gone.contains(i)).collect();
        *t = match axis {
            Axis::Row => t.select_rows(&keep)?,
            Axis::Col => t.select_columns(&keep)?,
        };
    }
    pruned.check_shapes()?;

    let before = model.param_count();
    let after = pruned.param_count();
    if before - after != plan.removed_params {
        return Err(Error::Structural(format!(
            "removed {} parameters, plan accounts for {}",
            before - after,
            plan.removed_params
        )));
    }
    let mask = Mask {
        pre_shapes,
        pruned_groups: plan.removals.iter().map(|r| r.group.clone()).collect(),
        target_ratio: plan.target_ratio,
        achieved_ratio: plan.achieved_ratio,
        whole_model_ratio: plan.removed_params as f64 / before as f64,
    };
    Ok((pruned, mask))
}

/// Zeroes every weight the mask prunes, keeping shapes dense.
pub fn zero_masked(model: &DecoderModel, mask: &Mask) -> Result<DecoderModel> {
    let mut out = model.clone();
    for (name, m) in mask.indicators() {
        let t = out
            .param_mut(&name)
            .ok_or_else(|| Error::Structural(format!("mask names unknown parameter {name}")))?;
        *t = t.zip_with(&m, |w, k| w * k)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub layer: usize,
    /// Block parameters before pruning, norms included.
    pub dense_params: usize,
    pub retained_params: usize,
    pub dense_prunable: usize,
    pub retained_prunable: usize,
}

/// Retained parameters per decoder block, cross-checked against `model`.
pub fn allocation_report(mask: &Mask, model: &DecoderModel) -> Result<Vec<LayerAllocation>> {
    let n_layers = model.blocks.len();
    let mut dense = vec![0usize; n_layers];
    let mut prunable = vec![0usize; n_layers];
    for (name, shape) in &mask.pre_shapes {
        let Some(layer) = name
            .strip_prefix("layers.")
            .and_then(|r| r.split_once('.'))
            .and_then(|(l, _)| l.parse::<usize>().ok())
        else {
            continue;
        };
        if layer >= n_layers {
            return Err(Error::Structural(format!("mask refers to missing layer {layer}")));
        }
        let n: usize = shape.iter().product();
        dense[layer] += n;
        if shape.len() == 2 {
            prunable[layer] += n;
        }
    }
    let mut removed = vec![0usize; n_layers];
    for g in &mask.pruned_groups {
        removed[g.layer] += g.param_count();
    }
    (0..n_layers)
        .map(|l| {
            let retained = dense[l] - removed[l];
            let actual = model.blocks[l].param_count();
            if actual != retained {
                return Err(Error::Structural(format!(
                    "layer {l}: model holds {actual} parameters, mask implies {retained}"
                )));
            }
            Ok(LayerAllocation {
                layer: l,
                dense_params: dense[l],
                retained_params: retained,
                dense_prunable: prunable[l],
                retained_prunable: prunable[l] - removed[l],
            })
        })
        .collect()
}

/// CSV with columns (layer, dense_params, retained_params).
pub fn write_allocation_csv(path: &Path, header: &ArtifactHeader, rows: &[LayerAllocation]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.csv_comment())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["layer", "dense_params", "retained_params"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.layer.to_string(), r.dense_params.to_string(), r.retained_params.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::discover_groups;
    use crate::model::ModelConfig;

    fn setup() -> (DecoderModel, Vec<DependencyGroup>) {
        let m = DecoderModel::init(&ModelConfig::new(16, 8, 3, 2, 6, 8, 2).unwrap()).unwrap();
        let g = discover_groups(&m).unwrap();
        (m, g)
    }

    fn scores_by_id(groups: &[DependencyGroup]) -> BTreeMap<usize, f64> {
        groups.iter().map(|g| (g.id, ((g.id * 37) % 101) as f64)).collect()
    }

    #[test]
    fn zero_target_is_empty_and_identity() {
        let (m, groups) = setup();
        let plan = make_plan(&scores_by_id(&groups), &groups, &PlanOptions::new(0.0, BTreeSet::new())).unwrap();
        assert!(plan.removals.is_empty());
        assert_eq!(plan.achieved_ratio, 0.0);
        let (p, mask) = apply(&m, &plan).unwrap();
        assert_eq!(p, m);
        assert!(mask.indicators().values().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn equal_sized_groups_take_lowest_half() {
        let m = DecoderModel::init(&ModelConfig::new(16, 8, 2, 2, 10, 8, 2).unwrap()).unwrap();
        let groups: Vec<DependencyGroup> = discover_groups(&m)
            .unwrap()
            .into_iter()
            .filter(|g| g.kind == GroupKind::MlpChannel)
            .collect();
        assert_eq!(groups.len(), 20);
        let scores: BTreeMap<usize, f64> = groups.iter().enumerate().map(|(i, g)| (g.id, (19 - i) as f64)).collect();
        let plan = make_plan(&scores, &groups, &PlanOptions::new(0.5, BTreeSet::new())).unwrap();
        let chosen: BTreeSet<usize> = plan.group_ids().into_iter().collect();
        let want: BTreeSet<usize> = groups[10..].iter().map(|g| g.id).collect();
        assert_eq!(chosen, want);
        assert_eq!(plan.achieved_ratio, 0.5);
    }

    #[test]
    fn ratio_bounds_and_monotone_selection() {
        let (m, groups) = setup();
        let scores = scores_by_id(&groups);
        for t in [0.05, 0.1, 0.2, 0.5, 0.9] {
            let opts = PlanOptions::new(t, BTreeSet::from([0]));
            let plan = make_plan(&scores, &groups, &opts).unwrap();
            assert!(plan.achieved_ratio >= t && plan.achieved_ratio < t + plan.max_group_share);
            assert!(plan.removals.iter().all(|r| r.group.layer != 0));
            let worst_pruned = plan.removals.iter().map(|r| r.score).fold(f64::MIN, f64::max);
            let chosen: BTreeSet<usize> = plan.group_ids().into_iter().collect();
            for g in groups.iter().filter(|g| g.layer != 0 && !chosen.contains(&g.id)) {
                assert!(scores[&g.id] >= worst_pruned);
            }
            let (p, _) = apply(&m, &plan).unwrap();
            assert_eq!(m.param_count() - p.param_count(), plan.removed_params);
            p.forward(&[1, 2, 3]).unwrap();
        }
    }

    #[test]
    fn infeasible_requests() {
        let (_, groups) = setup();
        let scores = scores_by_id(&groups);
        assert!(matches!(
            make_plan(&scores, &groups, &PlanOptions::new(0.2, BTreeSet::from([0, 1, 2]))),
            Err(Error::Infeasible(_))
        ));
        assert!(make_plan(&scores, &groups, &PlanOptions::new(1.0, BTreeSet::new())).is_err());
        assert!(make_plan(&scores, &groups, &PlanOptions::new(-0.1, BTreeSet::new())).is_err());
        assert!(make_plan(&scores, &groups, &PlanOptions::new(0.0, BTreeSet::from([0, 1, 2]))).is_ok());
    }

    #[test]
    fn single_mlp_group_shrinks_only_its_matrices() {
        let (m, groups) = setup();
        let g = groups
            .iter()
            .find(|g| g.layer == 2 && g.kind == GroupKind::MlpChannel && g.index == 3)
            .unwrap();
        let mut scores: BTreeMap<usize, f64> = groups.iter().map(|x| (x.id, 10.0)).collect();
        scores.insert(g.id, 0.0);
        let pool: Vec<DependencyGroup> = groups.iter().filter(|x| x.layer == 2).cloned().collect();
        let plan = make_plan(&scores, &pool, &PlanOptions::new(1e-9, BTreeSet::new())).unwrap();
        assert_eq!(plan.group_ids(), vec![g.id]);
        let (p, _) = apply(&m, &plan).unwrap();
        for (name, t) in m.named_params() {
            let after = p.param(&name).unwrap();
            match name.as_str() {
                "layers.2.wgate" | "layers.2.wup" => assert_eq!(after.shape(), &[8, 5]),
                "layers.2.wdown" => assert_eq!(after.shape(), &[5, 8]),
                _ => assert_eq!(after, t),
            }
        }
    }

    #[test]
    fn mask_and_shrink_agree() {
        let (m, groups) = setup();
        let plan = make_plan(&scores_by_id(&groups), &groups, &PlanOptions::new(0.4, BTreeSet::new())).unwrap();
        let (p, mask) = apply(&m, &plan).unwrap();
        let z = zero_masked(&m, &mask).unwrap();
        let toks = [3, 1, 4, 1, 5, 9, 2, 6];
        assert!(p.forward(&toks).unwrap().max_abs_diff(&z.forward(&toks).unwrap()) <= 1e-10);
    }

    #[test]
    fn stale_plan_is_structural_error() {
        let (m, groups) = setup();
        let plan = make_plan(&scores_by_id(&groups), &groups, &PlanOptions::new(0.3, BTreeSet::new())).unwrap();
        let (p, _) = apply(&m, &plan).unwrap();
        assert!(matches!(apply(&p, &plan), Err(Error::Structural(_))));
    }

    #[test]
    fn allocation_rows() {
        let (m, groups) = setup();
        let empty = make_plan(&BTreeMap::new(), &groups, &PlanOptions::new(0.0, BTreeSet::from([0, 1, 2]))).unwrap();
        let (_, mask) = apply(&m, &empty).unwrap();
        let rows = allocation_report(&mask, &m).unwrap();
        for (l, r) in rows.iter().enumerate() {
            assert_eq!(r.dense_params, m.blocks[l].param_count());
            assert_eq!(r.retained_params, r.dense_params);
        }

        // all of layer 1
        let scores: BTreeMap<usize, f64> = groups.iter().map(|g| (g.id, if g.layer == 1 { 0.0 } else { 1.0 })).collect();
        let pool: Vec<DependencyGroup> = groups.iter().filter(|g| g.layer == 1).cloned().collect();
        let plan = make_plan(&scores, &pool, &PlanOptions::new(0.999, BTreeSet::new())).unwrap();
        let (p, mask) = apply(&m, &plan).unwrap();
        let rows = allocation_report(&mask, &p).unwrap();
        assert_eq!(rows[1].retained_prunable, 0);
        assert_eq!(rows[1].retained_params, 16);
        p.forward(&[1, 2]).unwrap();
        assert!(allocation_report(&mask, &m).is_err());
    }

    #[test]
    fn uniform_per_layer_hits_every_layer() {
        let (_, groups) = setup();
        let scores: BTreeMap<usize, f64> = groups.iter().map(|g| (g.id, g.layer as f64)).collect();
        let mut opts = PlanOptions::new(0.3, BTreeSet::new());
        let global = make_plan(&scores, &groups, &opts).unwrap();
        assert!(global.removals.iter().all(|r| r.group.layer == 0));
        opts.uniform_per_layer = true;
        let uniform = make_plan(&scores, &groups, &opts).unwrap();
        let layers: BTreeSet<usize> = uniform.removals.iter().map(|r| r.group.layer).collect();
        assert_eq!(layers.len(), 3);
        assert!(uniform.achieved_ratio >= 0.3);
    }

    #[test]
    fn mask_round_trips() {
        let (m, groups) = setup();
        let plan = make_plan(&scores_by_id(&groups), &groups, &PlanOptions::new(0.2, BTreeSet::new())).unwrap();
        let (_, mask) = apply(&m, &plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.json");
        let header = ArtifactHeader::new(&"x", 1);
        mask.save(&path, &header).unwrap();
        assert_eq!(Mask::load(&path).unwrap(), (mask, header));
    }
}
