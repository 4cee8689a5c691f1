use std::collections::{BTreeMap, BTreeSet};

use hybrid_prune::grouping::{discover_groups, WeightedDigraph};
use hybrid_prune::model::{DecoderModel, ModelConfig};
use hybrid_prune::pruning::{apply, make_plan, zero_masked, PlanOptions};
use proptest::prelude::*;

/// Brute force: sum of weight products over simple paths of at most `max_len` edges.
fn dfs_paths(g: &WeightedDigraph, at: usize, to: usize, left: usize, prod: f64, seen: &mut Vec<bool>) -> f64 {
    if at == to {
        return prod;
    }
    if left == 0 {
        return 0.0;
    }
    seen[at] = true;
    let mut total = 0.0;
    for arc in g.successors(at) {
        if !seen[arc.to] {
            total += dfs_paths(g, arc.to, to, left - 1, prod * arc.weight, seen);
        }
    }
    seen[at] = false;
    total
}

fn dag() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
    (2usize..9).prop_flat_map(|n| {
        let edge = (0..n, 0..n, -2.0f64..2.0).prop_filter_map("forward edges only", |(a, b, w)| {
            (a < b).then_some((a, b, w))
        });
        (Just(n), prop::collection::vec(edge, 0..20))
    })
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..7, any::<u64>()).prop_map(|(layers, heads, hd, ff, seed)| {
        ModelConfig::new(12, heads * hd, layers, heads, ff, 6, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn connect_matches_path_enumeration((n, edges) in dag(), max_len in 1usize..7) {
        let mut g = WeightedDigraph::with_nodes(n);
        let mut seen_pairs = BTreeSet::new();
        for &(a, b, w) in &edges {
            // parallel edges would make the direct rule ambiguous against the oracle
            if seen_pairs.insert((a, b)) {
                g.add_edge(a, b, w, false);
            }
        }
        prop_assert!(g.is_acyclic());
        for from in 0..n {
            for to in 0..n {
                if from == to {
                    continue;
                }
                let got = g.connect(from, to, max_len).unwrap();
                let direct = g.successors(from).iter().find(|a| a.to == to).map(|a| a.weight);
                let want = match direct {
                    Some(w) => w,
                    None => dfs_paths(&g, from, to, max_len, 1.0, &mut vec![false; n]),
                };
                prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{from}->{to}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn groups_partition_every_prunable_slice(cfg in small_config()) {
        let model = DecoderModel::init(&cfg).unwrap();
        let groups = discover_groups(&model).unwrap();
        prop_assert_eq!(groups.len(), cfg.n_layers * (cfg.n_heads + cfg.d_ff));
        let ids: BTreeSet<usize> = groups.iter().map(|g| g.id).collect();
        prop_assert_eq!(ids.len(), groups.len());

        let mut seen = BTreeSet::new();
        for g in &groups {
            for s in g.members() {
                prop_assert!(seen.insert((s.param.clone(), s.axis, s.index)), "slice in two groups");
            }
        }
        // every prunable column/row of every block matrix is covered once
        let per_layer = 3 * cfg.n_heads * cfg.head_dim + cfg.n_heads * cfg.head_dim + 3 * cfg.d_ff;
        prop_assert_eq!(seen.len(), cfg.n_layers * per_layer);
    }

    #[test]
    fn removing_one_group_equals_zeroing_it(cfg in small_config(), pick in any::<prop::sample::Index>()) {
        let model = DecoderModel::init(&cfg).unwrap();
        let groups = discover_groups(&model).unwrap();
        let victim = groups[pick.index(groups.len())].id;
        let scores: BTreeMap<usize, f64> = groups.iter().map(|g| (g.id, if g.id == victim { -1.0 } else { g.id as f64 })).collect();
        let plan = make_plan(&scores, &groups, &PlanOptions::new(1e-9, BTreeSet::new())).unwrap();
        prop_assert_eq!(plan.group_ids(), vec![victim]);

        let (pruned, mask) = apply(&model, &plan).unwrap();
        pruned.check_shapes().unwrap();
        prop_assert_eq!(model.param_count() - pruned.param_count(), groups.iter().find(|g| g.id == victim).unwrap().param_count());

        let tokens = [1usize, 4, 7, 2, 9];
        let a = pruned.forward(&tokens).unwrap();
        let b = zero_masked(&model, &mask).unwrap().forward(&tokens).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }
}
