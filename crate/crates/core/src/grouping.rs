//! Channel-level connectivity graph and coupled dependency groups.
//!
//! Nodes are channels (one feature of one activation site); edges carry the
//! weight of the matrix entry that connects them. Edges produced by
//! elementwise operations (residual adds, the gating product, and the
//! per-head reshape of attention) are tagged *coupled*: channels joined by
//! coupled edges must be removed together. Connected components of the
//! coupled subgraph, restricted to prunable sites, are the dependency groups.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};
use crate::model::{param_name, DecoderModel, Role};

/// Default cap on path length for [`ChannelGraph::connect`].
pub const DEFAULT_MAX_PATH_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Token,
    /// Residual stream entering block `layer` (`layer == n_layers` is the final stream).
    Residual,
    /// Residual stream after the attention add.
    ResidualMid,
    Query,
    Key,
    Value,
    /// Attention output, input to `wo`.
    Context,
    Gate,
    Up,
    /// Gated product, input to `wdown`.
    Hidden,
    Logit,
}

impl Site {
    pub fn is_prunable(self) -> bool {
        matches!(
            self,
            Site::Query | Site::Key | Site::Value | Site::Context | Site::Gate | Site::Up | Site::Hidden
        )
    }

    /// The matrix slice a channel at this site owns, if any.
    fn slice_role(self) -> Option<(Role, Axis)> {
        match self {
            Site::Query => Some((Role::Wq, Axis::Col)),
            Site::Key => Some((Role::Wk, Axis::Col)),
            Site::Value => Some((Role::Wv, Axis::Col)),
            Site::Context => Some((Role::Wo, Axis::Row)),
            Site::Gate => Some((Role::Wgate, Axis::Col)),
            Site::Up => Some((Role::Wup, Axis::Col)),
            Site::Hidden => Some((Role::Wdown, Axis::Row)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: usize,
    pub site: Site,
    pub index: usize,
}

impl ChannelId {
    pub fn new(layer: usize, site: Site, index: usize) -> Self {
        ChannelId { layer, site, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub to: usize,
    pub weight: f64,
    pub coupled: bool,
}

/// A weighted directed graph over dense node indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedDigraph {
    out: Vec<Vec<Arc>>,
}

impl WeightedDigraph {
    pub fn with_nodes(n: usize) -> Self {
        WeightedDigraph {
            out: vec![Vec::new(); n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.out.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn add_edge(&mut self, from: usize, to: usize, weight: f64, coupled: bool) {
        self.out[from].push(Arc {
            to,
            weight,
            coupled,
        });
    }

    pub fn successors(&self, node: usize) -> &[Arc] {
        &self.out[node]
    }

    /// Connection strength from `from` to `to`.
    ///
    /// A direct edge yields its weight. Otherwise the result is the sum, over
    /// all directed paths of at most `max_path_len` edges, of the product of
    /// edge weights along the path; 0 when no such path exists. Paths are
    /// counted as walks, which coincide on acyclic graphs.
    pub fn connect(&self, from: usize, to: usize, max_path_len: usize) -> Result<f64> {
        let n = self.node_count();
        if from >= n || to >= n {
            return Err(Error::Input(format!(
                "node {} not in graph of {n} nodes",
                from.max(to)
            )));
        }
        if max_path_len == 0 {
            return Err(Error::Input("max_path_len must be at least 1".into()));
        }
        let direct: Vec<f64> = self.out[from]
            .iter()
            .filter(|a| a.to == to)
            .map(|a| a.weight)
            .collect();
        if !direct.is_empty() {
            return Ok(direct.iter().sum());
        }
        // frontier[v] = Σ over length-k walks from → v of Π w
        let mut frontier: BTreeMap<usize, f64> = BTreeMap::from([(from, 1.0)]);
        let mut total = 0.0;
        for _ in 0..max_path_len {
            let mut next: BTreeMap<usize, f64> = BTreeMap::new();
            for (&u, &acc) in &frontier {
                for arc in &self.out[u] {
                    *next.entry(arc.to).or_insert(0.0) += acc * arc.weight;
                }
            }
            if let Some(v) = next.get(&to) {
                total += v;
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(total)
    }

    /// True when no directed cycle exists (Kahn's algorithm).
    pub fn is_acyclic(&self) -> bool {
        let n = self.node_count();
        let mut indeg = vec![0usize; n];
        for arcs in &self.out {
            for a in arcs {
                indeg[a.to] += 1;
            }
        }
        let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(u) = stack.pop() {
            seen += 1;
            for a in &self.out[u] {
                indeg[a.to] -= 1;
                if indeg[a.to] == 0 {
                    stack.push(a.to);
                }
            }
        }
        seen == n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Row,
    Col,
}

/// One row or column of a named parameter matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slice {
    pub param: String,
    pub axis: Axis,
    pub index: usize,
    /// Shape of the parameter when the slice was taken.
    pub shape: [usize; 2],
}

impl Slice {
    pub fn len(&self) -> usize {
        match self.axis {
            Axis::Row => self.shape[1],
            Axis::Col => self.shape[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row-major offsets of the slice's elements.
    pub fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        let [rows, cols] = self.shape;
        let (start, step, count) = match self.axis {
            Axis::Row => (self.index * cols, 1, cols),
            Axis::Col => (self.index, cols, rows),
        };
        (0..count).map(move |k| start + k * step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    AttentionHead,
    MlpChannel,
}

impl GroupKind {
    pub fn label(self) -> &'static str {
        match self {
            GroupKind::AttentionHead => "attention-head",
            GroupKind::MlpChannel => "mlp-channel",
        }
    }
}

/// The slices one channel index contributes to its group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupChannel {
    /// Channel index within the layer family (attention width or MLP width).
    pub index: usize,
    pub members: Vec<Slice>,
}

/// Slices that must be removed together to keep shapes consistent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGroup {
    pub id: usize,
    pub layer: usize,
    pub kind: GroupKind,
    /// Head index or MLP channel index within the layer.
    pub index: usize,
    pub channels: Vec<GroupChannel>,
}

impl DependencyGroup {
    pub fn members(&self) -> impl Iterator<Item = &Slice> {
        self.channels.iter().flat_map(|c| c.members.iter())
    }

    /// Number of weights removed with this group.
    pub fn param_count(&self) -> usize {
        self.members().map(Slice::len).sum()
    }
}

/// Channel graph of a [`DecoderModel`].
#[derive(Clone, Debug)]
pub struct ChannelGraph {
    nodes: Vec<ChannelId>,
    index: HashMap<ChannelId, usize>,
    graph: WeightedDigraph,
    shapes: BTreeMap<String, [usize; 2]>,
    head_dim: usize,
}

/// Node count implied by the model's current widths.
pub fn expected_node_count(model: &DecoderModel) -> usize {
    let c = &model.config;
    let per_block: usize = model
        .blocks
        .iter()
        .map(|b| 4 * b.attn_width() + 3 * b.ff_width())
        .sum();
    2 * c.vocab_size + (c.n_layers + 1) * c.d_model + c.n_layers * c.d_model + per_block
}

impl ChannelGraph {
    pub fn build(model: &DecoderModel) -> Result<Self> {
        model.check_shapes()?;
        let c = &model.config;
        let d = c.d_model;
        let mut nodes = Vec::with_capacity(expected_node_count(model));
        let push_range = |nodes: &mut Vec<ChannelId>, layer, site, n| {
            nodes.extend((0..n).map(|i| ChannelId::new(layer, site, i)));
        };
        push_range(&mut nodes, 0, Site::Token, c.vocab_size);
        for (l, b) in model.blocks.iter().enumerate() {
            let a = b.attn_width();
            let f = b.ff_width();
            push_range(&mut nodes, l, Site::Residual, d);
            for site in [Site::Query, Site::Key, Site::Value, Site::Context] {
                push_range(&mut nodes, l, site, a);
            }
            push_range(&mut nodes, l, Site::ResidualMid, d);
            for site in [Site::Gate, Site::Up, Site::Hidden] {
                push_range(&mut nodes, l, site, f);
            }
        }
        push_range(&mut nodes, c.n_layers, Site::Residual, d);
        push_range(&mut nodes, c.n_layers, Site::Logit, c.vocab_size);

        let index: HashMap<ChannelId, usize> =
            nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        if index.len() != nodes.len() {
            return Err(Error::Structural("duplicate channel ids".into()));
        }
        let id = |layer, site, i| index[&ChannelId::new(layer, site, i)];
        let mut graph = WeightedDigraph::with_nodes(nodes.len());

        // dense `from[rows] → to[cols]` connections through a matrix
        let dense = |graph: &mut WeightedDigraph,
                         m: &crate::tensor::Tensor,
                         from: (usize, Site),
                         to: (usize, Site)| {
            for r in 0..m.rows() {
                for col in 0..m.cols() {
                    graph.add_edge(
                        id(from.0, from.1, r),
                        id(to.0, to.1, col),
                        m.get2(r, col),
                        false,
                    );
                }
            }
        };

        dense(&mut graph, &model.tok_embedding, (0, Site::Token), (0, Site::Residual));
        for (l, b) in model.blocks.iter().enumerate() {
            dense(&mut graph, &b.wq.weight, (l, Site::Residual), (l, Site::Query));
            dense(&mut graph, &b.wk.weight, (l, Site::Residual), (l, Site::Key));
            dense(&mut graph, &b.wv.weight, (l, Site::Residual), (l, Site::Value));
            let a = b.attn_width();
            for j in 0..a {
                for site in [Site::Query, Site::Key, Site::Value] {
                    graph.add_edge(id(l, site, j), id(l, Site::Context, j), 1.0, true);
                }
                if (j + 1) % c.head_dim != 0 {
                    graph.add_edge(id(l, Site::Context, j), id(l, Site::Context, j + 1), 1.0, true);
                }
            }
            dense(&mut graph, &b.wo.weight, (l, Site::Context), (l, Site::ResidualMid));
            for ch in 0..d {
                graph.add_edge(id(l, Site::Residual, ch), id(l, Site::ResidualMid, ch), 1.0, true);
            }
            dense(&mut graph, &b.wgate.weight, (l, Site::ResidualMid), (l, Site::Gate));
            dense(&mut graph, &b.wup.weight, (l, Site::ResidualMid), (l, Site::Up));
            for f in 0..b.ff_width() {
                graph.add_edge(id(l, Site::Gate, f), id(l, Site::Hidden, f), 1.0, true);
                graph.add_edge(id(l, Site::Up, f), id(l, Site::Hidden, f), 1.0, true);
            }
            dense(&mut graph, &b.wdown.weight, (l, Site::Hidden), (l + 1, Site::Residual));
            for ch in 0..d {
                graph.add_edge(id(l, Site::ResidualMid, ch), id(l + 1, Site::Residual, ch), 1.0, true);
            }
        }
        dense(&mut graph, &model.head, (c.n_layers, Site::Residual), (c.n_layers, Site::Logit));

        let shapes = model
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| {
                Role::ALL.into_iter().map(move |r| {
                    let w = &b.linear(r).weight;
                    (param_name(l, r), [w.rows(), w.cols()])
                })
            })
            .collect();
        Ok(ChannelGraph {
            nodes,
            index,
            graph,
            shapes,
            head_dim: c.head_dim,
        })
    }

    pub fn nodes(&self) -> &[ChannelId] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn digraph(&self) -> &WeightedDigraph {
        &self.graph
    }

    pub fn node_index(&self, id: ChannelId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Path-sum connection strength between two channels; see
    /// [`WeightedDigraph::connect`].
    pub fn connect(&self, from: ChannelId, to: ChannelId, max_path_len: usize) -> Result<f64> {
        let lookup = |c: ChannelId| {
            self.node_index(c)
                .ok_or_else(|| Error::Input(format!("unknown channel {c:?}")))
        };
        self.graph.connect(lookup(from)?, lookup(to)?, max_path_len)
    }

    /// Coupled components over prunable channels, one group per attention
    /// head and per MLP hidden channel, ordered by (layer, kind, index).
    pub fn discover_groups(&self) -> Vec<DependencyGroup> {
        let n = self.nodes.len();
        let mut uf = UnionFind::<usize>::new(n);
        for (u, arcs) in self.graph.out.iter().enumerate() {
            if !self.nodes[u].site.is_prunable() {
                continue;
            }
            for a in arcs {
                if a.coupled && self.nodes[a.to].site.is_prunable() {
                    uf.union(u, a.to);
                }
            }
        }
        let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.site.is_prunable() {
                components.entry(uf.find(i)).or_default().push(i);
            }
        }

        let mut groups: Vec<DependencyGroup> = components
            .into_values()
            .map(|members| self.group_from_component(&members))
            .collect();
        groups.sort_by_key(|g| (g.layer, g.kind, g.index));
        for (i, g) in groups.iter_mut().enumerate() {
            g.id = i;
        }
        groups
    }

    fn group_from_component(&self, members: &[usize]) -> DependencyGroup {
        let first = self.nodes[members[0]];
        let kind = if members
            .iter()
            .any(|&m| matches!(self.nodes[m].site, Site::Context | Site::Query | Site::Key | Site::Value))
        {
            GroupKind::AttentionHead
        } else {
            GroupKind::MlpChannel
        };
        let mut by_channel: BTreeMap<usize, Vec<Slice>> = BTreeMap::new();
        for &m in members {
            let node = self.nodes[m];
            let (role, axis) = node.site.slice_role().expect("prunable site");
            let param = param_name(node.layer, role);
            let shape = self.shapes[&param];
            by_channel.entry(node.index).or_default().push(Slice {
                param,
                axis,
                index: node.index,
                shape,
            });
        }
        let channels: Vec<GroupChannel> = by_channel
            .into_iter()
            .map(|(index, mut members)| {
                members.sort();
                GroupChannel { index, members }
            })
            .collect();
        let index = match kind {
            GroupKind::AttentionHead => channels[0].index / self.head_dim,
            GroupKind::MlpChannel => channels[0].index,
        };
        DependencyGroup {
            id: 0,
            layer: first.layer,
            kind,
            index,
            channels,
        }
    }
}

/// Convenience: build the graph and return its groups.
pub fn discover_groups(model: &DecoderModel) -> Result<Vec<DependencyGroup>> {
    Ok(ChannelGraph::build(model)?.discover_groups())
}

#[derive(Serialize)]
struct GroupDump<'a> {
    header: &'a ArtifactHeader,
    groups: &'a [DependencyGroup],
}

pub fn write_group_dump(path: &Path, header: &ArtifactHeader, groups: &[DependencyGroup]) -> Result<()> {
    let json = serde_json::to_vec_pretty(&GroupDump { header, groups })?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use std::collections::BTreeSet;

    fn model(cfg: &ModelConfig) -> DecoderModel {
        DecoderModel::init(cfg).unwrap()
    }

    #[test]
    fn connect_direct_disconnected_and_diamond() {
        let mut g = WeightedDigraph::with_nodes(4);
        g.add_edge(0, 1, 0.7, false);
        assert_eq!(g.connect(0, 1, 6).unwrap(), 0.7);
        assert_eq!(g.connect(1, 0, 6).unwrap(), 0.0);
        assert_eq!(g.connect(2, 3, 6).unwrap(), 0.0);

        // a→b→d (2,3), a→c→d (4,5)
        let mut d = WeightedDigraph::with_nodes(4);
        d.add_edge(0, 1, 2.0, false);
        d.add_edge(1, 3, 3.0, false);
        d.add_edge(0, 2, 4.0, false);
        d.add_edge(2, 3, 5.0, false);
        assert_eq!(d.connect(0, 3, 6).unwrap(), 26.0);
        // paths of length 2 are cut off at max_path_len 1
        assert_eq!(d.connect(0, 3, 1).unwrap(), 0.0);
        assert!(d.connect(0, 9, 6).is_err());
        assert!(d.connect(0, 3, 0).is_err());
    }

    #[test]
    fn node_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let m = model(&cfg);
        let g = ChannelGraph::build(&m).unwrap();
        // 2V + (L+1)d + Ld + L(4d + 3F)
        let by_hand = 2 * 256 + 5 * 64 + 4 * 64 + 4 * (4 * 64 + 3 * 256);
        assert_eq!(g.node_count(), by_hand);
        assert_eq!(expected_node_count(&m), by_hand);
        let unique: BTreeSet<_> = g.nodes().iter().collect();
        assert_eq!(unique.len(), g.node_count());
        assert!(g.digraph().is_acyclic());
    }

    #[test]
    fn default_config_has_1040_groups() {
        let groups = discover_groups(&model(&ModelConfig::default())).unwrap();
        assert_eq!(groups.len(), 4 * 4 + 4 * 256);
        let heads = groups.iter().filter(|g| g.kind == GroupKind::AttentionHead).count();
        assert_eq!(heads, 16);
        let ids: Vec<usize> = groups.iter().map(|g| g.id).collect();
        assert_eq!(ids, (0..groups.len()).collect::<Vec<_>>());
        let keys: Vec<_> = groups.iter().map(|g| (g.layer, g.kind, g.index)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn minimal_model_groups() {
        let cfg = ModelConfig::new(8, 4, 1, 1, 6, 4, 0).unwrap();
        let groups = discover_groups(&model(&cfg)).unwrap();
        assert_eq!(groups.iter().filter(|g| g.kind == GroupKind::AttentionHead).count(), 1);
        assert_eq!(groups.iter().filter(|g| g.kind == GroupKind::MlpChannel).count(), 6);
        let head = &groups[0];
        assert_eq!(head.channels.len(), 4);
        assert_eq!(head.param_count(), 4 * 4 * 4);
        let mlp = &groups[1];
        assert_eq!(mlp.members().count(), 3);
        assert_eq!(mlp.param_count(), 3 * 4);
    }

    #[test]
    fn groups_partition_prunable_slices() {
        for (seed, cfg) in [
            ModelConfig::new(16, 8, 2, 2, 12, 4, 0).unwrap(),
            ModelConfig::new(10, 12, 3, 3, 5, 4, 0).unwrap(),
            ModelConfig::new(5, 6, 1, 6, 1, 2, 0).unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let m = model(&ModelConfig { seed: seed as u64, ..cfg });
            let groups = discover_groups(&m).unwrap();
            let mut seen = BTreeSet::new();
            for g in &groups {
                for s in g.members() {
                    assert!(seen.insert((s.param.clone(), s.axis, s.index)), "overlap {s:?}");
                }
            }
            let mut all = BTreeSet::new();
            for (l, b) in m.blocks.iter().enumerate() {
                for r in [Role::Wq, Role::Wk, Role::Wv, Role::Wgate, Role::Wup] {
                    for j in 0..b.linear(r).weight.cols() {
                        all.insert((param_name(l, r), Axis::Col, j));
                    }
                }
                for r in [Role::Wo, Role::Wdown] {
                    for i in 0..b.linear(r).weight.rows() {
                        all.insert((param_name(l, r), Axis::Row, i));
                    }
                }
            }
            assert_eq!(seen, all);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let m = model(&ModelConfig::new(16, 8, 2, 2, 12, 4, 3).unwrap());
        let a = ChannelGraph::build(&m).unwrap();
        let b = ChannelGraph::build(&m).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.digraph(), b.digraph());
        assert_eq!(a.discover_groups(), b.discover_groups());
    }

    #[test]
    fn connect_on_model_graph() {
        let m = model(&ModelConfig::new(16, 8, 1, 2, 4, 4, 1).unwrap());
        let g = ChannelGraph::build(&m).unwrap();
        let w = g
            .connect(
                ChannelId::new(0, Site::Residual, 2),
                ChannelId::new(0, Site::Query, 5),
                6,
            )
            .unwrap();
        assert_eq!(w, m.blocks[0].wq.weight.get2(2, 5));
        assert!(g
            .connect(ChannelId::new(1, Site::Logit, 0), ChannelId::new(0, Site::Token, 0), 6)
            .unwrap()
            == 0.0);
        assert!(g
            .connect(ChannelId::new(7, Site::Query, 0), ChannelId::new(0, Site::Token, 0), 6)
            .is_err());
    }

    #[test]
    fn slice_offsets() {
        let row = Slice { param: "w".into(), axis: Axis::Row, index: 1, shape: [3, 4] };
        assert_eq!(row.offsets().collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        let col = Slice { param: "w".into(), axis: Axis::Col, index: 2, shape: [3, 4] };
        assert_eq!(col.offsets().collect::<Vec<_>>(), vec![2, 6, 10]);
        assert_eq!(col.len(), 3);
    }
}
