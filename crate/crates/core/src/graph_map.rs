//! Local semantic graph map: node tracking across scans, geometric outlier
//! pruning and attribute fusion.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::Vector3;

use crate::config::GraphConfig;
use crate::geometry::Pose;
use crate::point::SemanticClass;
use crate::semantic_graph::{build_edges, InstanceNode, SemanticGraph};

/// Per-class KD-trees over node descriptors.
#[derive(Debug)]
pub struct DescriptorIndex {
    trees: Vec<(SemanticClass, KdTree<f64, usize, Vec<f64>>)>,
}

impl DescriptorIndex {
    pub fn build(graph: &SemanticGraph, cfg: &GraphConfig) -> Self {
        let dim = cfg.descriptor_dim();
        let mut trees: Vec<_> = cfg.classes.iter().map(|c| (*c, KdTree::new(dim))).collect();
        for (i, n) in graph.nodes.iter().enumerate() {
            if let Some((_, tree)) = trees.iter_mut().find(|(c, _)| *c == n.label) {
                if n.descriptor.len() == dim {
                    tree.add(n.descriptor.clone(), i)
                        .expect("descriptor dimension checked above");
                }
            }
        }
        DescriptorIndex { trees }
    }

    /// Up to `k` nodes of `class` nearest to `descriptor`, as
    /// `(distance, node position)` in increasing distance.
    pub fn nearest(&self, class: SemanticClass, descriptor: &[f64], k: usize) -> Vec<(f64, usize)> {
        let Some((_, tree)) = self.trees.iter().find(|(c, _)| *c == class) else {
            return Vec::new();
        };
        if tree.size() == 0 {
            return Vec::new();
        }
        tree.nearest(descriptor, k, &squared_euclidean)
            .map(|v| v.into_iter().map(|(d, i)| (d.sqrt(), *i)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMatch {
    /// Position in the current graph.
    pub current: usize,
    /// Position in the target graph.
    pub target: usize,
    pub distance: f64,
}

/// One-to-one node correspondences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeMatchSet {
    pub matches: Vec<NodeMatch>,
}

impl NodeMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// `(current centroid, target centroid)` per match.
    pub fn centroid_pairs(
        &self,
        current: &SemanticGraph,
        target: &SemanticGraph,
    ) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        self.matches
            .iter()
            .map(|m| (current.nodes[m.current].centroid, target.nodes[m.target].centroid))
            .collect()
    }

    fn is_one_to_one(&self) -> bool {
        let mut a: Vec<_> = self.matches.iter().map(|m| m.current).collect();
        let mut b: Vec<_> = self.matches.iter().map(|m| m.target).collect();
        a.sort_unstable();
        b.sort_unstable();
        a.windows(2).all(|w| w[0] != w[1]) && b.windows(2).all(|w| w[0] != w[1])
    }
}

/// Matches every current node to the same-class target node with the
/// nearest descriptor among the `k` retrieved. Conflicts over a target keep
/// the smaller descriptor distance.
pub fn match_nodes(
    current: &SemanticGraph,
    index: &DescriptorIndex,
    k: usize,
) -> NodeMatchSet {
    match_nodes_filtered(current, index, k, |_, _| true)
}

/// Like [`match_nodes`], but a candidate only counts when `accept(current,
/// target)` holds; the best accepted candidate is kept.
pub fn match_nodes_filtered(
    current: &SemanticGraph,
    index: &DescriptorIndex,
    k: usize,
    accept: impl Fn(usize, usize) -> bool,
) -> NodeMatchSet {
    let mut proposals: Vec<NodeMatch> = current
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            index
                .nearest(n.label, &n.descriptor, k)
                .into_iter()
                .find(|&(_, j)| accept(i, j))
                .map(|(distance, j)| NodeMatch {
                    current: i,
                    target: j,
                    distance,
                })
        })
        .collect();
    proposals.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.current.cmp(&b.current)));
    let mut taken = std::collections::HashSet::new();
    let mut kept: Vec<NodeMatch> = proposals.into_iter().filter(|m| taken.insert(m.target)).collect();
    kept.sort_by_key(|m| m.current);
    NodeMatchSet { matches: kept }
}

/// Pairwise-distance consistency between matches `i` and `j`.
fn consistent(pairs: &[(Vector3<f64>, Vector3<f64>)], i: usize, j: usize, slack: f64) -> bool {
    let dc = (pairs[i].0 - pairs[j].0).norm();
    let dg = (pairs[i].1 - pairs[j].1).norm();
    (dc - dg).abs() < slack
}

/// Greedy maximum-consistency selection over match centroid pairs.
///
/// Starts from the pair with the most consistent partners and repeatedly
/// adds the candidate, among those consistent with everything selected so
/// far, that has the most consistent partners within the candidate pool.
/// Returns the selected positions in increasing order.
pub fn consistent_subset(pairs: &[(Vector3<f64>, Vector3<f64>)], slack: f64) -> Vec<usize> {
    let n = pairs.len();
    if n <= 1 {
        return (0..n).collect();
    }
    let mut cons = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = consistent(pairs, i, j, slack);
            cons[i][j] = c;
            cons[j][i] = c;
        }
    }
    let degree: Vec<usize> = cons.iter().map(|r| r.iter().filter(|c| **c).count()).collect();
    let seed = (0..n).max_by_key(|&i| (degree[i], std::cmp::Reverse(i))).unwrap();
    let mut selected = vec![seed];
    let mut pool: Vec<usize> = (0..n).filter(|&j| j != seed && cons[seed][j]).collect();
    while !pool.is_empty() {
        let best = pool
            .iter()
            .copied()
            .max_by_key(|&a| {
                let support = pool.iter().filter(|&&b| cons[a][b]).count();
                (support, std::cmp::Reverse(a))
            })
            .unwrap();
        selected.push(best);
        pool.retain(|&j| j != best && cons[best][j]);
    }
    selected.sort_unstable();
    selected
}

/// Drops matches outside the largest mutually consistent group.
pub fn prune_outliers(
    matches: &NodeMatchSet,
    current: &SemanticGraph,
    target: &SemanticGraph,
    slack: f64,
) -> NodeMatchSet {
    let pairs = matches.centroid_pairs(current, target);
    let keep = consistent_subset(&pairs, slack);
    NodeMatchSet {
        matches: keep.into_iter().map(|i| matches.matches[i]).collect(),
    }
}

/// Result of folding one scan graph into the map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// `(current position, map id)` of fused nodes.
    pub fused: Vec<(usize, u64)>,
    /// `(current position, map id)` of inserted nodes.
    pub inserted: Vec<(usize, u64)>,
    pub evicted: Vec<u64>,
}

impl UpdateReport {
    /// Map id assigned to each current node.
    pub fn id_of(&self, current: usize) -> Option<u64> {
        self.fused
            .iter()
            .chain(&self.inserted)
            .find(|(c, _)| *c == current)
            .map(|(_, id)| *id)
    }
}

/// Fuses an observation into a node: centroid running mean by observation
/// count, box union, count incremented.
pub fn fuse_node(node: &mut InstanceNode, obs: &InstanceNode) {
    let n = node.observations as f64;
    node.centroid = (node.centroid * n + obs.centroid) / (n + 1.0);
    node.bbox_min = node.bbox_min.inf(&obs.bbox_min);
    node.bbox_max = node.bbox_max.sup(&obs.bbox_max);
    node.point_count = node.point_count.max(obs.point_count);
    node.observations += 1;
}

#[derive(Debug)]
pub struct LocalGraphMap {
    cfg: GraphConfig,
    radius: f64,
    graph: SemanticGraph,
    index: DescriptorIndex,
    next_id: u64,
}

impl LocalGraphMap {
    pub fn new(cfg: GraphConfig, radius: f64) -> Self {
        let graph = SemanticGraph::default();
        let index = DescriptorIndex::build(&graph, &cfg);
        LocalGraphMap {
            cfg,
            radius,
            graph,
            index,
            next_id: 0,
        }
    }

    pub fn graph(&self) -> &SemanticGraph {
        &self.graph
    }

    pub fn index(&self) -> &DescriptorIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }

    pub fn node(&self, id: u64) -> Option<&InstanceNode> {
        self.graph.nodes.iter().find(|n| n.id == id)
    }

    /// Pure descriptor matching of a sensor-frame graph against the map.
    pub fn match_nodes(&self, current: &SemanticGraph) -> NodeMatchSet {
        match_nodes(current, &self.index, self.cfg.match_candidates)
    }

    /// Associates a sensor-frame graph observed at `pose` with map nodes.
    ///
    /// Descriptor candidates must also land within the tracking gate in the
    /// world frame; the survivors are pruned for pairwise consistency. Nodes
    /// left unmatched fall back to the nearest unmatched map node of their
    /// class inside the gate.
    pub fn track(&self, current: &SemanticGraph, pose: &Pose) -> NodeMatchSet {
        let world: Vec<Vector3<f64>> = current
            .nodes
            .iter()
            .map(|n| pose.transform_point(&n.centroid))
            .collect();
        let gate_sq = self.cfg.track_gate * self.cfg.track_gate;
        let close = |i: usize, j: usize| (world[i] - self.graph.nodes[j].centroid).norm_squared() < gate_sq;
        let gated = match_nodes_filtered(current, &self.index, self.cfg.match_candidates, close);
        let world_graph = current.transformed(pose);
        let mut kept = prune_outliers(&gated, &world_graph, &self.graph, self.cfg.consistency_slack);

        let mut used_c: Vec<bool> = vec![false; current.nodes.len()];
        let mut used_t: Vec<bool> = vec![false; self.graph.nodes.len()];
        for m in &kept.matches {
            used_c[m.current] = true;
            used_t[m.target] = true;
        }
        for (i, n) in current.nodes.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            let nearest = self
                .graph
                .nodes
                .iter()
                .enumerate()
                .filter(|(j, t)| !used_t[*j] && t.label == n.label)
                .map(|(j, t)| (j, (world[i] - t.centroid).norm_squared()))
                .filter(|(_, d)| *d < gate_sq)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = nearest {
                used_t[j] = true;
                kept.matches.push(NodeMatch {
                    current: i,
                    target: j,
                    distance: f64::NAN,
                });
            }
        }
        kept.matches.sort_by_key(|m| m.current);
        debug_assert!(kept.is_one_to_one());
        kept
    }

    /// Fuses matched nodes, inserts the rest, evicts nodes beyond the map
    /// radius from `pose`, then recomputes edges, descriptors and the index.
    pub fn update(&mut self, current: &SemanticGraph, pose: &Pose, matches: &NodeMatchSet) -> UpdateReport {
        let mut report = UpdateReport::default();
        let mut matched = vec![false; current.nodes.len()];
        for m in &matches.matches {
            let obs = current.nodes[m.current].transformed(pose);
            let node = &mut self.graph.nodes[m.target];
            fuse_node(node, &obs);
            matched[m.current] = true;
            report.fused.push((m.current, node.id));
        }
        for (i, n) in current.nodes.iter().enumerate() {
            if matched[i] {
                continue;
            }
            let mut node = n.transformed(pose);
            node.id = self.next_id;
            node.observations = 1;
            self.next_id += 1;
            report.inserted.push((i, node.id));
            self.graph.nodes.push(node);
        }
        let r2 = self.radius * self.radius;
        let center = *pose.translation();
        self.graph.nodes.retain(|n| {
            let keep = (n.centroid - center).norm_squared() <= r2;
            if !keep {
                report.evicted.push(n.id);
            }
            keep
        });
        self.rebuild();
        report
    }

    fn rebuild(&mut self) {
        self.graph.edges = build_edges(&self.graph.nodes, self.cfg.edge_radius);
        self.graph.refresh_descriptors(&self.cfg);
        self.index = DescriptorIndex::build(&self.graph, &self.cfg);
    }
}
