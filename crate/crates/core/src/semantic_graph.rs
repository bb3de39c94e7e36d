//! Per-scan semantic instance graphs.
//!
//! Points of the graph classes are grouped by single-linkage Euclidean
//! clustering; each cluster becomes a node with a centroid, an axis-aligned
//! box and a descriptor. Nodes closer than the edge radius are connected.
//!
//! The node descriptor is a histogram of neighbor counts indexed by
//! (neighbor class, distance bin), followed by a one-hot of the node's own
//! class, L2-normalized. It depends on distances only, so it is invariant to
//! rigid motion of the whole graph. A node without neighbors has the zero
//! descriptor.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::config::GraphConfig;
use crate::geometry::Pose;
use crate::point::{LabeledPoint, SemanticClass};
use crate::voxel_map::{voxel_key, VoxelKey, VoxelKeyHasher};

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNode {
    pub id: u64,
    pub label: SemanticClass,
    pub centroid: Vector3<f64>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub point_count: usize,
    pub descriptor: Vec<f64>,
    pub observations: u32,
}

impl InstanceNode {
    /// Node spanning `points`, which must be non-empty.
    pub fn from_points(id: u64, label: SemanticClass, points: &[Vector3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut sum = Vector3::zeros();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            sum += p;
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        InstanceNode {
            id,
            label,
            centroid: sum / points.len() as f64,
            bbox_min: lo,
            bbox_max: hi,
            point_count: points.len(),
            descriptor: Vec::new(),
            observations: 1,
        }
    }

    /// Node moved by `pose`; the box becomes the bound of the moved corners.
    pub fn transformed(&self, pose: &Pose) -> InstanceNode {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for corner in 0..8 {
            let c = Vector3::new(
                if corner & 1 == 0 { self.bbox_min.x } else { self.bbox_max.x },
                if corner & 2 == 0 { self.bbox_min.y } else { self.bbox_max.y },
                if corner & 4 == 0 { self.bbox_min.z } else { self.bbox_max.z },
            );
            let w = pose.transform_point(&c);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        InstanceNode {
            centroid: pose.transform_point(&self.centroid),
            bbox_min: lo,
            bbox_max: hi,
            ..self.clone()
        }
    }

    pub fn bbox_contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.bbox_min[k] - 1e-9 && p[k] <= self.bbox_max[k] + 1e-9)
    }
}

/// Undirected edge between the nodes at positions `a < b` of the node list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticGraph {
    pub nodes: Vec<InstanceNode>,
    pub edges: Vec<Edge>,
}

impl SemanticGraph {
    /// Connects `nodes` and computes their descriptors.
    pub fn from_nodes(nodes: Vec<InstanceNode>, cfg: &GraphConfig) -> Self {
        let edges = build_edges(&nodes, cfg.edge_radius);
        let mut g = SemanticGraph { nodes, edges };
        g.refresh_descriptors(cfg);
        g
    }

    /// Clusters `points` and builds the graph of the resulting nodes.
    pub fn from_points(points: &[LabeledPoint], cfg: &GraphConfig) -> Self {
        SemanticGraph::from_nodes(cluster_instances(points, cfg), cfg)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn refresh_descriptors(&mut self, cfg: &GraphConfig) {
        let descriptors = compute_descriptors(&self.nodes, &self.edges, cfg);
        for (n, d) in self.nodes.iter_mut().zip(descriptors) {
            n.descriptor = d;
        }
    }

    /// All nodes moved by `pose`; edges and descriptors are unchanged.
    pub fn transformed(&self, pose: &Pose) -> SemanticGraph {
        SemanticGraph {
            nodes: self.nodes.iter().map(|n| n.transformed(pose)).collect(),
            edges: self.edges.clone(),
        }
    }

    /// Neighbor list per node.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.a].push((e.b, e.length));
            adj[e.b].push((e.a, e.length));
        }
        adj
    }
}

/// Minimal union-find with path halving.
struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the partition labels are order independent.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clusters of `points` at `distance`, as index lists.
pub fn euclidean_clusters(points: &[Vector3<f64>], distance: f64) -> Vec<Vec<usize>> {
    let mut grid: HashMap<VoxelKey, Vec<usize>, VoxelKeyHasher> =
        HashMap::with_hasher(VoxelKeyHasher);
    for (i, p) in points.iter().enumerate() {
        grid.entry(voxel_key(p, distance)).or_default().push(i);
    }
    let d2 = distance * distance;
    let mut sets = DisjointSet::new(points.len());
    for (i, p) in points.iter().enumerate() {
        let k = voxel_key(p, distance).0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = VoxelKey([k[0] + dx, k[1] + dy, k[2] + dz]);
                    if let Some(bucket) = grid.get(&key) {
                        for &j in bucket {
                            if j > i && (points[j] - p).norm_squared() <= d2 {
                                sets.union(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..points.len() {
        let r = sets.find(i);
        by_root.entry(r).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = by_root.into_values().collect();
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Groups the graph-class points of a scan into instance nodes.
///
/// Output order is canonical: by class slot, then centroid coordinates, so
/// it does not depend on point order. Node ids are list positions.
pub fn cluster_instances(points: &[LabeledPoint], cfg: &GraphConfig) -> Vec<InstanceNode> {
    let mut nodes = Vec::new();
    for &class in &cfg.classes {
        let pts: Vec<Vector3<f64>> = points
            .iter()
            .filter(|p| p.label == class)
            .map(|p| p.position)
            .collect();
        if pts.len() < cfg.min_cluster_points {
            continue;
        }
        for cluster in euclidean_clusters(&pts, cfg.cluster_distance(class)) {
            if cluster.len() >= cfg.min_cluster_points {
                let members: Vec<Vector3<f64>> = cluster.iter().map(|&i| pts[i]).collect();
                nodes.push(InstanceNode::from_points(0, class, &members));
            }
        }
    }
    sort_canonical(&mut nodes, cfg);
    for (i, n) in nodes.iter_mut().enumerate() {
        n.id = i as u64;
    }
    nodes
}

fn sort_canonical(nodes: &mut [InstanceNode], cfg: &GraphConfig) {
    nodes.sort_by(|a, b| {
        let sa = cfg.class_slot(a.label).unwrap_or(usize::MAX);
        let sb = cfg.class_slot(b.label).unwrap_or(usize::MAX);
        sa.cmp(&sb)
            .then(a.centroid.x.total_cmp(&b.centroid.x))
            .then(a.centroid.y.total_cmp(&b.centroid.y))
            .then(a.centroid.z.total_cmp(&b.centroid.z))
    });
}

/// Every node pair with centroid distance `≤ radius`.
pub fn build_edges(nodes: &[InstanceNode], radius: f64) -> Vec<Edge> {
    let r2 = radius * radius;
    let mut edges = Vec::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            let d2 = (nodes[a].centroid - nodes[b].centroid).norm_squared();
            if d2 <= r2 {
                edges.push(Edge {
                    a,
                    b,
                    length: d2.sqrt(),
                });
            }
        }
    }
    edges
}

/// Descriptors for all nodes given their edges.
pub fn compute_descriptors(
    nodes: &[InstanceNode],
    edges: &[Edge],
    cfg: &GraphConfig,
) -> Vec<Vec<f64>> {
    let bins = cfg.descriptor_bins;
    let classes = cfg.classes.len();
    let dim = cfg.descriptor_dim();
    let mut out = vec![vec![0.0; dim]; nodes.len()];
    let mut degree = vec![0usize; nodes.len()];
    let mut add = |out: &mut Vec<Vec<f64>>, at: usize, neighbor: usize, length: f64| {
        if let Some(slot) = cfg.class_slot(nodes[neighbor].label) {
            let bin = ((length / cfg.descriptor_bin_width) as usize).min(bins - 1);
            out[at][slot * bins + bin] += 1.0;
            degree[at] += 1;
        }
    };
    for e in edges {
        add(&mut out, e.a, e.b, e.length);
        add(&mut out, e.b, e.a, e.length);
    }
    for (i, d) in out.iter_mut().enumerate() {
        if degree[i] == 0 {
            d.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        if let Some(slot) = cfg.class_slot(nodes[i].label) {
            d[classes * bins + slot] = 1.0;
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Descriptor of node `index` of `graph`.
pub fn compute_descriptor(index: usize, graph: &SemanticGraph, cfg: &GraphConfig) -> Vec<f64> {
    compute_descriptors(&graph.nodes, &graph.edges, cfg).swap_remove(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::SemanticClass::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GraphConfig {
        GraphConfig::default()
    }

    fn blob(rng: &mut ChaCha8Rng, c: Vector3<f64>, n: usize, r: f64, label: SemanticClass) -> Vec<LabeledPoint> {
        (0..n)
            .map(|_| {
                let o = Vector3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r));
                LabeledPoint::new(c + o, label, 0.0)
            })
            .collect()
    }

    fn node_at(label: SemanticClass, c: Vector3<f64>) -> InstanceNode {
        InstanceNode::from_points(0, label, &[c])
    }

    #[test]
    fn clustering_basic_cases() {
        assert!(cluster_instances(&[], &cfg()).is_empty());
        let road: Vec<_> = (0..20)
            .map(|i| LabeledPoint::new(Vector3::new(i as f64 * 0.1, 0.0, 0.0), Road, 0.0))
            .collect();
        assert!(cluster_instances(&road, &cfg()).is_empty());

        // Two vertical pole lines 5 m apart, 20 points each, 0.1 m spacing.
        let mut pts = Vec::new();
        for (x, label) in [(0.0, Pole), (5.0, Pole)] {
            for k in 0..20 {
                pts.push(LabeledPoint::new(Vector3::new(x, 1.0, k as f64 * 0.1), label, 0.0));
            }
        }
        let nodes = cluster_instances(&pts, &cfg());
        assert_eq!(nodes.len(), 2);
        let mean_z = (0..20).map(|k| k as f64 * 0.1).sum::<f64>() / 20.0;
        assert!((nodes[0].centroid - Vector3::new(0.0, 1.0, mean_z)).norm() < 1e-9);
        assert!((nodes[1].centroid - Vector3::new(5.0, 1.0, mean_z)).norm() < 1e-9);
        assert_eq!(nodes[0].point_count, 20);
        assert!(nodes.iter().all(|n| n.bbox_contains(&n.centroid)));

        let tiny: Vec<_> = (0..3)
            .map(|k| LabeledPoint::new(Vector3::new(0.0, 0.0, k as f64 * 0.1), Trunk, 0.0))
            .collect();
        assert!(cluster_instances(&tiny, &cfg()).is_empty());
    }

    #[test]
    fn clustering_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        for i in 0..12 {
            let c = Vector3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0);
            let label = [Vehicle, Pole, Trunk][i % 3];
            pts.extend(blob(&mut rng, c, 40, if label == Vehicle { 1.0 } else { 0.1 }, label));
        }
        let a = cluster_instances(&pts, &cfg());
        pts.shuffle(&mut rng);
        let b = cluster_instances(&pts, &cfg());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.point_count, y.point_count);
            assert!((x.centroid - y.centroid).norm() < 1e-9);
        }
    }

    #[test]
    fn edges_on_collinear_nodes() {
        let one = vec![node_at(Pole, Vector3::zeros())];
        assert!(build_edges(&one, 60.0).is_empty());
        let nodes: Vec<_> = [0.0, 50.0, 100.0]
            .iter()
            .map(|x| node_at(Pole, Vector3::new(*x, 0.0, 0.0)))
            .collect();
        let e = build_edges(&nodes, 60.0);
        let pairs: Vec<_> = e.iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert!((e[0].length - 50.0).abs() < 1e-12);
        assert!(build_edges(&nodes, 10.0).is_empty());
    }

    #[test]
    fn descriptor_binning() {
        let c = cfg();
        let g = SemanticGraph::from_nodes(vec![node_at(Vehicle, Vector3::zeros())], &c);
        assert!(g.nodes[0].descriptor.iter().all(|v| *v == 0.0));
        assert_eq!(g.nodes[0].descriptor.len(), 21);

        let g = SemanticGraph::from_nodes(
            vec![node_at(Trunk, Vector3::zeros()), node_at(Pole, Vector3::new(15.0, 0.0, 0.0))],
            &c,
        );
        let d = compute_descriptor(0, &g, &c);
        // Pole is class slot 1, 15 m falls in bin 1; trunk one-hot is slot 2.
        let mut expected = vec![0.0; 21];
        expected[6 + 1] = 1.0;
        expected[18 + 2] = 1.0;
        let n = 2f64.sqrt();
        for (a, b) in d.iter().zip(&expected) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn descriptors_follow_nodes_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg();
        let nodes: Vec<_> = (0..15)
            .map(|i| node_at([Vehicle, Pole, Trunk][i % 3], Vector3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 0.0)))
            .collect();
        let g = SemanticGraph::from_nodes(nodes.clone(), &c);
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = SemanticGraph::from_nodes(order.iter().map(|&i| nodes[i].clone()).collect(), &c);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(shuffled.nodes[k].descriptor, g.nodes[i].descriptor);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn descriptors_are_rigid_invariant(seed in any::<u64>(), yaw in -3.1f64..3.1, tx in -100f64..100.0, roll in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cfg();
            let mut pts = Vec::new();
            for i in 0..8 {
                let ctr = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 0.0);
                let label = [Vehicle, Pole, Trunk][i % 3];
                pts.extend(blob(&mut rng, ctr, 30, 0.1, label));
            }
            let g = SemanticGraph::from_points(&pts, &c);
            let pose = Pose::rot_z(yaw).compose(&Pose::from_axis_angle(&Vector3::x(), roll)).with_translation(Vector3::new(tx, 3.0, -1.0));
            let moved: Vec<_> = pts.iter().map(|p| p.transformed(&pose)).collect();
            let h = SemanticGraph::from_points(&moved, &c);
            prop_assert_eq!(g.len(), h.len());
            let mut da: Vec<Vec<f64>> = g.nodes.iter().map(|n| n.descriptor.clone()).collect();
            let mut db: Vec<Vec<f64>> = h.nodes.iter().map(|n| n.descriptor.clone()).collect();
            let key = |v: &Vec<f64>| v.iter().map(|x| (x * 1e6).round() as i64).collect::<Vec<_>>();
            da.sort_by_key(key);
            db.sort_by_key(key);
            for (a, b) in da.iter().zip(&db) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn node_count_monotone_in_min_points(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::new();
            for _ in 0..10 {
                let ctr = Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0);
                let n = rng.gen_range(1..15);
                pts.extend(blob(&mut rng, ctr, n, 0.1, Pole));
            }
            let mut last = usize::MAX;
            for m in 1..16 {
                let c = GraphConfig { min_cluster_points: m, ..cfg() };
                let n = cluster_instances(&pts, &c).len();
                prop_assert!(n <= last);
                last = n;
            }
        }
    }
}
