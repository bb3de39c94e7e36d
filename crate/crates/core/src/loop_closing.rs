//! Keyframe database, scan descriptors and two-stage loop verification.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{GraphConfig, LoopClosingConfig, OdometryConfig, RelocalizationConfig};
use crate::geometry::Pose;
use crate::graph_map::{match_nodes, prune_outliers, DescriptorIndex, NodeMatchSet};
use crate::odometry::{register, FailureThresholds};
use crate::point::LabeledPoint;
use crate::relocalization::{inlier_ratio, relocalize};
use crate::semantic_graph::SemanticGraph;
use crate::voxel_map::VoxelHashMap;

/// Everything kept about a keyframe for place recognition.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub scan_index: usize,
    pub descriptor: Vec<f64>,
    /// Sensor-frame graph of the keyframe scan.
    pub graph: SemanticGraph,
    /// Downsampled sensor-frame points of every class.
    pub points: Vec<LabeledPoint>,
    pub pose: Pose,
}

impl KeyframeRecord {
    pub fn new(
        scan_index: usize,
        graph: SemanticGraph,
        points: Vec<LabeledPoint>,
        pose: Pose,
        cfg: &LoopClosingConfig,
        graph_cfg: &GraphConfig,
    ) -> Self {
        let background: Vec<Vector3<f64>> = background_points(&points, graph_cfg);
        let descriptor = encode_scan(&graph, &background, cfg, graph_cfg);
        KeyframeRecord {
            scan_index,
            descriptor,
            graph,
            points,
            pose,
        }
    }

    pub fn background(&self, graph_cfg: &GraphConfig) -> Vec<Vector3<f64>> {
        background_points(&self.points, graph_cfg)
    }
}

/// Positions of points whose class is not a graph class.
pub fn background_points(points: &[LabeledPoint], graph_cfg: &GraphConfig) -> Vec<Vector3<f64>> {
    points
        .iter()
        .filter(|p| !graph_cfg.is_graph_class(p.label))
        .map(|p| p.position)
        .collect()
}

fn normalize_into(out: &mut Vec<f64>, block: Vec<f64>) {
    let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        out.extend(block.iter().map(|v| v / n));
    } else {
        out.extend(block);
    }
}

pub fn scan_descriptor_dim(cfg: &LoopClosingConfig, graph_cfg: &GraphConfig) -> usize {
    let c = graph_cfg.classes.len();
    c + c * cfg.pair_distance_bins + cfg.height_bins * cfg.range_bins
}

/// Rotation-invariant scan descriptor.
///
/// Blocks: node count per graph class; per class, a histogram of distances
/// between same-class node pairs; a background occupancy histogram over
/// height and horizontal range. Each block is normalized, then the whole.
pub fn encode_scan(
    graph: &SemanticGraph,
    background: &[Vector3<f64>],
    cfg: &LoopClosingConfig,
    graph_cfg: &GraphConfig,
) -> Vec<f64> {
    let classes = graph_cfg.classes.len();
    let mut counts = vec![0.0; classes];
    for n in &graph.nodes {
        if let Some(s) = graph_cfg.class_slot(n.label) {
            counts[s] += 1.0;
        }
    }

    let bins = cfg.pair_distance_bins;
    let width = cfg.pair_distance_max / bins as f64;
    let mut pairs = vec![0.0; classes * bins];
    for (i, a) in graph.nodes.iter().enumerate() {
        let Some(s) = graph_cfg.class_slot(a.label) else { continue };
        for b in &graph.nodes[i + 1..] {
            if b.label != a.label {
                continue;
            }
            let d = (a.centroid - b.centroid).norm();
            if d < cfg.pair_distance_max {
                pairs[s * bins + ((d / width) as usize).min(bins - 1)] += 1.0;
            }
        }
    }

    let (hb, rb) = (cfg.height_bins, cfg.range_bins);
    let hw = (cfg.max_height - cfg.min_height) / hb as f64;
    let rw = cfg.max_range / rb as f64;
    let mut occupancy = vec![0.0; hb * rb];
    for p in background {
        let r = p.x.hypot(p.y);
        if p.z < cfg.min_height || p.z >= cfg.max_height || r >= cfg.max_range {
            continue;
        }
        let h = (((p.z - cfg.min_height) / hw) as usize).min(hb - 1);
        let ri = ((r / rw) as usize).min(rb - 1);
        occupancy[h * rb + ri] += 1.0;
    }

    let mut out = Vec::with_capacity(scan_descriptor_dim(cfg, graph_cfg));
    normalize_into(&mut out, counts);
    normalize_into(&mut out, pairs);
    normalize_into(&mut out, occupancy);
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|v| *v /= n);
    }
    out
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct LoopCandidate {
    pub query: usize,
    pub candidate: usize,
    pub descriptor_distance: f64,
    pub graph_similarity: f64,
    pub background_similarity: f64,
    /// Query sensor frame to candidate sensor frame.
    pub transform: Pose,
    pub accepted: bool,
    /// Query-to-candidate node matches consistent with `transform`.
    pub node_matches: NodeMatchSet,
}

/// Settings consumed by verification.
#[derive(Debug, Clone, Default)]
pub struct VerifySettings {
    pub loop_closing: LoopClosingConfig,
    pub graph: GraphConfig,
    pub relocalization: RelocalizationConfig,
    pub odometry: OdometryConfig,
    pub voxel_size: f64,
}

impl VerifySettings {
    pub fn from_run(cfg: &crate::config::RunConfig) -> Self {
        VerifySettings {
            loop_closing: cfg.loop_closing.clone(),
            graph: cfg.graph.clone(),
            relocalization: cfg.relocalization.clone(),
            odometry: cfg.odometry.clone(),
            voxel_size: cfg.preprocess.voxel_size,
        }
    }
}

/// Geometric verification of a retrieved candidate.
///
/// Nodes are matched by descriptor and pruned for consistency, RANSAC on the
/// survivors gives `T_0`, and graph similarity is the fraction of all matches
/// that `T_0` explains. Background similarity is the fraction of query
/// background points with a candidate background point within the match
/// distance after `T_0`. Accepted loops are refined with ICP on all points.
pub fn verify_and_estimate(
    query: &KeyframeRecord,
    candidate: &KeyframeRecord,
    settings: &VerifySettings,
) -> LoopCandidate {
    let cfg = &settings.loop_closing;
    let mut out = LoopCandidate {
        query: query.scan_index,
        candidate: candidate.scan_index,
        descriptor_distance: descriptor_distance(&query.descriptor, &candidate.descriptor),
        graph_similarity: 0.0,
        background_similarity: 0.0,
        transform: Pose::identity(),
        accepted: false,
        node_matches: NodeMatchSet::default(),
    };
    let index = DescriptorIndex::build(&candidate.graph, &settings.graph);
    let matches = match_nodes(&query.graph, &index, settings.graph.match_candidates);
    if matches.len() < 3 {
        return out;
    }
    let pruned = prune_outliers(&matches, &query.graph, &candidate.graph, settings.graph.consistency_slack);
    let pruned_pairs = pruned.centroid_pairs(&query.graph, &candidate.graph);
    let seed = settings
        .relocalization
        .seed
        .wrapping_add((query.scan_index as u64) << 32 | candidate.scan_index as u64);
    let outcome = relocalize(&pruned_pairs, &settings.relocalization, &mut ChaCha8Rng::seed_from_u64(seed));
    if pruned_pairs.len() < 3 || outcome.inliers < 3 {
        return out;
    }
    let t0 = outcome.pose;
    let all_pairs = matches.centroid_pairs(&query.graph, &candidate.graph);
    let tau = settings.relocalization.inlier_distance;
    out.graph_similarity = inlier_ratio(&all_pairs, &t0, tau).0;
    out.transform = t0;

    let q_bg = query.background(&settings.graph);
    let c_bg = candidate.background(&settings.graph);
    out.background_similarity = background_similarity(&q_bg, &c_bg, &t0, cfg.background_match_distance);

    out.accepted = out.descriptor_distance < cfg.descriptor_distance
        && out.graph_similarity > cfg.graph_similarity
        && out.background_similarity > cfg.background_similarity;
    if !out.accepted {
        return out;
    }

    let voxel = if settings.voxel_size > 0.0 { settings.voxel_size } else { 0.5 };
    let mut map = VoxelHashMap::new(voxel, 20, f64::MAX);
    map.insert(&candidate.points);
    // The loop transform is not a prediction, so the failure flag is moot.
    let loose = FailureThresholds {
        distance: f64::INFINITY,
        angle: f64::INFINITY,
    };
    if let Ok(r) = register(&map, &query.points, &t0, &settings.odometry, &loose) {
        out.transform = r.pose;
    }
    out.node_matches = NodeMatchSet {
        matches: matches
            .matches
            .iter()
            .zip(&all_pairs)
            .filter(|(_, (c, g))| (out.transform.transform_point(c) - g).norm() < tau)
            .map(|(m, _)| *m)
            .collect(),
    };
    out
}

/// Fraction of `query` points with a `candidate` point within `distance`
/// after mapping by `pose`.
pub fn background_similarity(
    query: &[Vector3<f64>],
    candidate: &[Vector3<f64>],
    pose: &Pose,
    distance: f64,
) -> f64 {
    if query.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let voxel = distance.max(0.1);
    let mut map = VoxelHashMap::new(voxel, usize::MAX, f64::MAX);
    let pts: Vec<LabeledPoint> = candidate
        .iter()
        .map(|p| LabeledPoint::new(*p, crate::point::SemanticClass::Other, 0.0))
        .collect();
    map.insert(&pts);
    let hits = query
        .iter()
        .filter(|p| map.nearest_neighbor_sq(&pose.transform_point(p), distance).is_some())
        .count();
    hits as f64 / query.len() as f64
}

/// Keyframe store with descriptor retrieval and a temporal exclusion window.
#[derive(Debug)]
pub struct LoopDetector {
    settings: VerifySettings,
    records: Vec<KeyframeRecord>,
    tree: KdTree<f64, usize, Vec<f64>>,
    indexed: usize,
    verifications: usize,
}

impl LoopDetector {
    pub fn new(settings: VerifySettings) -> Self {
        let dim = scan_descriptor_dim(&settings.loop_closing, &settings.graph);
        LoopDetector {
            settings,
            records: Vec::new(),
            tree: KdTree::new(dim),
            indexed: 0,
            verifications: 0,
        }
    }

    pub fn settings(&self) -> &VerifySettings {
        &self.settings
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[KeyframeRecord] {
        &self.records
    }

    pub fn record_for_scan(&self, scan_index: usize) -> Option<&KeyframeRecord> {
        self.records.iter().find(|r| r.scan_index == scan_index)
    }

    /// Number of geometric verifications run so far.
    pub fn verifications(&self) -> usize {
        self.verifications
    }

    /// Nearest stored keyframe outside the exclusion window, if its
    /// descriptor distance is below the gate. Returns `(position, distance)`.
    pub fn query(&mut self, descriptor: &[f64]) -> Option<(usize, f64)> {
        let visible = self
            .records
            .len()
            .saturating_sub(self.settings.loop_closing.exclusion_keyframes);
        while self.indexed < visible {
            let d = self.records[self.indexed].descriptor.clone();
            self.tree.add(d, self.indexed).expect("descriptor dimension is fixed");
            self.indexed += 1;
        }
        if self.tree.size() == 0 {
            return None;
        }
        let (d2, &pos) = self.tree.nearest(descriptor, 1, &squared_euclidean).ok()?.into_iter().next()?;
        let d = d2.sqrt();
        (d < self.settings.loop_closing.descriptor_distance).then_some((pos, d))
    }

    /// Looks up and verifies a loop for `record`, then stores it.
    pub fn process(&mut self, record: KeyframeRecord) -> Option<LoopCandidate> {
        let found = self.query(&record.descriptor);
        let result = found.map(|(pos, _)| {
            self.verifications += 1;
            verify_and_estimate(&record, &self.records[pos], &self.settings)
        });
        self.records.push(record);
        result
    }
}
