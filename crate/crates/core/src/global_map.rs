//! Global semantic graph map with per-node provenance, duplicate
//! suppression at loop closures, and map export.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::config::GraphConfig;
use crate::geometry::Pose;
use crate::point::{LabeledPoint, SemanticClass};
use crate::semantic_graph::{build_edges, InstanceNode, SemanticGraph};
use crate::voxel_map::{voxel_key, VoxelKey, VoxelKeyHasher};

/// One sighting of a node in a keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub scan: usize,
    /// Local graph map id at the time of the sighting.
    pub local_id: u64,
    /// Sensor-frame centroid and box.
    pub centroid: Vector3<f64>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalNode {
    pub id: u64,
    pub label: SemanticClass,
    pub centroid: Vector3<f64>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub point_count: usize,
    pub observations: Vec<Observation>,
}

impl GlobalNode {
    fn as_instance(&self) -> InstanceNode {
        InstanceNode {
            id: self.id,
            label: self.label,
            centroid: self.centroid,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            point_count: self.point_count,
            descriptor: Vec::new(),
            observations: self.observations.len() as u32,
        }
    }

    /// Recomputes world attributes from the observations.
    fn refresh(&mut self, pose_of: &dyn Fn(usize) -> Option<Pose>) {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for o in &self.observations {
            let Some(pose) = pose_of(o.scan) else { continue };
            sum += pose.transform_point(&o.centroid);
            n += 1;
            let moved = InstanceNode {
                id: 0,
                label: self.label,
                centroid: o.centroid,
                bbox_min: o.bbox_min,
                bbox_max: o.bbox_max,
                point_count: o.point_count,
                descriptor: Vec::new(),
                observations: 1,
            }
            .transformed(&pose);
            lo = lo.inf(&moved.bbox_min);
            hi = hi.sup(&moved.bbox_max);
        }
        if n > 0 {
            self.centroid = sum / n as f64;
            self.bbox_min = lo.inf(&self.centroid);
            self.bbox_max = hi.sup(&self.centroid);
        }
        self.point_count = self.observations.iter().map(|o| o.point_count).max().unwrap_or(0);
    }
}

fn box_contains(min: &Vector3<f64>, max: &Vector3<f64>, p: &Vector3<f64>) -> bool {
    (0..3).all(|k| min[k] <= p[k] && p[k] <= max[k])
}

/// Same class and either close centroids or one centroid inside the other's
/// box. Partial views shift a centroid but keep it inside the full extent.
fn same_instance(a: &GlobalNode, b: &InstanceNode, merge_distance: f64) -> bool {
    a.label == b.label
        && ((a.centroid - b.centroid).norm() < merge_distance
            || box_contains(&a.bbox_min, &a.bbox_max, &b.centroid)
            || box_contains(&b.bbox_min, &b.bbox_max, &a.centroid))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AbsorbReport {
    pub inserted: usize,
    pub fused: usize,
}

#[derive(Debug, Clone)]
pub struct GlobalGraphMap {
    nodes: Vec<GlobalNode>,
    /// Local id → global id.
    aliases: HashMap<u64, u64>,
    /// Pose used for each absorbed keyframe until poses are refreshed.
    keyframe_poses: HashMap<usize, Pose>,
    merge_distance: f64,
    next_id: u64,
}

impl GlobalGraphMap {
    pub fn new(merge_distance: f64) -> Self {
        GlobalGraphMap {
            nodes: Vec::new(),
            aliases: HashMap::new(),
            keyframe_poses: HashMap::new(),
            merge_distance,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GlobalNode] {
        &self.nodes
    }

    pub fn global_id(&self, local_id: u64) -> Option<u64> {
        self.aliases.get(&local_id).copied()
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    fn pose_lookup(&self) -> impl Fn(usize) -> Option<Pose> {
        let poses = self.keyframe_poses.clone();
        move |scan| poses.get(&scan).copied()
    }

    /// Adds the nodes of a keyframe observed at `pose`. `local_ids[i]` is
    /// the local map id of `graph.nodes[i]`. Known ids are fused; unknown
    /// ids join a same-class node within the merge distance, else become new
    /// nodes.
    pub fn absorb_keyframe(
        &mut self,
        scan: usize,
        pose: &Pose,
        graph: &SemanticGraph,
        local_ids: &[u64],
    ) -> AbsorbReport {
        assert_eq!(graph.nodes.len(), local_ids.len());
        self.keyframe_poses.insert(scan, *pose);
        let mut report = AbsorbReport::default();
        for (node, &local) in graph.nodes.iter().zip(local_ids) {
            let obs = Observation {
                scan,
                local_id: local,
                centroid: node.centroid,
                bbox_min: node.bbox_min,
                bbox_max: node.bbox_max,
                point_count: node.point_count,
            };
            let moved = node.transformed(pose);
            let world = moved.centroid;
            let target = self.aliases.get(&local).copied().or_else(|| {
                self.nodes
                    .iter()
                    .filter(|n| same_instance(n, &moved, self.merge_distance))
                    .map(|n| (n.id, (n.centroid - world).norm()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(id, _)| id)
            });
            let idx = match target.and_then(|id| self.position(id)) {
                Some(idx) => {
                    report.fused += 1;
                    idx
                }
                None => {
                    report.inserted += 1;
                    let id = self.next_id;
                    self.next_id += 1;
                    self.nodes.push(GlobalNode {
                        id,
                        label: node.label,
                        centroid: world,
                        bbox_min: world,
                        bbox_max: world,
                        point_count: 0,
                        observations: Vec::new(),
                    });
                    self.nodes.len() - 1
                }
            };
            self.aliases.insert(local, self.nodes[idx].id);
            self.nodes[idx].observations.push(obs);
            let lookup = |s: usize| if s == scan { Some(*pose) } else { self.keyframe_poses.get(&s).copied() };
            let mut n = self.nodes[idx].clone();
            n.refresh(&lookup);
            self.nodes[idx] = n;
        }
        report
    }

    /// Merges global node `from` into `into`.
    fn merge(&mut self, from: u64, into: u64) -> bool {
        if from == into {
            return false;
        }
        let (Some(a), Some(_)) = (self.position(from), self.position(into)) else {
            return false;
        };
        let removed = self.nodes.remove(a);
        let b = self.position(into).expect("target still present");
        self.nodes[b].observations.extend(removed.observations);
        for v in self.aliases.values_mut() {
            if *v == from {
                *v = into;
            }
        }
        let lookup = self.pose_lookup();
        let mut n = self.nodes[b].clone();
        n.refresh(&lookup);
        self.nodes[b] = n;
        true
    }

    /// Folds the query-side node of every loop match into its candidate-side
    /// node, then suppresses any remaining same-class duplicates. Matches
    /// are `(query local id, candidate local id)`. Returns the merge count.
    pub fn reconcile_loop(&mut self, matches: &[(u64, u64)]) -> usize {
        let mut merged = 0;
        for &(q, c) in matches {
            let (Some(gq), Some(gc)) = (self.global_id(q), self.global_id(c)) else {
                continue;
            };
            if self.label_of(gq) != self.label_of(gc) {
                continue;
            }
            // Keep the older node so ids stay stable.
            let (from, into) = if gq < gc { (gc, gq) } else { (gq, gc) };
            if self.merge(from, into) {
                merged += 1;
            }
        }
        merged + self.suppress_duplicates()
    }

    fn label_of(&self, id: u64) -> Option<SemanticClass> {
        self.position(id).map(|i| self.nodes[i].label)
    }

    /// Merges same-class nodes that are closer than the merge distance or
    /// hold each other's centroid in their box, until none remain. Returns
    /// the merge count.
    pub fn suppress_duplicates(&mut self) -> usize {
        let mut merged = 0;
        loop {
            let mut pair = None;
            'outer: for i in 0..self.nodes.len() {
                for j in i + 1..self.nodes.len() {
                    let (a, b) = (&self.nodes[i], &self.nodes[j]);
                    if same_instance(a, &b.as_instance(), self.merge_distance) {
                        pair = Some((a.id.max(b.id), a.id.min(b.id)));
                        break 'outer;
                    }
                }
            }
            match pair {
                Some((from, into)) => {
                    self.merge(from, into);
                    merged += 1;
                }
                None => return merged,
            }
        }
    }

    /// Replaces keyframe poses (for instance after optimization) and
    /// recomputes every node from its observations.
    pub fn refresh_poses(&mut self, pose_of: impl Fn(usize) -> Option<Pose>) -> usize {
        let scans: Vec<usize> = self.keyframe_poses.keys().copied().collect();
        for s in scans {
            if let Some(p) = pose_of(s) {
                self.keyframe_poses.insert(s, p);
            }
        }
        let lookup = self.pose_lookup();
        let refreshed: Vec<GlobalNode> = self
            .nodes
            .iter()
            .map(|n| {
                let mut n = n.clone();
                n.refresh(&lookup);
                n
            })
            .collect();
        self.nodes = refreshed;
        self.suppress_duplicates()
    }

    /// Nodes with edges recomputed from current positions.
    pub fn to_graph(&self, cfg: &GraphConfig) -> SemanticGraph {
        let nodes: Vec<InstanceNode> = self.nodes.iter().map(GlobalNode::as_instance).collect();
        let edges = build_edges(&nodes, cfg.edge_radius);
        SemanticGraph { nodes, edges }
    }
}

/// Line-oriented text export: a header, node lines, then edge lines that
/// reference node ids.
pub fn write_graph<W: Write>(out: &mut W, graph: &SemanticGraph) -> std::io::Result<()> {
    writeln!(out, "# semslam graph v1")?;
    writeln!(out, "# node id class cx cy cz min_x min_y min_z max_x max_y max_z count")?;
    writeln!(out, "# edge id_a id_b length")?;
    writeln!(out, "nodes {}", graph.nodes.len())?;
    for n in &graph.nodes {
        writeln!(
            out,
            "node {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
            n.id,
            n.label.name(),
            n.centroid.x,
            n.centroid.y,
            n.centroid.z,
            n.bbox_min.x,
            n.bbox_min.y,
            n.bbox_min.z,
            n.bbox_max.x,
            n.bbox_max.y,
            n.bbox_max.z,
            n.observations
        )?;
    }
    writeln!(out, "edges {}", graph.edges.len())?;
    for e in &graph.edges {
        writeln!(out, "edge {} {} {:.6}", graph.nodes[e.a].id, graph.nodes[e.b].id, e.length)?;
    }
    Ok(())
}

pub fn write_graph_file(path: &Path, graph: &SemanticGraph) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_graph(&mut w, graph)?;
    w.flush()
}

/// Accumulates world-frame points, keeping the first point per voxel.
#[derive(Debug, Clone)]
pub struct CloudAccumulator {
    voxel: f64,
    seen: HashSet<VoxelKey, VoxelKeyHasher>,
    points: Vec<([f32; 3], u8)>,
}

impl CloudAccumulator {
    pub fn new(voxel: f64) -> Self {
        CloudAccumulator {
            voxel,
            seen: HashSet::with_hasher(VoxelKeyHasher),
            points: Vec::new(),
        }
    }

    /// Adds sensor-frame `points` observed at `pose`.
    pub fn add_scan(&mut self, points: &[LabeledPoint], pose: &Pose) {
        for p in points {
            let w = pose.transform_point(&p.position);
            if self.seen.insert(voxel_key(&w, self.voxel)) {
                self.points.push(([w.x as f32, w.y as f32, w.z as f32], p.label.code()));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[([f32; 3], u8)] {
        &self.points
    }

    /// Binary little-endian PLY with float x, y, z and a uchar class code.
    pub fn write_ply<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(
            out,
            "ply\nformat binary_little_endian 1.0\ncomment semslam global map\n\
             comment class codes: {}\nelement vertex {}\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar class\nend_header\n",
            SemanticClass::ALL
                .iter()
                .map(|c| format!("{}={}", c.code(), c.name()))
                .collect::<Vec<_>>()
                .join(" "),
            self.points.len()
        )?;
        for (p, c) in &self.points {
            for v in p {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&[*c])?;
        }
        Ok(())
    }

    pub fn write_ply_file(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ply(&mut w)?;
        w.flush()
    }
}

/// Parses the binary PLY written by [`CloudAccumulator::write_ply`].
pub fn read_ply(bytes: &[u8]) -> Option<Vec<([f32; 3], u8)>> {
    let marker = b"end_header\n";
    let end = bytes.windows(marker.len()).position(|w| w == marker)? + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).ok()?;
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))?
        .trim()
        .parse()
        .ok()?;
    let body = &bytes[end..];
    if body.len() != count * 13 {
        return None;
    }
    Some(
        body.chunks_exact(13)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes([c[k], c[k + 1], c[k + 2], c[k + 3]]);
                ([f(0), f(4), f(8)], c[12])
            })
            .collect(),
    )
}
