//! Two-thread runtime: a front end (preprocessing, odometry, graph tracking,
//! relocalization) feeding a back end (loop closing, pose-graph
//! optimization, global map) through a bounded keyframe queue.
//!
//! The front end reports odometry as increments between consecutive valid
//! scans, so the back end's trajectory does not depend on when corrections
//! reach the front end. Corrections only re-anchor the front end's live
//! output frame, applied at scan boundaries.

use std::collections::HashMap;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{write_trajectory, ScanSource, Subsequence};
use crate::error::SlamError;
use crate::geometry::{Pose, Twist};
use crate::global_map::{write_graph_file, CloudAccumulator, GlobalGraphMap};
use crate::graph_map::LocalGraphMap;
use crate::loop_closing::{KeyframeRecord, LoopDetector, VerifySettings};
use crate::metrics::{evaluate_ate, evaluate_rel, Timings, TrajectoryMetrics};
use crate::odometry::{register, FailureThresholds, OdometryState};
use crate::point::{LabeledPoint, Scan};
use crate::pose_graph::{information, PoseGraph};
use crate::preprocess::{deskew, range_filter, voxel_downsample};
use crate::relocalization::{refine, relocalize_seeded, simulate_dropped_frames};
use crate::semantic_graph::SemanticGraph;
use crate::voxel_map::VoxelHashMap;

/// Keyframes the back-end queue holds before the front end blocks.
pub const KEYFRAME_QUEUE: usize = 8;

/// Odometry of one scan relative to the previous valid scan.
#[derive(Debug, Clone)]
pub struct OdometryEntry {
    pub scan: usize,
    /// `None` when tracking was lost on this scan.
    pub increment: Option<Pose>,
}

/// Sensor-frame graph of one tracked scan and the local map id of each node.
#[derive(Debug, Clone)]
pub struct ScanObservation {
    pub scan: usize,
    pub graph: SemanticGraph,
    pub local_ids: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct KeyframeMessage {
    pub scan_index: usize,
    /// Front-end pose at send time, in the corrected frame.
    pub pose: Pose,
    /// Sensor-frame graph of the keyframe scan.
    pub graph: SemanticGraph,
    pub local_ids: Vec<u64>,
    /// Downsampled sensor-frame points; the background is derived from them.
    pub points: Vec<LabeledPoint>,
    pub relocalized: bool,
    /// Every scan since the previous message, this one included.
    pub odometry: Vec<OdometryEntry>,
    pub observations: Vec<ScanObservation>,
}

#[derive(Debug, Clone)]
pub enum BackendMessage {
    Keyframe(KeyframeMessage),
    /// Scans after the last keyframe.
    Finish {
        odometry: Vec<OdometryEntry>,
        observations: Vec<ScanObservation>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocalizationEvent {
    pub scan: usize,
    pub matches: usize,
    pub inlier_ratio: f64,
    pub success: bool,
    /// Dense refinement confirmed the recovered pose.
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEvent {
    pub query: usize,
    pub candidate: usize,
    /// Query-to-candidate transform, row-major 3×4.
    pub transform: [f64; 12],
    pub descriptor_distance: f64,
    pub graph_similarity: f64,
    pub background_similarity: f64,
    pub merged_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationEvent {
    pub after_keyframe: usize,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadMode {
    /// Both roles interleaved on the calling thread.
    Single,
    /// Front end and back end on two worker threads.
    Dual,
}

/// Front-end state and per-scan processing.
pub struct FrontEnd {
    cfg: RunConfig,
    thresholds: FailureThresholds,
    state: OdometryState,
    graph_map: LocalGraphMap,
    drift: Pose,
    frame_shift: Pose,
    last_valid: Option<Pose>,
    valid_scans: usize,
    pending_odometry: Vec<OdometryEntry>,
    pending_observations: Vec<ScanObservation>,
    pub timings: Timings,
    pub relocalizations: Vec<RelocalizationEvent>,
    /// Sweep motion used to deskew each scan.
    pub deskew_motion: Vec<Pose>,
    /// Live poses in the corrected frame at processing time.
    pub live: Vec<Option<Pose>>,
}

impl FrontEnd {
    pub fn new(cfg: &RunConfig) -> Self {
        let map = VoxelHashMap::new(
            cfg.preprocess.voxel_size,
            cfg.local_map.max_points_per_voxel,
            cfg.local_map.radius,
        );
        FrontEnd {
            cfg: cfg.clone(),
            thresholds: FailureThresholds::from_config(&cfg.relocalization),
            state: OdometryState::new(map),
            graph_map: LocalGraphMap::new(cfg.graph.clone(), cfg.local_map.radius),
            drift: Pose::exp(&Twist::from_slice(&cfg.simulation.odometry_drift)),
            frame_shift: Pose::identity(),
            last_valid: None,
            valid_scans: 0,
            pending_odometry: Vec::new(),
            pending_observations: Vec::new(),
            timings: Timings::default(),
            relocalizations: Vec::new(),
            deskew_motion: Vec::new(),
            live: Vec::new(),
        }
    }

    /// Applies a world-frame correction from the back end.
    pub fn apply_correction(&mut self, correction: &Pose) {
        self.frame_shift = correction.compose(&self.frame_shift);
    }

    pub fn local_graph(&self) -> &LocalGraphMap {
        &self.graph_map
    }

    /// Processes the next scan; returns a message when it is a keyframe.
    pub fn process(&mut self, raw: &Scan) -> Option<KeyframeMessage> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let scan = range_filter(raw, cfg.preprocess.min_range, cfg.preprocess.max_range);
        // Sweeps taken before two poses exist cannot be deskewed; their
        // clusters are smeared, so they stay out of the global map.
        let compensated = !cfg.preprocess.deskew || self.valid_scans >= 2;
        let motion = if cfg.preprocess.deskew && self.state.last_pose().is_some() {
            *self.state.velocity()
        } else {
            Pose::identity()
        };
        self.deskew_motion.push(motion);
        let deskewed = deskew(&scan, &motion);
        let reg = voxel_downsample(&deskewed, cfg.preprocess.voxel_size);
        let current = SemanticGraph::from_points(&deskewed.points, &cfg.graph);
        self.timings.record("preprocess", start.elapsed());

        let (pose, relocalized) = self.estimate_pose(&scan, &reg, &current);

        let mut message = None;
        match pose {
            Some(pose) => {
                let t = Instant::now();
                self.state.integrate(&reg.points, &pose);
                let matches = self.graph_map.track(&current, &pose);
                let report = self.graph_map.update(&current, &pose, &matches);
                let local_ids: Vec<u64> = (0..current.nodes.len())
                    .map(|i| report.id_of(i).expect("every node is fused or inserted"))
                    .collect();
                self.timings.record("graph", t.elapsed());

                let increment = match &self.last_valid {
                    Some(prev) => prev.between(&pose).compose(&self.drift),
                    None => pose,
                };
                self.last_valid = Some(pose);
                self.valid_scans += 1;
                self.pending_odometry.push(OdometryEntry { scan: scan.index, increment: Some(increment) });
                if compensated {
                    self.pending_observations.push(ScanObservation {
                        scan: scan.index,
                        graph: current.clone(),
                        local_ids: local_ids.clone(),
                    });
                }
                let live = self.frame_shift.compose(&pose);
                self.live.push(Some(live));
                if scan.index.is_multiple_of(cfg.loop_closing.keyframe_interval) {
                    message = Some(KeyframeMessage {
                        scan_index: scan.index,
                        pose: live,
                        graph: current,
                        local_ids,
                        points: reg.points,
                        relocalized,
                        odometry: std::mem::take(&mut self.pending_odometry),
                        observations: std::mem::take(&mut self.pending_observations),
                    });
                }
            }
            None => {
                self.pending_odometry.push(OdometryEntry { scan: scan.index, increment: None });
                self.live.push(None);
            }
        }
        self.timings.record("frontend", start.elapsed());
        message
    }

    /// Registration with failure handling. Returns the pose, if any, and
    /// whether it came from relocalization.
    fn estimate_pose(&mut self, scan: &Scan, reg: &Scan, current: &SemanticGraph) -> (Option<Pose>, bool) {
        if self.state.map.is_empty() {
            let pose = self.state.predict();
            self.state.accept(pose);
            return (Some(pose), false);
        }
        let t = Instant::now();
        let initial = self.state.predict();
        let result = register(&self.state.map, &reg.points, &initial, &self.cfg.odometry, &self.thresholds);
        self.timings.record("odometry", t.elapsed());
        let velocity = *self.state.velocity();
        // Without two past poses there is no motion model to disagree with.
        let has_model = self.valid_scans >= 2;

        match result {
            Ok(r) if !r.failed || !has_model || !self.cfg.relocalization.enabled => {
                self.state.accept(r.pose);
                return (Some(r.pose), false);
            }
            Err(e) if !self.cfg.relocalization.enabled => {
                debug!("scan {}: registration failed: {e}", scan.index);
                self.state.reset_to(initial, velocity);
                return (None, false);
            }
            _ => {}
        }

        let t = Instant::now();
        let matches = self.graph_map.match_nodes(current);
        let pairs = matches.centroid_pairs(current, self.graph_map.graph());
        let outcome = relocalize_seeded(&pairs, &self.cfg.relocalization, scan.index);
        let mut refined_pose = None;
        if outcome.success {
            if let Ok(r) = refine(&self.state.map, &reg.points, &outcome.pose, &self.cfg.odometry, &self.thresholds) {
                if !r.failed {
                    refined_pose = Some(r.pose);
                }
            }
        }
        self.timings.record("relocalization", t.elapsed());
        self.relocalizations.push(RelocalizationEvent {
            scan: scan.index,
            matches: pairs.len(),
            inlier_ratio: outcome.inlier_ratio,
            success: outcome.success,
            refined: refined_pose.is_some(),
        });
        match refined_pose {
            Some(pose) => {
                debug!("scan {}: relocalized (I = {:.2})", scan.index, outcome.inlier_ratio);
                // The jump across the gap is not a velocity; keep the old one.
                self.state.reset_to(pose, velocity);
                (Some(pose), true)
            }
            None => {
                debug!("scan {}: tracking lost", scan.index);
                self.state.reset_to(initial, velocity);
                (None, false)
            }
        }
    }

    /// Flushes the scans after the last keyframe.
    pub fn finish(&mut self) -> BackendMessage {
        BackendMessage::Finish {
            odometry: std::mem::take(&mut self.pending_odometry),
            observations: std::mem::take(&mut self.pending_observations),
        }
    }
}

/// Back-end state: pose graph over all valid scans, loop detection and the
/// global map.
pub struct BackEnd {
    cfg: RunConfig,
    graph: Option<PoseGraph>,
    var_of: HashMap<usize, usize>,
    last_var: Option<usize>,
    /// Poses chained from raw odometry, never optimized.
    raw: HashMap<usize, Pose>,
    raw_last: Pose,
    detector: LoopDetector,
    keyframe_ids: HashMap<usize, Vec<u64>>,
    pub global: GlobalGraphMap,
    pub loops: Vec<LoopEvent>,
    pub optimizations: Vec<OptimizationEvent>,
    pub timings: Timings,
    pub keyframes: usize,
}

impl BackEnd {
    pub fn new(cfg: &RunConfig) -> Self {
        BackEnd {
            cfg: cfg.clone(),
            graph: None,
            var_of: HashMap::new(),
            last_var: None,
            raw: HashMap::new(),
            raw_last: Pose::identity(),
            detector: LoopDetector::new(VerifySettings::from_run(cfg)),
            keyframe_ids: HashMap::new(),
            global: GlobalGraphMap::new(cfg.global_map.merge_distance),
            loops: Vec::new(),
            optimizations: Vec::new(),
            timings: Timings::default(),
            keyframes: 0,
        }
    }

    pub fn pose_graph(&self) -> Option<&PoseGraph> {
        self.graph.as_ref()
    }

    pub fn pose_of(&self, scan: usize) -> Option<Pose> {
        let v = *self.var_of.get(&scan)?;
        self.graph.as_ref()?.pose(v).copied()
    }

    fn add_odometry(&mut self, entries: &[OdometryEntry]) -> Result<(), SlamError> {
        let pg = &self.cfg.pose_graph;
        let info = information(pg.odometry_sigma_translation, pg.odometry_sigma_rotation);
        for e in entries {
            let Some(inc) = e.increment else { continue };
            self.raw_last = self.raw_last.compose(&inc);
            self.raw.insert(e.scan, self.raw_last);
            let var = match (&mut self.graph, self.last_var) {
                (Some(graph), Some(prev)) => {
                    let init = graph.poses()[prev].compose(&inc);
                    let v = graph.add_variable(init);
                    graph.add_odometry_factor(prev, v, inc, info)?;
                    v
                }
                _ => {
                    self.graph = Some(PoseGraph::new(inc, pg.prior_sigma));
                    0
                }
            };
            self.var_of.insert(e.scan, var);
            self.last_var = Some(var);
        }
        Ok(())
    }

    fn absorb(&mut self, observations: &[ScanObservation]) {
        for o in observations {
            if let Some(pose) = self.pose_of(o.scan) {
                self.global.absorb_keyframe(o.scan, &pose, &o.graph, &o.local_ids);
            }
        }
    }

    /// Consumes one message; returns a world-frame correction for the front
    /// end when the pose graph was re-optimized.
    pub fn handle(&mut self, message: BackendMessage) -> Result<Option<Pose>, SlamError> {
        match message {
            BackendMessage::Finish { odometry, observations } => {
                self.add_odometry(&odometry)?;
                let t = Instant::now();
                self.absorb(&observations);
                self.timings.record("global_map", t.elapsed());
                Ok(None)
            }
            BackendMessage::Keyframe(msg) => self.handle_keyframe(msg),
        }
    }

    fn handle_keyframe(&mut self, msg: KeyframeMessage) -> Result<Option<Pose>, SlamError> {
        let start = Instant::now();
        self.add_odometry(&msg.odometry)?;
        let t = Instant::now();
        self.absorb(&msg.observations);
        self.timings.record("global_map", t.elapsed());
        self.keyframes += 1;
        let Some(pose) = self.pose_of(msg.scan_index) else {
            return Err(SlamError::Pipeline(format!("keyframe {} has no pose variable", msg.scan_index)));
        };
        self.keyframe_ids.insert(msg.scan_index, msg.local_ids);
        if !self.cfg.loop_closing.enabled {
            return Ok(None);
        }

        let t = Instant::now();
        let record = KeyframeRecord::new(
            msg.scan_index,
            msg.graph,
            msg.points,
            pose,
            &self.cfg.loop_closing,
            &self.cfg.graph,
        );
        let candidate = self.detector.process(record);
        self.timings.record("loop_closing", t.elapsed());
        let Some(lc) = candidate.filter(|c| c.accepted) else {
            self.timings.record("backend", start.elapsed());
            return Ok(None);
        };
        let (Some(&vi), Some(&vj)) = (self.var_of.get(&lc.candidate), self.var_of.get(&lc.query)) else {
            return Ok(None);
        };

        let t = Instant::now();
        let pg = self.cfg.pose_graph.clone();
        let graph = self.graph.as_mut().expect("a keyframe implies a pose graph");
        graph.add_loop_factor(vi, vj, lc.transform, information(pg.loop_sigma_translation, pg.loop_sigma_rotation))?;
        let last = self.last_var.expect("a keyframe implies a variable");
        let before = graph.poses()[last];
        let report = graph.optimize(&pg)?;
        let correction = graph.poses()[last].compose(&before.inverse());
        self.timings.record("optimization", t.elapsed());
        self.optimizations.push(OptimizationEvent {
            after_keyframe: msg.scan_index,
            iterations: report.iterations,
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
        });

        let t = Instant::now();
        let poses: HashMap<usize, Pose> =
            self.var_of.iter().map(|(&s, &v)| (s, graph.poses()[v])).collect();
        self.global.refresh_poses(|s| poses.get(&s).copied());
        let q_ids = &self.keyframe_ids[&lc.query];
        let c_ids = &self.keyframe_ids[&lc.candidate];
        let pairs: Vec<(u64, u64)> =
            lc.node_matches.matches.iter().map(|m| (q_ids[m.current], c_ids[m.target])).collect();
        let merged = self.global.reconcile_loop(&pairs);
        self.timings.record("global_map", t.elapsed());

        info!(
            "loop {} -> {} accepted (graph {:.2}, background {:.2}), {} nodes merged",
            lc.query, lc.candidate, lc.graph_similarity, lc.background_similarity, merged
        );
        self.loops.push(LoopEvent {
            query: lc.query,
            candidate: lc.candidate,
            transform: lc.transform.to_row_major_3x4(),
            descriptor_distance: lc.descriptor_distance,
            graph_similarity: lc.graph_similarity,
            background_similarity: lc.background_similarity,
            merged_nodes: merged,
        });
        self.timings.record("backend", start.elapsed());
        Ok(Some(correction))
    }

    /// Final trajectory with one slot per scan.
    pub fn trajectory(&self, scans: usize) -> Vec<Option<Pose>> {
        (0..scans).map(|s| self.pose_of(s)).collect()
    }

    /// Trajectory chained from raw odometry without optimization.
    pub fn odometry_trajectory(&self, scans: usize) -> Vec<Option<Pose>> {
        (0..scans).map(|s| self.raw.get(&s).copied()).collect()
    }
}

/// Everything a run produces.
pub struct RunOutput {
    /// Optimized pose per input scan; `None` for lost scans.
    pub trajectory: Vec<Option<Pose>>,
    /// Raw odometry chain per input scan.
    pub odometry: Vec<Option<Pose>>,
    /// Front-end poses in the corrected frame at processing time.
    pub live: Vec<Option<Pose>>,
    /// Source index of each processed scan (differs from the slot when
    /// frames were dropped).
    pub source_indices: Vec<usize>,
    pub deskew_motion: Vec<Pose>,
    pub groundtruth: Option<Vec<Pose>>,
    pub global: GlobalGraphMap,
    pub loops: Vec<LoopEvent>,
    pub relocalizations: Vec<RelocalizationEvent>,
    pub optimizations: Vec<OptimizationEvent>,
    pub keyframes: usize,
    pub metrics: TrajectoryMetrics,
    /// ATE of the raw odometry chain, when ground truth exists.
    pub odometry_ate: Option<f64>,
}

impl RunOutput {
    pub fn run_log(&self) -> RunLog {
        RunLog {
            scans: self.trajectory.len(),
            valid_poses: self.trajectory.iter().filter(|p| p.is_some()).count(),
            keyframes: self.keyframes,
            global_nodes: self.global.len(),
            loops: self.loops.clone(),
            relocalizations: self.relocalizations.clone(),
            optimizations: self.optimizations.clone(),
            odometry_ate: self.odometry_ate,
            metrics: self.metrics.clone(),
        }
    }
}

/// Machine-readable summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub scans: usize,
    pub valid_poses: usize,
    pub keyframes: usize,
    pub global_nodes: usize,
    pub loops: Vec<LoopEvent>,
    pub relocalizations: Vec<RelocalizationEvent>,
    pub optimizations: Vec<OptimizationEvent>,
    pub odometry_ate: Option<f64>,
    pub metrics: TrajectoryMetrics,
}

fn run_single(cfg: &RunConfig, source: &dyn ScanSource) -> Result<(FrontEnd, BackEnd), SlamError> {
    let mut front = FrontEnd::new(cfg);
    let mut back = BackEnd::new(cfg);
    let mut pending: Option<Pose> = None;
    for k in 0..source.len() {
        if let Some(c) = pending.take() {
            front.apply_correction(&c);
        }
        let t = Instant::now();
        let scan = source.scan(k)?;
        front.timings.record("read", t.elapsed());
        if let Some(msg) = front.process(&scan) {
            pending = back.handle(BackendMessage::Keyframe(msg))?;
        }
    }
    back.handle(front.finish())?;
    Ok((front, back))
}

fn run_dual(cfg: &RunConfig, source: &dyn ScanSource) -> Result<(FrontEnd, BackEnd), SlamError> {
    let (tx, rx) = sync_channel::<BackendMessage>(KEYFRAME_QUEUE);
    let correction: Mutex<Option<Pose>> = Mutex::new(None);
    let correction = &correction;
    std::thread::scope(|s| {
        let front = s.spawn(move || -> Result<FrontEnd, SlamError> {
            let mut front = FrontEnd::new(cfg);
            for k in 0..source.len() {
                let pending = correction.lock().expect("correction lock poisoned").take();
                if let Some(c) = pending {
                    front.apply_correction(&c);
                }
                let t = Instant::now();
                let scan = source.scan(k)?;
                front.timings.record("read", t.elapsed());
                if let Some(msg) = front.process(&scan) {
                    tx.send(BackendMessage::Keyframe(msg))
                        .map_err(|_| SlamError::Pipeline("back end stopped".into()))?;
                }
            }
            tx.send(front.finish()).map_err(|_| SlamError::Pipeline("back end stopped".into()))?;
            Ok(front)
        });
        let back = s.spawn(move || -> Result<BackEnd, SlamError> {
            let mut back = BackEnd::new(cfg);
            for msg in rx {
                if let Some(c) = back.handle(msg)? {
                    let mut slot = correction.lock().expect("correction lock poisoned");
                    *slot = Some(match *slot {
                        Some(prev) => c.compose(&prev),
                        None => c,
                    });
                }
            }
            Ok(back)
        });
        let front = front.join().map_err(|_| SlamError::Pipeline("front-end thread panicked".into()))?;
        let back = back.join().map_err(|_| SlamError::Pipeline("back-end thread panicked".into()))?;
        // A back-end failure makes the front end report a closed queue, so
        // prefer the back-end error.
        match (front, back) {
            (Ok(f), Ok(b)) => Ok((f, b)),
            (_, Err(e)) | (Err(e), _) => Err(e),
        }
    })
}

/// Runs the full pipeline over `source`, applying the configured frame
/// drops first.
pub fn run_slam(cfg: &RunConfig, source: &dyn ScanSource, mode: ThreadMode) -> Result<RunOutput, SlamError> {
    cfg.validate()?;
    let sim = &cfg.simulation;
    let kept = simulate_dropped_frames(source.len(), sim.drop_frames, sim.drop_window, sim.seed);
    let sub = Subsequence::new(source, kept.clone());
    let n = sub.len();
    info!("processing {n} of {} scans", source.len());

    let (front, back) = match mode {
        ThreadMode::Single => run_single(cfg, &sub)?,
        ThreadMode::Dual => run_dual(cfg, &sub)?,
    };

    let trajectory = back.trajectory(n);
    let odometry = back.odometry_trajectory(n);
    let groundtruth = sub.groundtruth()?.filter(|gt| gt.len() == n);
    let mut timings = front.timings.clone();
    timings.merge(&back.timings);
    let mut metrics = TrajectoryMetrics {
        valid_poses: trajectory.iter().filter(|p| p.is_some()).count(),
        timings: timings.summary(),
        ..Default::default()
    };
    let mut odometry_ate = None;
    if let Some(gt) = &groundtruth {
        metrics.ate_rmse = evaluate_ate(&trajectory, gt).ok();
        metrics.relative = evaluate_rel(&trajectory, gt).ok();
        odometry_ate = evaluate_ate(&odometry, gt).ok();
    } else {
        warn!("no ground truth; metrics skipped");
    }
    Ok(RunOutput {
        trajectory,
        odometry,
        live: front.live,
        source_indices: kept,
        deskew_motion: front.deskew_motion,
        groundtruth,
        global: back.global,
        loops: back.loops,
        relocalizations: front.relocalizations,
        optimizations: back.optimizations,
        keyframes: back.keyframes,
        metrics,
        odometry_ate,
    })
}

/// Global point cloud: every valid scan, deskewed as during the run, moved by
/// its final pose and downsampled at `voxel`.
pub fn build_cloud(
    source: &dyn ScanSource,
    output: &RunOutput,
    cfg: &RunConfig,
) -> Result<CloudAccumulator, SlamError> {
    let mut acc = CloudAccumulator::new(cfg.preprocess.voxel_size);
    for (slot, pose) in output.trajectory.iter().enumerate() {
        let Some(pose) = pose else { continue };
        let scan = source.scan(output.source_indices[slot])?;
        let scan = range_filter(&scan, cfg.preprocess.min_range, cfg.preprocess.max_range);
        let scan = deskew(&scan, &output.deskew_motion[slot]);
        acc.add_scan(&scan.points, pose);
    }
    Ok(acc)
}

/// Writes `trajectory.txt`, `odometry.txt`, `graph.txt`, `map.ply` and
/// `run_log.json` into `dir`.
pub fn export_maps(
    dir: &Path,
    source: &dyn ScanSource,
    output: &RunOutput,
    cfg: &RunConfig,
) -> Result<(), SlamError> {
    std::fs::create_dir_all(dir).map_err(SlamError::io(dir))?;
    write_trajectory(&dir.join("trajectory.txt"), &output.trajectory)?;
    write_trajectory(&dir.join("odometry.txt"), &output.odometry)?;
    let graph_path = dir.join("graph.txt");
    write_graph_file(&graph_path, &output.global.to_graph(&cfg.graph)).map_err(SlamError::io(&graph_path))?;
    let cloud_path = dir.join("map.ply");
    build_cloud(source, output, cfg)?
        .write_ply_file(&cloud_path)
        .map_err(SlamError::io(&cloud_path))?;
    let log_path = dir.join("run_log.json");
    let log = serde_json::to_string_pretty(&output.run_log())
        .map_err(|e| SlamError::Pipeline(format!("run log: {e}")))?;
    std::fs::write(&log_path, log).map_err(SlamError::io(&log_path))?;
    Ok(())
}
