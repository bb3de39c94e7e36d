//! Run configuration.
//!
//! The on-disk form is TOML. Every key is optional; missing keys take the
//! defaults below. Unknown keys are rejected so that typos surface early.
//!
//! ```toml
//! [preprocess]
//! voxel_size = 0.5            # v
//!
//! [local_map]
//! max_points_per_voxel = 20   # N_max
//! radius = 100.0              # d_max
//!
//! [odometry]
//! convergence = 1e-4          # γ
//! max_correspondence_distance = 2.0
//! max_iterations = 100
//! [odometry.weights]
//! pole = 1.2
//!
//! [relocalization]
//! distance_threshold = 0.12   # t_o, meters
//! angle_threshold = 0.01      # r_o, radians
//! inlier_distance = 0.2       # τ
//! inlier_ratio = 0.43         # I_r
//!
//! [loop_closing]
//! keyframe_interval = 5       # n
//! descriptor_distance = 0.1   # l_v
//! graph_similarity = 0.5      # l_g
//! background_similarity = 0.58 # l_b
//! ```
//!
//! See the struct definitions for the full key list.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::point::SemanticClass;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config value out of range: {key} = {value} ({expected})")]
    Range {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub local_map: LocalMapConfig,
    pub odometry: OdometryConfig,
    pub relocalization: RelocalizationConfig,
    pub graph: GraphConfig,
    pub loop_closing: LoopClosingConfig,
    pub pose_graph: PoseGraphConfig,
    pub global_map: GlobalMapConfig,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Voxel side for downsampling, meters.
    pub voxel_size: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub deskew: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            voxel_size: 0.5,
            min_range: 1.0,
            max_range: 120.0,
            deskew: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalMapConfig {
    pub max_points_per_voxel: usize,
    /// Voxels farther than this from the sensor are dropped, meters.
    pub radius: f64,
}

impl Default for LocalMapConfig {
    fn default() -> Self {
        LocalMapConfig {
            max_points_per_voxel: 20,
            radius: 100.0,
        }
    }
}

/// Residual weight per semantic class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightTable {
    pub other: f64,
    pub vehicle: f64,
    pub pole: f64,
    pub trunk: f64,
    pub building: f64,
    pub road: f64,
    pub vegetation: f64,
}

impl WeightTable {
    pub fn uniform(w: f64) -> Self {
        WeightTable {
            other: w,
            vehicle: w,
            pole: w,
            trunk: w,
            building: w,
            road: w,
            vegetation: w,
        }
    }

    #[inline]
    pub fn weight(&self, class: SemanticClass) -> f64 {
        match class {
            SemanticClass::Other => self.other,
            SemanticClass::Vehicle => self.vehicle,
            SemanticClass::Pole => self.pole,
            SemanticClass::Trunk => self.trunk,
            SemanticClass::Building => self.building,
            SemanticClass::Road => self.road,
            SemanticClass::Vegetation => self.vegetation,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        WeightTable {
            other: self.other * c,
            vehicle: self.vehicle * c,
            pole: self.pole * c,
            trunk: self.trunk * c,
            building: self.building * c,
            road: self.road * c,
            vegetation: self.vegetation * c,
        }
    }

    fn all(&self) -> [f64; 7] {
        SemanticClass::ALL.map(|c| self.weight(c))
    }
}

impl Default for WeightTable {
    /// Pole-like classes get 1.2, everything else 1.0.
    fn default() -> Self {
        WeightTable {
            pole: 1.2,
            trunk: 1.2,
            ..WeightTable::uniform(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    /// ICP stops once the correction twist norm drops below this.
    pub convergence: f64,
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub min_correspondences: usize,
    pub weights: WeightTable,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            convergence: 1e-4,
            max_correspondence_distance: 2.0,
            max_iterations: 100,
            min_correspondences: 10,
            weights: WeightTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelocalizationConfig {
    pub enabled: bool,
    /// Translation disagreement between prediction and registration that
    /// flags a failure, meters.
    pub distance_threshold: f64,
    /// Rotation disagreement that flags a failure, radians.
    pub angle_threshold: f64,
    pub inlier_distance: f64,
    pub inlier_ratio: f64,
    pub ransac_trials: usize,
    pub early_exit_ratio: f64,
    pub seed: u64,
}

impl Default for RelocalizationConfig {
    fn default() -> Self {
        RelocalizationConfig {
            enabled: true,
            distance_threshold: 0.12,
            angle_threshold: 0.01,
            inlier_distance: 0.2,
            inlier_ratio: 0.43,
            ransac_trials: 500,
            early_exit_ratio: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Classes that become graph nodes, in descriptor order.
    pub classes: Vec<SemanticClass>,
    pub vehicle_cluster_distance: f64,
    /// Cluster distance for poles and trunks.
    pub thin_cluster_distance: f64,
    pub min_cluster_points: usize,
    pub edge_radius: f64,
    pub descriptor_bins: usize,
    pub descriptor_bin_width: f64,
    pub match_candidates: usize,
    /// Pairwise-distance slack for outlier pruning, meters.
    pub consistency_slack: f64,
    /// World-frame gate for accepting a tracked match, meters.
    pub track_gate: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            classes: vec![SemanticClass::Vehicle, SemanticClass::Pole, SemanticClass::Trunk],
            vehicle_cluster_distance: 0.5,
            thin_cluster_distance: 0.3,
            min_cluster_points: 5,
            edge_radius: 60.0,
            descriptor_bins: 6,
            descriptor_bin_width: 10.0,
            match_candidates: 3,
            consistency_slack: 0.4,
            track_gate: 1.0,
        }
    }
}

impl GraphConfig {
    pub fn cluster_distance(&self, class: SemanticClass) -> f64 {
        match class {
            SemanticClass::Vehicle => self.vehicle_cluster_distance,
            _ => self.thin_cluster_distance,
        }
    }

    pub fn class_slot(&self, class: SemanticClass) -> Option<usize> {
        self.classes.iter().position(|c| *c == class)
    }

    pub fn is_graph_class(&self, class: SemanticClass) -> bool {
        self.classes.contains(&class)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.classes.len() * (self.descriptor_bins + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopClosingConfig {
    pub enabled: bool,
    pub keyframe_interval: usize,
    /// Maximum scan-descriptor distance for verification.
    pub descriptor_distance: f64,
    /// Minimum graph similarity for acceptance.
    pub graph_similarity: f64,
    /// Minimum background similarity for acceptance.
    pub background_similarity: f64,
    /// Most recent keyframes excluded from retrieval.
    pub exclusion_keyframes: usize,
    pub background_match_distance: f64,
    pub height_bins: usize,
    pub range_bins: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub max_range: f64,
    pub pair_distance_bins: usize,
    pub pair_distance_max: f64,
}

impl Default for LoopClosingConfig {
    fn default() -> Self {
        LoopClosingConfig {
            enabled: true,
            keyframe_interval: 5,
            descriptor_distance: 0.1,
            graph_similarity: 0.5,
            background_similarity: 0.58,
            exclusion_keyframes: 50,
            background_match_distance: 0.5,
            height_bins: 8,
            range_bins: 8,
            min_height: -3.0,
            max_height: 15.0,
            max_range: 80.0,
            pair_distance_bins: 6,
            pair_distance_max: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseGraphConfig {
    pub odometry_sigma_translation: f64,
    pub odometry_sigma_rotation: f64,
    pub loop_sigma_translation: f64,
    pub loop_sigma_rotation: f64,
    pub prior_sigma: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        PoseGraphConfig {
            odometry_sigma_translation: 0.05,
            odometry_sigma_rotation: 0.005,
            loop_sigma_translation: 0.1,
            loop_sigma_rotation: 0.01,
            prior_sigma: 1e-4,
            max_iterations: 50,
            relative_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalMapConfig {
    /// Same-class nodes closer than this are one instance, meters.
    pub merge_distance: f64,
}

impl Default for GlobalMapConfig {
    fn default() -> Self {
        GlobalMapConfig {
            merge_distance: 0.5,
        }
    }
}

/// Perturbations for robustness experiments. All off by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Consecutive scans removed per window (`r_n`).
    pub drop_frames: usize,
    /// Window length in scans (`r_m`).
    pub drop_window: usize,
    pub seed: u64,
    /// Bias `[ω; ρ]` composed onto every odometry increment reported to the
    /// back end. Emulates a drifting odometry source.
    pub odometry_drift: [f64; 6],
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            drop_frames: 0,
            drop_window: 200,
            seed: 0,
            odometry_drift: [0.0; 6],
        }
    }
}


fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Range {
            key,
            value: v.to_string(),
            expected: "finite and > 0",
        })
    }
}

fn at_least_one(key: &'static str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(ConfigError::Range {
            key,
            value: v.to_string(),
            expected: ">= 1",
        })
    }
}

fn unit_interval(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(ConfigError::Range {
            key,
            value: v.to_string(),
            expected: "in (0, 1]",
        })
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// (`0.25`, `true`, `[0, 0, 0.01, 0, 0, 0]`), falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).expect("config is always serializable");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(item.to_string()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(item.to_string()));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let mut node = &mut root;
            for part in &path[..path.len() - 1] {
                node = node
                    .get_mut(*part)
                    .filter(|n| n.is_table())
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            }
            let table = node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            let last = path[path.len() - 1];
            if !table.contains_key(last) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = root.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.preprocess;
        positive("preprocess.voxel_size", p.voxel_size)?;
        positive("preprocess.min_range", p.min_range)?;
        positive("preprocess.max_range", p.max_range)?;
        if p.max_range <= p.min_range {
            return Err(ConfigError::Range {
                key: "preprocess.max_range",
                value: p.max_range.to_string(),
                expected: "> preprocess.min_range",
            });
        }
        at_least_one("local_map.max_points_per_voxel", self.local_map.max_points_per_voxel)?;
        positive("local_map.radius", self.local_map.radius)?;

        let o = &self.odometry;
        positive("odometry.convergence", o.convergence)?;
        positive("odometry.max_correspondence_distance", o.max_correspondence_distance)?;
        at_least_one("odometry.max_iterations", o.max_iterations)?;
        at_least_one("odometry.min_correspondences", o.min_correspondences)?;
        for w in o.weights.all() {
            positive("odometry.weights", w)?;
        }

        let r = &self.relocalization;
        positive("relocalization.distance_threshold", r.distance_threshold)?;
        positive("relocalization.angle_threshold", r.angle_threshold)?;
        positive("relocalization.inlier_distance", r.inlier_distance)?;
        unit_interval("relocalization.inlier_ratio", r.inlier_ratio)?;
        at_least_one("relocalization.ransac_trials", r.ransac_trials)?;
        unit_interval("relocalization.early_exit_ratio", r.early_exit_ratio)?;

        let g = &self.graph;
        if g.classes.is_empty() {
            return Err(ConfigError::Range {
                key: "graph.classes",
                value: "[]".into(),
                expected: "at least one class",
            });
        }
        positive("graph.vehicle_cluster_distance", g.vehicle_cluster_distance)?;
        positive("graph.thin_cluster_distance", g.thin_cluster_distance)?;
        at_least_one("graph.min_cluster_points", g.min_cluster_points)?;
        positive("graph.edge_radius", g.edge_radius)?;
        at_least_one("graph.descriptor_bins", g.descriptor_bins)?;
        positive("graph.descriptor_bin_width", g.descriptor_bin_width)?;
        at_least_one("graph.match_candidates", g.match_candidates)?;
        positive("graph.consistency_slack", g.consistency_slack)?;
        positive("graph.track_gate", g.track_gate)?;

        let l = &self.loop_closing;
        at_least_one("loop_closing.keyframe_interval", l.keyframe_interval)?;
        positive("loop_closing.descriptor_distance", l.descriptor_distance)?;
        unit_interval("loop_closing.graph_similarity", l.graph_similarity)?;
        unit_interval("loop_closing.background_similarity", l.background_similarity)?;
        positive("loop_closing.background_match_distance", l.background_match_distance)?;
        at_least_one("loop_closing.height_bins", l.height_bins)?;
        at_least_one("loop_closing.range_bins", l.range_bins)?;
        positive("loop_closing.max_range", l.max_range)?;
        at_least_one("loop_closing.pair_distance_bins", l.pair_distance_bins)?;
        positive("loop_closing.pair_distance_max", l.pair_distance_max)?;
        if l.max_height <= l.min_height {
            return Err(ConfigError::Range {
                key: "loop_closing.max_height",
                value: l.max_height.to_string(),
                expected: "> loop_closing.min_height",
            });
        }

        let pg = &self.pose_graph;
        positive("pose_graph.odometry_sigma_translation", pg.odometry_sigma_translation)?;
        positive("pose_graph.odometry_sigma_rotation", pg.odometry_sigma_rotation)?;
        positive("pose_graph.loop_sigma_translation", pg.loop_sigma_translation)?;
        positive("pose_graph.loop_sigma_rotation", pg.loop_sigma_rotation)?;
        positive("pose_graph.prior_sigma", pg.prior_sigma)?;
        at_least_one("pose_graph.max_iterations", pg.max_iterations)?;
        positive("pose_graph.relative_tolerance", pg.relative_tolerance)?;

        positive("global_map.merge_distance", self.global_map.merge_distance)?;

        let s = &self.simulation;
        if s.drop_frames > 0 && s.drop_frames >= s.drop_window {
            return Err(ConfigError::Range {
                key: "simulation.drop_frames",
                value: s.drop_frames.to_string(),
                expected: "< simulation.drop_window",
            });
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_toml_str(&text)
}
