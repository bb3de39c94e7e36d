//! Labeled points and scans.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

/// Semantic classes the pipeline distinguishes.
///
/// Anything a segmentation frontend emits that is not listed collapses to
/// [`SemanticClass::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticClass {
    Other,
    Vehicle,
    Pole,
    Trunk,
    Building,
    Road,
    Vegetation,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 7] = [
        SemanticClass::Other,
        SemanticClass::Vehicle,
        SemanticClass::Pole,
        SemanticClass::Trunk,
        SemanticClass::Building,
        SemanticClass::Road,
        SemanticClass::Vegetation,
    ];

    /// Maps a SemanticKITTI class id (low 16 bits of a label word).
    ///
    /// Moving objects (ids ≥ 252) are not treated as static vehicles.
    pub fn from_semantic_kitti(id: u16) -> SemanticClass {
        match id {
            10 | 13 | 16 | 18 | 20 => SemanticClass::Vehicle,
            80 | 81 => SemanticClass::Pole,
            71 => SemanticClass::Trunk,
            50..=52 => SemanticClass::Building,
            40 | 44 | 48 | 49 | 60 => SemanticClass::Road,
            70 | 72 => SemanticClass::Vegetation,
            _ => SemanticClass::Other,
        }
    }

    /// Representative SemanticKITTI id, used when writing label files.
    pub fn semantic_kitti_id(self) -> u16 {
        match self {
            SemanticClass::Other => 0,
            SemanticClass::Vehicle => 10,
            SemanticClass::Pole => 80,
            SemanticClass::Trunk => 71,
            SemanticClass::Building => 50,
            SemanticClass::Road => 40,
            SemanticClass::Vegetation => 70,
        }
    }

    /// Compact id used in exported map files.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<SemanticClass> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Other => "other",
            SemanticClass::Vehicle => "vehicle",
            SemanticClass::Pole => "pole",
            SemanticClass::Trunk => "trunk",
            SemanticClass::Building => "building",
            SemanticClass::Road => "road",
            SemanticClass::Vegetation => "vegetation",
        }
    }

    pub fn from_name(name: &str) -> Option<SemanticClass> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    pub label: SemanticClass,
    /// Fraction of the sweep elapsed when the point was measured, in `[0, 1]`.
    pub stamp: f64,
}

impl LabeledPoint {
    pub fn new(position: Vector3<f64>, label: SemanticClass, stamp: f64) -> Self {
        LabeledPoint {
            position,
            label,
            stamp,
        }
    }

    pub fn transformed(&self, pose: &Pose) -> LabeledPoint {
        LabeledPoint {
            position: pose.transform_point(&self.position),
            ..*self
        }
    }
}

/// One LiDAR sweep in the sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scan {
    pub index: usize,
    pub points: Vec<LabeledPoint>,
}

impl Scan {
    pub fn new(index: usize, points: Vec<LabeledPoint>) -> Self {
        Scan { index, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> Scan {
        Scan {
            index: self.index,
            points: self.points.iter().map(|p| p.transformed(pose)).collect(),
        }
    }
}
