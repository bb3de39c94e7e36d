//! Motion compensation and voxel downsampling of incoming sweeps.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::geometry::Pose;
use crate::point::Scan;
use crate::voxel_map::{voxel_key, VoxelKey, VoxelKeyHasher};

/// Removes intra-sweep motion distortion.
///
/// `prediction` is the sensor motion over one full sweep. Each point is moved
/// by `interpolate(prediction, stamp − 0.5)`, so the output is expressed in
/// the sensor frame at mid-sweep.
pub fn deskew(scan: &Scan, prediction: &Pose) -> Scan {
    let xi = prediction.log_unchecked();
    if xi.norm() == 0.0 {
        return scan.clone();
    }
    let points = scan
        .points
        .iter()
        .map(|p| {
            let t = Pose::exp(&xi.scale(p.stamp - 0.5));
            p.transformed(&t)
        })
        .collect();
    Scan::new(scan.index, points)
}

/// Inverse of [`deskew`] for the same `prediction`.
pub fn reskew(scan: &Scan, prediction: &Pose) -> Scan {
    let xi = prediction.log_unchecked();
    let points = scan
        .points
        .iter()
        .map(|p| {
            let t = Pose::exp(&xi.scale(0.5 - p.stamp));
            p.transformed(&t)
        })
        .collect();
    Scan::new(scan.index, points)
}

/// Keeps the first point, in scan order, of every occupied voxel of side
/// `voxel`.
pub fn voxel_downsample(scan: &Scan, voxel: f64) -> Scan {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut seen: HashSet<VoxelKey, VoxelKeyHasher> =
        HashSet::with_capacity_and_hasher(scan.len(), VoxelKeyHasher);
    let points = scan
        .points
        .iter()
        .filter(|p| seen.insert(voxel_key(&p.position, voxel)))
        .copied()
        .collect();
    Scan::new(scan.index, points)
}

/// Range gate shared by the readers and the synthetic sensor.
pub fn range_filter(scan: &Scan, min_range: f64, max_range: f64) -> Scan {
    let points = scan
        .points
        .iter()
        .filter(|p| {
            let r = p.position.norm();
            p.position.iter().all(|c| c.is_finite()) && r >= min_range && r <= max_range
        })
        .copied()
        .collect();
    Scan::new(scan.index, points)
}

/// Voxel downsampling of bare positions with the same first-kept rule.
pub fn voxel_downsample_positions(points: &[Vector3<f64>], voxel: f64) -> Vec<Vector3<f64>> {
    let mut seen: HashSet<VoxelKey, VoxelKeyHasher> =
        HashSet::with_capacity_and_hasher(points.len(), VoxelKeyHasher);
    points
        .iter()
        .filter(|p| seen.insert(voxel_key(p, voxel)))
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::{LabeledPoint, SemanticClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64, stamp: f64) -> LabeledPoint {
        LabeledPoint::new(Vector3::new(x, y, z), SemanticClass::Building, stamp)
    }

    #[test]
    fn identity_prediction_leaves_scan_unchanged() {
        let scan = Scan::new(0, vec![pt(1.0, 2.0, 3.0, 0.1), pt(-4.0, 5.0, 0.0, 0.9)]);
        assert_eq!(deskew(&scan, &Pose::identity()), scan);
    }

    #[test]
    fn translation_shifts_by_stamp_offset() {
        let pred = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let scan = Scan::new(0, vec![pt(10.0, 0.0, 0.0, 1.0), pt(10.0, 0.0, 0.0, 0.0)]);
        let out = deskew(&scan, &pred);
        assert!((out.points[0].position - Vector3::new(10.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((out.points[1].position - Vector3::new(9.5, 0.0, 0.0)).norm() < 1e-12);
        let rel = out.points[0].position - out.points[1].position;
        assert!((rel - pred.translation()).norm() < 1e-12);
    }

    #[test]
    fn deskew_then_reskew_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Pose::rot_z(0.05).with_translation(Vector3::new(1.2, 0.1, 0.02));
        let scan = Scan::new(
            0,
            (0..200)
                .map(|_| {
                    pt(
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-2.0..5.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect(),
        );
        let back = reskew(&deskew(&scan, &pred), &pred);
        for (a, b) in scan.points.iter().zip(&back.points) {
            assert!((a.position - b.position).norm() < 1e-9);
        }
    }

    #[test]
    fn downsample_basic_cases() {
        let near = Scan::new(0, vec![pt(0.1, 0.1, 0.1, 0.0), pt(0.2, 0.1, 0.1, 0.0)]);
        let out = voxel_downsample(&near, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out.points[0], near.points[0]);
        let far = Scan::new(0, vec![pt(0.1, 0.1, 0.1, 0.0), pt(10.1, 0.1, 0.1, 0.0)]);
        assert_eq!(voxel_downsample(&far, 0.5).len(), 2);
    }

    #[test]
    fn downsample_unit_cube_matches_voxel_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let origin = Vector3::new(0.3, -0.2, 0.7);
        let pts: Vec<_> = (0..1000)
            .map(|_| {
                let o = origin
                    + Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                pt(o.x, o.y, o.z, 0.0)
            })
            .collect();
        let scan = Scan::new(0, pts.clone());
        let out = voxel_downsample(&scan, 0.5);
        // Oracle: distinct floor(p / v) triples by exhaustive comparison.
        let mut cells: Vec<[i64; 3]> = Vec::new();
        for p in &pts {
            let c = [
                (p.position.x / 0.5).floor() as i64,
                (p.position.y / 0.5).floor() as i64,
                (p.position.z / 0.5).floor() as i64,
            ];
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        assert!(cells.len() <= 27);
        assert_eq!(out.len(), cells.len());
        // Subset, and the first point of each cell is the one kept.
        for q in &out.points {
            let first = pts
                .iter()
                .find(|p| {
                    (0..3).all(|k| (p.position[k] / 0.5).floor() == (q.position[k] / 0.5).floor())
                })
                .unwrap();
            assert_eq!(first, q);
        }
        assert_eq!(voxel_downsample(&scan, 0.5), out);
    }

    #[test]
    fn range_filter_gates() {
        let scan = Scan::new(0, vec![pt(0.0, 0.0, 0.0, 0.0), pt(5.0, 0.0, 0.0, 0.0), pt(130.0, 0.0, 0.0, 0.0)]);
        assert_eq!(range_filter(&scan, 1.0, 120.0).len(), 1);
    }
}
