//! Trajectory evaluation: absolute trajectory error after rigid alignment,
//! KITTI-style relative translational error, and per-stage timing stats.

use std::collections::BTreeMap;
use std::time::Duration;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {estimated} estimated vs {truth} ground-truth poses")]
    LengthMismatch { estimated: usize, truth: usize },
    #[error("need at least 3 valid poses, got {valid}")]
    TooFewPoses { valid: usize },
    #[error("trajectory is {length:.1} m long, shorter than the shortest 100 m segment")]
    TooShort { length: f64 },
    #[error("trajectory contains non-finite values")]
    NonFinite,
    #[error("no segment could be evaluated")]
    NoSegments,
}

/// Least-squares rigid transform `A` minimizing Σ‖A·src − dst‖², or `None`
/// for non-finite input.
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * fix * u.transpose();
    Pose::new(r, cd - r * cs).ok()
}

/// Root-mean-square translational error of `estimated` against `truth`
/// after the best rigid alignment. Invalid estimates are skipped.
pub fn evaluate_ate(estimated: &[Option<Pose>], truth: &[Pose]) -> Result<f64, MetricsError> {
    if estimated.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { estimated: estimated.len(), truth: truth.len() });
    }
    let (src, dst): (Vec<_>, Vec<_>) = estimated
        .iter()
        .zip(truth)
        .filter_map(|(e, t)| e.map(|e| (*e.translation(), *t.translation())))
        .unzip();
    if src.len() < 3 {
        return Err(MetricsError::TooFewPoses { valid: src.len() });
    }
    let align = rigid_alignment(&src, &dst).ok_or(MetricsError::NonFinite)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (align.transform_point(s) - d).norm_squared()).sum();
    Ok((sq / src.len() as f64).sqrt())
}

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
const START_STEP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    /// Mean translational endpoint error over segment length, in percent.
    pub translation_percent: f64,
    /// Mean rotational endpoint error in degrees per 100 m.
    pub rotation_deg_per_100m: f64,
    pub segments: usize,
}

/// Relative error over all segments of 100..800 m starting every tenth
/// frame. Segments touching an invalid estimate are skipped.
pub fn evaluate_rel(estimated: &[Option<Pose>], truth: &[Pose]) -> Result<RelativeError, MetricsError> {
    if estimated.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { estimated: estimated.len(), truth: truth.len() });
    }
    let mut dist = vec![0.0; truth.len()];
    for i in 1..truth.len() {
        dist[i] = dist[i - 1] + (truth[i].translation() - truth[i - 1].translation()).norm();
    }
    let total = dist.last().copied().unwrap_or(0.0);
    if total < SEGMENT_LENGTHS[0] {
        return Err(MetricsError::TooShort { length: total });
    }
    // Prefix count of invalid estimates for O(1) span checks.
    let mut invalid = vec![0usize; estimated.len() + 1];
    for (i, e) in estimated.iter().enumerate() {
        invalid[i + 1] = invalid[i] + usize::from(e.is_none());
    }
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in (0..truth.len()).step_by(START_STEP) {
        for &len in &SEGMENT_LENGTHS {
            let target = dist[first] + len;
            let Some(last) = (first..truth.len()).find(|&k| dist[k] > target) else { continue };
            if invalid[last + 1] - invalid[first] > 0 {
                continue;
            }
            let (Some(e0), Some(e1)) = (estimated[first], estimated[last]) else { continue };
            let gt_delta = truth[first].between(&truth[last]);
            let est_delta = e0.between(&e1);
            let err = gt_delta.between(&est_delta);
            t_sum += err.translation().norm() / len;
            r_sum += err.rotation_angle() / len;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoSegments);
    }
    Ok(RelativeError {
        translation_percent: 100.0 * t_sum / count as f64,
        rotation_deg_per_100m: 100.0 * r_sum.to_degrees() / count as f64,
        segments: count,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub count: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

/// Per-stage duration accumulator.
#[derive(Debug, Clone, Default)]
pub struct Timings {
    stages: BTreeMap<String, (usize, f64, f64)>,
}

impl Timings {
    pub fn record(&mut self, stage: &str, elapsed: Duration) {
        let ms = elapsed.as_secs_f64() * 1e3;
        let e = self.stages.entry(stage.to_string()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += ms;
        e.2 = e.2.max(ms);
    }

    pub fn merge(&mut self, other: &Timings) {
        for (k, &(n, sum, max)) in &other.stages {
            let e = self.stages.entry(k.clone()).or_insert((0, 0.0, 0.0));
            e.0 += n;
            e.1 += sum;
            e.2 = e.2.max(max);
        }
    }

    pub fn summary(&self) -> BTreeMap<String, StageTiming> {
        self.stages
            .iter()
            .map(|(k, &(n, sum, max))| {
                (k.clone(), StageTiming { count: n, mean_ms: if n > 0 { sum / n as f64 } else { 0.0 }, max_ms: max })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ate_rmse: Option<f64>,
    pub relative: Option<RelativeError>,
    pub valid_poses: usize,
    pub timings: BTreeMap<String, StageTiming>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn planar(x: f64, y: f64) -> Pose {
        Pose::from_translation(Vector3::new(x, y, 0.0))
    }

    /// Independent alignment oracle: Horn's closed-form quaternion method.
    fn horn_rmse(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut s = Matrix3::zeros();
        for (a, b) in src.iter().zip(dst) {
            s += (a - cs) * (b - cd).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let k = nalgebra::Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = k.symmetric_eigen();
        let imax = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(imax);
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let r = rot.to_rotation_matrix().into_inner();
        let sq: f64 = src.iter().zip(dst).map(|(a, b)| (r * (a - cs) + cd - b).norm_squared()).sum();
        (sq / n).sqrt()
    }

    #[test]
    fn identical_and_gauge_shifted_give_zero() {
        let truth: Vec<Pose> = (0..20).map(|i| Pose::rot_z(0.1 * i as f64).with_translation(Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0))).collect();
        let est: Vec<Option<Pose>> = truth.iter().map(|p| Some(*p)).collect();
        assert!(evaluate_ate(&est, &truth).unwrap() < 1e-12);
        let g = Pose::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), 0.8).with_translation(Vector3::new(5.0, -3.0, 2.0));
        let shifted: Vec<Option<Pose>> = truth.iter().map(|p| Some(g.compose(p))).collect();
        assert!(evaluate_ate(&shifted, &truth).unwrap() < 1e-9);
    }

    #[test]
    fn unit_square_with_one_corner_off_matches_closed_form_oracle() {
        let truth = vec![planar(0.0, 0.0), planar(1.0, 0.0), planar(1.0, 1.0), planar(0.0, 1.0)];
        let mut est: Vec<Option<Pose>> = truth.iter().map(|p| Some(*p)).collect();
        est[2] = Some(planar(1.2, 1.0));
        let ate = evaluate_ate(&est, &truth).unwrap();
        let src: Vec<_> = est.iter().map(|p| *p.unwrap().translation()).collect();
        let dst: Vec<_> = truth.iter().map(|p| *p.translation()).collect();
        assert_relative_eq!(ate, horn_rmse(&src, &dst), epsilon = 1e-6);
        // Alignment can only lower the unaligned error of 0.2/√4.
        assert!(ate < 0.1);
    }

    #[test]
    fn ate_ignores_invalid_and_rejects_too_few() {
        let truth = vec![planar(0.0, 0.0), planar(1.0, 0.0), planar(2.0, 1.0), planar(3.0, 0.0)];
        let est = vec![Some(truth[0]), None, Some(truth[2]), Some(truth[3])];
        assert!(evaluate_ate(&est, &truth).unwrap() < 1e-12);
        let est = vec![Some(truth[0]), None, None, Some(truth[3])];
        assert_eq!(evaluate_ate(&est, &truth), Err(MetricsError::TooFewPoses { valid: 2 }));
        assert!(matches!(evaluate_ate(&est[..3], &truth), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn relative_error_scale_and_validity() {
        let truth: Vec<Pose> = (0..=900).map(|i| planar(i as f64, 0.0)).collect();
        let exact: Vec<Option<Pose>> = truth.iter().map(|p| Some(*p)).collect();
        assert!(evaluate_rel(&exact, &truth).unwrap().translation_percent < 1e-9);

        let scaled: Vec<Option<Pose>> = truth.iter().map(|p| Some(planar(1.01 * p.translation().x, 0.0))).collect();
        let r = evaluate_rel(&scaled, &truth).unwrap();
        assert!((r.translation_percent - 1.0).abs() < 0.05, "{r:?}");

        let mut holed = scaled.clone();
        holed[450] = None;
        let h = evaluate_rel(&holed, &truth).unwrap();
        assert!(h.segments < r.segments);
        assert!((h.translation_percent - 1.0).abs() < 0.05);

        let short: Vec<Pose> = truth[..50].to_vec();
        let est: Vec<Option<Pose>> = short.iter().map(|p| Some(*p)).collect();
        assert!(matches!(evaluate_rel(&est, &short), Err(MetricsError::TooShort { .. })));
    }

    #[test]
    fn timings_summary() {
        let mut t = Timings::default();
        t.record("odometry", Duration::from_millis(10));
        t.record("odometry", Duration::from_millis(30));
        let s = t.summary();
        assert_eq!(s["odometry"].count, 2);
        assert_relative_eq!(s["odometry"].mean_ms, 20.0, epsilon = 1e-9);
        assert_relative_eq!(s["odometry"].max_ms, 30.0, epsilon = 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn ate_ignores_rigid_motion_of_estimate(
            seed in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -2.0f64..2.0), 4..12),
            yaw in -3.0f64..3.0,
            shift in (-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0),
        ) {
            let truth: Vec<Pose> = seed.iter().map(|&(x, y, z)| Pose::from_translation(Vector3::new(x, y, z))).collect();
            let noisy: Vec<Option<Pose>> = truth
                .iter()
                .enumerate()
                .map(|(i, p)| Some(p.compose(&Pose::from_translation(Vector3::new(0.01 * i as f64, 0.0, 0.0)))))
                .collect();
            let moved = Pose::rot_z(yaw).with_translation(Vector3::new(shift.0, shift.1, shift.2));
            let moved_est: Vec<Option<Pose>> = noisy.iter().map(|p| p.map(|p| moved.compose(&p))).collect();
            let a = evaluate_ate(&noisy, &truth).unwrap();
            let b = evaluate_ate(&moved_est, &truth).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}
