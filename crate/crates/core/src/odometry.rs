//! Frame-to-map odometry: constant-velocity prediction and semantically
//! weighted point-to-point ICP against the local voxel map.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::config::{OdometryConfig, RelocalizationConfig, WeightTable};
use crate::geometry::Pose;
use crate::point::LabeledPoint;
use crate::voxel_map::VoxelHashMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("only {found} correspondences at iteration {iteration}, need {required}")]
    TooFewCorrespondences {
        found: usize,
        required: usize,
        iteration: usize,
    },
    #[error("correspondences are degenerate (collinear or coincident)")]
    DegenerateGeometry,
    #[error("local map is empty")]
    EmptyMap,
}

/// Constant-velocity guess `T_{t−1} · (T_{t−2}⁻¹ T_{t−1})`.
pub fn predict(prev2: &Pose, prev1: &Pose) -> Pose {
    prev1.compose(&prev2.between(prev1))
}

/// Failure thresholds on the disagreement between prediction and result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureThresholds {
    /// Meters.
    pub distance: f64,
    /// Radians.
    pub angle: f64,
}

impl FailureThresholds {
    pub fn from_config(cfg: &RelocalizationConfig) -> Self {
        FailureThresholds {
            distance: cfg.distance_threshold,
            angle: cfg.angle_threshold,
        }
    }
}

impl Default for FailureThresholds {
    fn default() -> Self {
        FailureThresholds::from_config(&RelocalizationConfig::default())
    }
}

/// Returns whether `final_pose` disagrees with `initial` beyond the
/// thresholds, together with `T_error = initial⁻¹ · final`.
pub fn detect_failure(initial: &Pose, final_pose: &Pose, th: &FailureThresholds) -> (bool, Pose) {
    let err = initial.between(final_pose);
    let failed = err.translation().norm() > th.distance || err.rotation_angle() > th.angle;
    (failed, err)
}

/// Streaming weighted cross-covariance between point pairs.
///
/// Coordinates are taken relative to `reference` to keep the sums well
/// conditioned far from the origin.
#[derive(Debug, Clone)]
pub struct WeightedCovariance {
    reference: Vector3<f64>,
    weight: f64,
    sum_p: Vector3<f64>,
    sum_q: Vector3<f64>,
    sum_pq: Matrix3<f64>,
    count: usize,
}

impl WeightedCovariance {
    pub fn new(reference: Vector3<f64>) -> Self {
        WeightedCovariance {
            reference,
            weight: 0.0,
            sum_p: Vector3::zeros(),
            sum_q: Vector3::zeros(),
            sum_pq: Matrix3::zeros(),
            count: 0,
        }
    }

    /// Adds the pair `p → q`. Non-positive weights are ignored.
    #[inline]
    pub fn add(&mut self, p: &Vector3<f64>, q: &Vector3<f64>, w: f64) {
        if !(w > 0.0) {
            return;
        }
        let p = p - self.reference;
        let q = q - self.reference;
        self.weight += w;
        self.sum_p += w * p;
        self.sum_q += w * q;
        self.sum_pq += (w * p) * q.transpose();
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Rigid transform minimizing `Σ w ‖T p − q‖²` over the added pairs.
    pub fn solve(&self) -> Result<Pose, OdometryError> {
        if self.count < 3 || !(self.weight > 0.0) {
            return Err(OdometryError::DegenerateGeometry);
        }
        let cp = self.sum_p / self.weight;
        let cq = self.sum_q / self.weight;
        let h = self.sum_pq - self.weight * cp * cq.transpose();
        let svd = h.svd(true, true);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
            return Err(OdometryError::DegenerateGeometry);
        }
        let u = svd.u.ok_or(OdometryError::DegenerateGeometry)?;
        let v_t = svd.v_t.ok_or(OdometryError::DegenerateGeometry)?;
        let v = v_t.transpose();
        let d = (v * u.transpose()).determinant().signum();
        let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
        let t_local = cq - rotation * cp;
        let translation = t_local + self.reference - rotation * self.reference;
        Pose::new(rotation, translation).map_err(|_| OdometryError::DegenerateGeometry)
    }
}

/// Closed-form weighted rigid alignment of `(p, q, w)` triples, mapping each
/// `p` onto its `q`. Pairs with zero weight do not contribute.
pub fn solve_weighted_alignment(
    correspondences: &[(Vector3<f64>, Vector3<f64>, f64)],
) -> Result<Pose, OdometryError> {
    let reference = correspondences
        .iter()
        .find(|c| c.2 > 0.0)
        .map_or_else(Vector3::zeros, |c| c.0);
    let mut acc = WeightedCovariance::new(reference);
    for (p, q, w) in correspondences {
        acc.add(p, q, *w);
    }
    acc.solve()
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Sensor-to-world pose.
    pub pose: Pose,
    pub iterations: usize,
    /// Twist norm of the last correction.
    pub correction: f64,
    pub correspondences: usize,
    pub converged: bool,
    /// Prediction and result disagree beyond the failure thresholds.
    pub failed: bool,
    /// `initial⁻¹ · pose`.
    pub error: Pose,
    /// Truncated objective `Σ w · min(d², c²)` evaluated at the start of each
    /// iteration.
    pub costs: Vec<f64>,
}

/// Weighted point-to-point ICP of `scan` (sensor frame) against `map`
/// (world frame), starting from `initial`.
pub fn register(
    map: &VoxelHashMap,
    scan: &[LabeledPoint],
    initial: &Pose,
    cfg: &OdometryConfig,
    thresholds: &FailureThresholds,
) -> Result<RegistrationResult, OdometryError> {
    register_with_weights(map, scan, initial, cfg, &cfg.weights, thresholds)
}

pub fn register_with_weights(
    map: &VoxelHashMap,
    scan: &[LabeledPoint],
    initial: &Pose,
    cfg: &OdometryConfig,
    weights: &WeightTable,
    thresholds: &FailureThresholds,
) -> Result<RegistrationResult, OdometryError> {
    if map.is_empty() {
        return Err(OdometryError::EmptyMap);
    }
    let c = cfg.max_correspondence_distance;
    let c_sq = c * c;
    let w: Vec<f64> = scan.iter().map(|p| weights.weight(p.label)).collect();

    let mut pose = *initial;
    let mut costs = Vec::with_capacity(cfg.max_iterations);
    let mut correction = f64::INFINITY;
    let mut correspondences = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut acc = WeightedCovariance::new(*pose.translation());
        let mut cost = 0.0;
        for (p, &wi) in scan.iter().zip(&w) {
            let wp = pose.transform_point(&p.position);
            match map.nearest_neighbor_sq(&wp, c) {
                Some((q, d2)) => {
                    acc.add(&wp, &q.position, wi);
                    cost += wi * d2;
                }
                None => cost += wi * c_sq,
            }
        }
        costs.push(cost);
        correspondences = acc.count();
        if correspondences < cfg.min_correspondences {
            return Err(OdometryError::TooFewCorrespondences {
                found: correspondences,
                required: cfg.min_correspondences,
                iteration: iterations,
            });
        }
        let delta = acc.solve()?;
        pose = delta.compose(&pose);
        correction = delta.log_unchecked().norm();
        if correction < cfg.convergence {
            converged = true;
            break;
        }
    }
    let (failed, error) = detect_failure(initial, &pose, thresholds);
    Ok(RegistrationResult {
        pose,
        iterations,
        correction,
        correspondences,
        converged,
        failed,
        error,
        costs,
    })
}

/// Motion history and local map owned by the front end.
#[derive(Debug, Clone)]
pub struct OdometryState {
    pub map: VoxelHashMap,
    last: Option<Pose>,
    velocity: Pose,
}

impl OdometryState {
    pub fn new(map: VoxelHashMap) -> Self {
        OdometryState {
            map,
            last: None,
            velocity: Pose::identity(),
        }
    }

    pub fn last_pose(&self) -> Option<&Pose> {
        self.last.as_ref()
    }

    /// Per-scan motion `T_{t−2}⁻¹ T_{t−1}`; identity until two poses exist.
    pub fn velocity(&self) -> &Pose {
        &self.velocity
    }

    /// World-frame initial guess for the next scan.
    pub fn predict(&self) -> Pose {
        match &self.last {
            None => Pose::identity(),
            Some(last) => last.compose(&self.velocity),
        }
    }

    /// Records an accepted pose; velocity becomes the motion since the
    /// previous accepted pose.
    pub fn accept(&mut self, pose: Pose) {
        if let Some(last) = &self.last {
            self.velocity = last.between(&pose);
        }
        self.last = Some(pose);
    }

    /// Sets the last pose without touching the velocity.
    pub fn reset_to(&mut self, pose: Pose, velocity: Pose) {
        self.last = Some(pose);
        self.velocity = velocity;
    }

    /// Adds a sensor-frame scan at `pose` to the local map and trims it.
    pub fn integrate(&mut self, scan: &[LabeledPoint], pose: &Pose) {
        let world: Vec<LabeledPoint> = scan.iter().map(|p| p.transformed(pose)).collect();
        self.map.insert(&world);
        self.map.trim(pose.translation());
    }
}
