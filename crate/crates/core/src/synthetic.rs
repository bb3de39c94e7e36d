//! Synthetic labeled worlds and trajectories.
//!
//! A world is a fixed, randomly sampled point set along a path: a road band,
//! building blocks, and separated pole, trunk and vehicle instances. A scan
//! holds every background point within the sensing radius and every instance
//! whose centroid lies within it, expressed in the sensor frame. Optional
//! sweep skew moves each point by the motion over its stamp offset.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, ScanSource};
use crate::geometry::Pose;
use crate::point::{LabeledPoint, Scan, SemanticClass};
use crate::semantic_graph::euclidean_clusters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathShape {
    /// Along +x from the origin.
    Straight { length: f64 },
    /// Counter-clockwise from `(0, −b)`, heading +x.
    Ellipse { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shape: PathShape,
    /// Nominal travel per frame, meters. Closed paths round it so one lap
    /// is a multiple of five frames.
    pub step: f64,
    /// Number of frames; zero means one full lap (or the whole straight).
    pub frames: usize,
    pub sensor_height: f64,
    pub sensing_radius: f64,
    pub road_half_width: f64,
    /// Points per square meter.
    pub ground_density: f64,
    pub wall_density: f64,
    pub buildings: bool,
    /// Instances per 100 m of path.
    pub poles: f64,
    pub trunks: f64,
    pub vehicles: f64,
    pub skew: bool,
    /// Isotropic Gaussian point noise, meters.
    pub point_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            shape: PathShape::Ellipse { a: 50.0, b: 35.0 },
            step: 1.0,
            frames: 0,
            sensor_height: 1.73,
            sensing_radius: 60.0,
            road_half_width: 20.0,
            ground_density: 1.5,
            wall_density: 1.5,
            buildings: true,
            poles: 6.0,
            trunks: 5.0,
            vehicles: 3.0,
            skew: true,
            point_noise: 0.0,
            seed: 0,
        }
    }
}

/// Arc-length parameterized planar path.
#[derive(Debug, Clone)]
pub struct Path {
    shape: PathShape,
    /// `(θ, s)` samples for ellipses.
    table: Vec<(f64, f64)>,
    length: f64,
}

impl Path {
    pub fn new(shape: PathShape) -> Self {
        match shape {
            PathShape::Straight { length } => Path {
                shape,
                table: Vec::new(),
                length,
            },
            PathShape::Ellipse { a, b } => {
                let n = 20_000;
                let mut table = Vec::with_capacity(n + 1);
                let mut s = 0.0;
                let mut prev = ellipse_point(a, b, -PI / 2.0);
                table.push((-PI / 2.0, 0.0));
                for i in 1..=n {
                    let th = -PI / 2.0 + TAU * i as f64 / n as f64;
                    let p = ellipse_point(a, b, th);
                    s += (p - prev).norm();
                    prev = p;
                    table.push((th, s));
                }
                Path {
                    shape,
                    table,
                    length: s,
                }
            }
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.shape, PathShape::Ellipse { .. })
    }

    fn theta(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.length);
        let k = self.table.partition_point(|&(_, si)| si <= s).clamp(1, self.table.len() - 1);
        let (t0, s0) = self.table[k - 1];
        let (t1, s1) = self.table[k];
        t0 + (t1 - t0) * (s - s0) / (s1 - s0)
    }

    pub fn position(&self, s: f64) -> Vector2<f64> {
        match self.shape {
            PathShape::Straight { .. } => Vector2::new(s, 0.0),
            PathShape::Ellipse { a, b } => ellipse_point(a, b, self.theta(s)),
        }
    }

    pub fn tangent(&self, s: f64) -> Vector2<f64> {
        match self.shape {
            PathShape::Straight { .. } => Vector2::new(1.0, 0.0),
            PathShape::Ellipse { a, b } => {
                let th = self.theta(s);
                Vector2::new(-a * th.sin(), b * th.cos()).normalize()
            }
        }
    }

    /// Left-hand normal.
    pub fn normal(&self, s: f64) -> Vector2<f64> {
        let t = self.tangent(s);
        Vector2::new(-t.y, t.x)
    }

    /// Point at arc length `s` shifted by `lateral` along the normal.
    pub fn offset(&self, s: f64, lateral: f64) -> Vector2<f64> {
        self.position(s) + self.normal(s) * lateral
    }
}

fn ellipse_point(a: f64, b: f64, th: f64) -> Vector2<f64> {
    Vector2::new(a * th.cos(), b * th.sin())
}

/// A ground-truth object instance.
#[derive(Debug, Clone)]
pub struct WorldInstance {
    pub id: usize,
    pub label: SemanticClass,
    pub centroid: Vector3<f64>,
    pub points: Vec<Vector3<f64>>,
    /// Horizontal clearance radius used for placement.
    radius: f64,
}

const TILE: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub path: Path,
    /// World-frame ground, building and vegetation points.
    pub background: Vec<LabeledPoint>,
    pub instances: Vec<WorldInstance>,
    /// Sensor-to-world ground-truth pose per frame.
    pub poses: Vec<Pose>,
    /// Arc length travelled per frame.
    pub step: f64,
    tiles: HashMap<(i32, i32), Vec<usize>>,
}

impl SyntheticWorld {
    pub fn generate(config: &SyntheticConfig) -> Self {
        let path = Path::new(config.shape);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (step, frames) = frame_layout(config, &path);
        let poses: Vec<Pose> = (0..frames)
            .map(|k| {
                let s = k as f64 * step;
                let p = path.position(s);
                let t = path.tangent(s);
                Pose::rot_z(t.y.atan2(t.x)).with_translation(Vector3::new(p.x, p.y, config.sensor_height))
            })
            .collect();

        // Extent of arc length that can be seen from the trajectory.
        let (s_lo, s_hi) = if path.is_closed() {
            (0.0, path.length())
        } else {
            let r = config.sensing_radius;
            (-r, (frames.saturating_sub(1)) as f64 * step + r)
        };
        let span = s_hi - s_lo;

        let mut background = Vec::new();
        let w = config.road_half_width;
        let n_ground = (config.ground_density * span * 2.0 * w) as usize;
        for _ in 0..n_ground {
            let q = path.offset(rng.gen_range(s_lo..s_hi), rng.gen_range(-w..w));
            background.push(LabeledPoint::new(Vector3::new(q.x, q.y, 0.0), SemanticClass::Road, 0.0));
        }
        if config.buildings {
            add_buildings(config, &path, s_lo, s_hi, &mut rng, &mut background);
        }

        let mut instances: Vec<WorldInstance> = Vec::new();
        let per_100 = span / 100.0;
        let mut requests = Vec::new();
        requests.extend(std::iter::repeat_n(SemanticClass::Pole, (config.poles * per_100).round() as usize));
        requests.extend(std::iter::repeat_n(SemanticClass::Trunk, (config.trunks * per_100).round() as usize));
        requests.extend(std::iter::repeat_n(SemanticClass::Vehicle, (config.vehicles * per_100).round() as usize));
        for label in requests {
            for _attempt in 0..50 {
                let s = rng.gen_range(s_lo..s_hi);
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let (lateral, radius) = match label {
                    SemanticClass::Pole => (side * rng.gen_range(5.0..9.0), 0.2),
                    SemanticClass::Trunk => (side * rng.gen_range(6.0..11.0), 2.2),
                    _ => (side * rng.gen_range(4.0..7.0), 2.5),
                };
                let base = path.offset(s, lateral);
                let clear = instances
                    .iter()
                    .all(|o| (o.centroid.xy() - base).norm() > o.radius + radius + 1.0);
                if !clear {
                    continue;
                }
                let heading = path.tangent(s);
                if let Some(inst) = make_instance(instances.len(), label, base, heading, radius, &mut rng, &mut background)
                {
                    instances.push(inst);
                    break;
                }
            }
        }

        let mut tiles: HashMap<(i32, i32), Vec<usize>> = HashMap::new();
        for (i, p) in background.iter().enumerate() {
            tiles.entry(tile_of(&p.position)).or_default().push(i);
        }
        SyntheticWorld {
            config: config.clone(),
            path,
            background,
            instances,
            poses,
            step,
            tiles,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Frames in one lap of a closed path.
    pub fn lap_frames(&self) -> Option<usize> {
        self.path
            .is_closed()
            .then(|| (self.path.length() / self.step).round() as usize)
    }

    /// Instances whose centroid lies within the sensing radius of `pose`.
    pub fn visible_instances(&self, pose: &Pose) -> Vec<usize> {
        let r2 = self.config.sensing_radius.powi(2);
        self.instances
            .iter()
            .filter(|o| (o.centroid - pose.translation()).norm_squared() <= r2)
            .map(|o| o.id)
            .collect()
    }

    /// Distinct instances seen over frames `0..frames`.
    pub fn instances_seen(&self, frames: usize) -> Vec<usize> {
        let mut seen = vec![false; self.instances.len()];
        for pose in self.poses.iter().take(frames) {
            for i in self.visible_instances(pose) {
                seen[i] = true;
            }
        }
        (0..seen.len()).filter(|&i| seen[i]).collect()
    }

    /// World-frame points observed from `pose`, before sensor effects.
    pub fn observe_world(&self, pose: &Pose) -> Vec<LabeledPoint> {
        let c = pose.translation();
        let r = self.config.sensing_radius;
        let r2 = r * r;
        let mut out = Vec::new();
        let (lo, hi) = (tile_of(&(c - Vector3::repeat(r))), tile_of(&(c + Vector3::repeat(r))));
        for tx in lo.0..=hi.0 {
            for ty in lo.1..=hi.1 {
                if let Some(ids) = self.tiles.get(&(tx, ty)) {
                    out.extend(
                        ids.iter()
                            .map(|&i| self.background[i])
                            .filter(|p| (p.position - c).norm_squared() <= r2),
                    );
                }
            }
        }
        for id in self.visible_instances(pose) {
            let o = &self.instances[id];
            out.extend(o.points.iter().map(|p| LabeledPoint::new(*p, o.label, 0.0)));
        }
        out
    }

    /// Sensor-frame scan of frame `k` with stamps and, if enabled, skew and
    /// noise.
    pub fn scan(&self, k: usize) -> Scan {
        let pose = self.poses[k];
        let motion = self.frame_motion(k).log_unchecked();
        let inv = pose.inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = (self.config.point_noise > 0.0).then(|| Normal::new(0.0, self.config.point_noise).unwrap());
        let mut points: Vec<LabeledPoint> = self
            .observe_world(&pose)
            .into_iter()
            .map(|p| {
                let local = inv.transform_point(&p.position);
                let stamp = sweep_stamp(&local);
                let mut q = if self.config.skew {
                    let at = pose.compose(&Pose::exp(&motion.scale(stamp - 0.5)));
                    at.inverse().transform_point(&p.position)
                } else {
                    local
                };
                if let Some(n) = &noise {
                    q += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                }
                LabeledPoint::new(q, p.label, stamp)
            })
            .collect();
        points.sort_by(|a, b| a.stamp.total_cmp(&b.stamp));
        Scan::new(k, points)
    }

    /// True motion from frame `k−1` to `k` (frame 1's motion for frame 0).
    pub fn frame_motion(&self, k: usize) -> Pose {
        if self.poses.len() < 2 {
            return Pose::identity();
        }
        let k = k.max(1);
        self.poses[k - 1].between(&self.poses[k])
    }
}

impl ScanSource for SyntheticWorld {
    fn len(&self) -> usize {
        self.poses.len()
    }

    fn scan(&self, index: usize) -> Result<Scan, DatasetError> {
        if index >= self.poses.len() {
            return Err(DatasetError::IndexOutOfRange {
                index,
                count: self.poses.len(),
            });
        }
        Ok(SyntheticWorld::scan(self, index))
    }

    fn groundtruth(&self) -> Result<Option<Vec<Pose>>, DatasetError> {
        Ok(Some(self.poses.clone()))
    }
}

/// Sweep stamp in `[0, 1)`: clockwise azimuth from the rear (−x) direction.
pub fn sweep_stamp(p: &Vector3<f64>) -> f64 {
    let az = p.y.atan2(p.x);
    ((PI - az).rem_euclid(TAU) / TAU).min(1.0 - f64::EPSILON)
}

fn frame_layout(config: &SyntheticConfig, path: &Path) -> (f64, usize) {
    if path.is_closed() {
        let lap = (((path.length() / config.step) / 5.0).round() as usize).max(1) * 5;
        let step = path.length() / lap as f64;
        let frames = if config.frames == 0 { lap } else { config.frames };
        (step, frames)
    } else {
        let frames = if config.frames == 0 {
            (path.length() / config.step).floor() as usize + 1
        } else {
            config.frames
        };
        (config.step, frames)
    }
}

fn tile_of(p: &Vector3<f64>) -> (i32, i32) {
    ((p.x / TILE).floor() as i32, (p.y / TILE).floor() as i32)
}

fn add_buildings(
    config: &SyntheticConfig,
    path: &Path,
    s_lo: f64,
    s_hi: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<LabeledPoint>,
) {
    // Closed paths only get blocks on the outside of the loop.
    let sides: &[f64] = if path.is_closed() { &[-1.0] } else { &[-1.0, 1.0] };
    for &side in sides {
        let mut s = s_lo + rng.gen_range(0.0..10.0);
        while s < s_hi - 8.0 {
            let len = rng.gen_range(8.0..20.0f64).min(s_hi - s);
            let depth = rng.gen_range(6.0..10.0);
            let height = rng.gen_range(6.0..12.0);
            let near = rng.gen_range(14.0..17.0);
            let mid = s + len / 2.0;
            let center2 = path.offset(mid, side * (near + depth / 2.0));
            let t = path.tangent(mid);
            let n = Vector2::new(-t.y, t.x);
            let center = Vector3::new(center2.x, center2.y, 0.0);
            let u = Vector3::new(t.x, t.y, 0.0);
            let v = Vector3::new(n.x, n.y, 0.0);
            let faces = [
                (center + v * (depth / 2.0), u, len),
                (center - v * (depth / 2.0), u, len),
                (center + u * (len / 2.0), v, depth),
                (center - u * (len / 2.0), v, depth),
            ];
            for (origin, dir, width) in faces {
                let count = (config.wall_density * width * height) as usize;
                for _ in 0..count {
                    let a = rng.gen_range(-width / 2.0..width / 2.0);
                    let z = rng.gen_range(0.0..height);
                    let p = origin + dir * a + Vector3::new(0.0, 0.0, z);
                    out.push(LabeledPoint::new(p, SemanticClass::Building, 0.0));
                }
            }
            s += len + rng.gen_range(4.0..12.0);
        }
    }
}

/// Samples one instance; rejects samplings that do not form a single
/// cluster at the class clustering distance.
fn make_instance(
    id: usize,
    label: SemanticClass,
    base: Vector2<f64>,
    heading: Vector2<f64>,
    radius: f64,
    rng: &mut ChaCha8Rng,
    background: &mut Vec<LabeledPoint>,
) -> Option<WorldInstance> {
    let b = Vector3::new(base.x, base.y, 0.0);
    for _ in 0..10 {
        let (points, link) = match label {
            SemanticClass::Pole => {
                let h = rng.gen_range(5.0..7.0);
                (cylinder(rng, b, 0.12, h, 350), 0.3)
            }
            SemanticClass::Trunk => {
                let r = rng.gen_range(0.2..0.35);
                (cylinder(rng, b, r, 3.0, 400), 0.3)
            }
            _ => (vehicle(rng, b, heading), 0.5),
        };
        if euclidean_clusters(&points, link).len() != 1 {
            continue;
        }
        if label == SemanticClass::Trunk {
            let top = b + Vector3::new(0.0, 0.0, 4.5);
            for _ in 0..250 {
                let d = random_unit(rng);
                background.push(LabeledPoint::new(top + d * 1.8, SemanticClass::Vegetation, 0.0));
            }
        }
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        return Some(WorldInstance {
            id,
            label,
            centroid,
            points,
            radius,
        });
    }
    None
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn cylinder(rng: &mut ChaCha8Rng, base: Vector3<f64>, r: f64, h: f64, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0.0..TAU);
            base + Vector3::new(r * a.cos(), r * a.sin(), rng.gen_range(0.0..h))
        })
        .collect()
}

/// Surface of a parked car: four sides and the roof.
fn vehicle(rng: &mut ChaCha8Rng, base: Vector3<f64>, heading: Vector2<f64>) -> Vec<Vector3<f64>> {
    let (l, w, h) = (4.2, 1.8, 1.5);
    let u = Vector3::new(heading.x, heading.y, 0.0);
    let v = Vector3::new(-heading.y, heading.x, 0.0);
    let areas = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = areas.iter().sum();
    let n = 650;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while pick > areas[face] && face < 4 {
            pick -= areas[face];
            face += 1;
        }
        let a = rng.gen_range(-0.5..0.5);
        let c = rng.gen_range(-0.5..0.5);
        let z = rng.gen_range(0.0..h);
        let p = match face {
            0 => u * (a * l) + v * (w / 2.0) + Vector3::z() * z,
            1 => u * (a * l) - v * (w / 2.0) + Vector3::z() * z,
            2 => u * (l / 2.0) + v * (a * w) + Vector3::z() * z,
            3 => -u * (l / 2.0) + v * (a * w) + Vector3::z() * z,
            _ => u * (a * l) + v * (c * w) + Vector3::z() * h,
        };
        pts.push(base + p);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GraphConfig;
    use crate::semantic_graph::cluster_instances;

    #[test]
    fn ellipse_path_is_arc_length_parameterized() {
        let path = Path::new(PathShape::Ellipse { a: 50.0, b: 35.0 });
        // Ramanujan's perimeter approximation as an independent check.
        let (a, b) = (50.0f64, 35.0f64);
        let h = ((a - b) / (a + b)).powi(2);
        let ram = PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()));
        assert!((path.length() - ram).abs() < 1e-3, "{} vs {ram}", path.length());
        for k in 0..100 {
            let s = k as f64 * 2.7;
            let d = (path.position(s + 0.5) - path.position(s)).norm();
            assert!((d - 0.5).abs() < 1e-3);
            assert!((path.tangent(s).norm() - 1.0).abs() < 1e-12);
        }
        assert!((path.position(0.0) - Vector2::new(0.0, -35.0)).norm() < 1e-9);
        assert!((path.position(path.length()) - path.position(0.0)).norm() < 1e-9);
    }

    #[test]
    fn lap_is_a_multiple_of_five_and_closes() {
        let world = SyntheticWorld::generate(&SyntheticConfig::default());
        let lap = world.lap_frames().unwrap();
        assert_eq!(lap % 5, 0);
        assert_eq!(world.len(), lap);
        let last = world.poses[lap - 1];
        let step = last.between(&world.poses[0]);
        assert!((step.translation().norm() - world.step).abs() < 1e-3);
    }

    #[test]
    fn instances_are_separated_and_cluster_cleanly() {
        let cfg = SyntheticConfig {
            seed: 4,
            skew: false,
            ..Default::default()
        };
        let world = SyntheticWorld::generate(&cfg);
        assert!(world.instances.len() > 20);
        let gcfg = GraphConfig::default();
        let scan = world.scan(0);
        let nodes = cluster_instances(&scan.points, &gcfg);
        assert_eq!(nodes.len(), world.visible_instances(&world.poses[0]).len());
        for n in &nodes {
            let world_c = world.poses[0].transform_point(&n.centroid);
            let hit = world
                .instances
                .iter()
                .any(|o| o.label == n.label && (o.centroid - world_c).norm() < 1e-9);
            assert!(hit);
        }
    }

    #[test]
    fn unskewed_scan_is_the_world_in_sensor_frame() {
        let world = SyntheticWorld::generate(&SyntheticConfig {
            shape: PathShape::Straight { length: 30.0 },
            skew: false,
            ..Default::default()
        });
        assert_eq!(world.len(), 31);
        let k = 7;
        let scan = world.scan(k);
        assert!(scan.len() > 1000);
        for p in scan.points.iter().take(200) {
            let w = world.poses[k].transform_point(&p.position);
            assert!(
                world.background.iter().any(|b| (b.position - w).norm() < 1e-9)
                    || world.instances.iter().any(|o| o.points.iter().any(|q| (q - w).norm() < 1e-9))
            );
            assert!((0.0..1.0).contains(&p.stamp));
        }
        assert!(scan.points.windows(2).all(|w| w[0].stamp <= w[1].stamp));
    }

    #[test]
    fn skew_is_undone_by_deskew_with_true_motion() {
        let cfg = SyntheticConfig {
            shape: PathShape::Ellipse { a: 50.0, b: 35.0 },
            skew: true,
            ..Default::default()
        };
        let world = SyntheticWorld::generate(&cfg);
        let k = 12;
        let skewed = world.scan(k);
        let plain = SyntheticWorld::generate(&SyntheticConfig { skew: false, ..cfg }).scan(k);
        let fixed = crate::preprocess::deskew(&skewed, &world.frame_motion(k));
        let mut worst: f64 = 0.0;
        let mut moved: f64 = 0.0;
        for ((a, b), s) in fixed.points.iter().zip(&plain.points).zip(&skewed.points) {
            worst = worst.max((a.position - b.position).norm());
            moved = moved.max((s.position - b.position).norm());
        }
        assert!(moved > 0.1, "skew should be visible: {moved}");
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            seed: 9,
            shape: PathShape::Straight { length: 20.0 },
            ..Default::default()
        };
        let a = SyntheticWorld::generate(&cfg);
        let b = SyntheticWorld::generate(&cfg);
        assert_eq!(a.scan(3), b.scan(3));
        assert_eq!(a.poses, b.poses);
    }
}
