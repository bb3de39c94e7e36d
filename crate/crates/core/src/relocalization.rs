//! Pose recovery from node correspondences after a tracking failure, and
//! the frame-drop simulator used to provoke such failures.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{OdometryConfig, RelocalizationConfig};
use crate::geometry::Pose;
use crate::odometry::{register, solve_weighted_alignment, FailureThresholds, OdometryError, RegistrationResult};
use crate::point::LabeledPoint;
use crate::voxel_map::VoxelHashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct RelocalizationOutcome {
    pub success: bool,
    /// Maps current (sensor-frame) centroids onto map centroids.
    pub pose: Pose,
    pub inlier_ratio: f64,
    pub inliers: usize,
}

impl RelocalizationOutcome {
    fn failure() -> Self {
        RelocalizationOutcome {
            success: false,
            pose: Pose::identity(),
            inlier_ratio: 0.0,
            inliers: 0,
        }
    }
}

/// Fraction of pairs `(c, g)` with `‖T c − g‖ < τ`, and their positions.
pub fn inlier_ratio(pairs: &[(Vector3<f64>, Vector3<f64>)], pose: &Pose, tau: f64) -> (f64, Vec<usize>) {
    if pairs.is_empty() {
        return (0.0, Vec::new());
    }
    let inliers: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, (c, g))| (pose.transform_point(c) - g).norm() < tau)
        .map(|(i, _)| i)
        .collect();
    (inliers.len() as f64 / pairs.len() as f64, inliers)
}

fn collinear(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
    let ab = b - a;
    let ac = c - a;
    let scale = ab.norm() * ac.norm();
    scale == 0.0 || ab.cross(&ac).norm() <= 1e-6 * scale
}

fn fit(pairs: &[(Vector3<f64>, Vector3<f64>)], idx: &[usize]) -> Option<Pose> {
    let corr: Vec<_> = idx.iter().map(|&i| (pairs[i].0, pairs[i].1, 1.0)).collect();
    solve_weighted_alignment(&corr).ok()
}

/// RANSAC over minimal 3-pair samples with SVD alignment, followed by a
/// refit on the inliers of the best hypothesis. No prior pose is used.
pub fn relocalize(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RelocalizationConfig,
    rng: &mut impl Rng,
) -> RelocalizationOutcome {
    let m = pairs.len();
    if m < 3 {
        return RelocalizationOutcome::failure();
    }
    let tau = cfg.inlier_distance;
    let mut best: Option<(Pose, Vec<usize>)> = None;
    for _ in 0..cfg.ransac_trials {
        // Redraw collinear samples a bounded number of times.
        let mut pick = None;
        for _ in 0..20 {
            let s = sample(rng, m, 3).into_vec();
            if !collinear(&pairs[s[0]].0, &pairs[s[1]].0, &pairs[s[2]].0) {
                pick = Some(s);
                break;
            }
        }
        let Some(s) = pick else { continue };
        let Some(pose) = fit(pairs, &s) else { continue };
        let (_, inl) = inlier_ratio(pairs, &pose, tau);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((pose, inl));
        }
        let count = best.as_ref().map_or(0, |(_, b)| b.len());
        if count as f64 / m as f64 >= cfg.early_exit_ratio {
            break;
        }
    }
    let Some((mut pose, mut inl)) = best else {
        return RelocalizationOutcome::failure();
    };
    if inl.len() >= 3 {
        if let Some(refit) = fit(pairs, &inl) {
            let (_, refit_inl) = inlier_ratio(pairs, &refit, tau);
            if refit_inl.len() >= inl.len() {
                pose = refit;
                inl = refit_inl;
            }
        }
    }
    let ratio = inl.len() as f64 / m as f64;
    RelocalizationOutcome {
        success: ratio > cfg.inlier_ratio,
        pose,
        inlier_ratio: ratio,
        inliers: inl.len(),
    }
}

/// [`relocalize`] with a generator seeded from the configuration and the
/// scan index, so runs are reproducible.
pub fn relocalize_seeded(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RelocalizationConfig,
    scan_index: usize,
) -> RelocalizationOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(scan_index as u64));
    relocalize(pairs, cfg, &mut rng)
}

/// Dense registration seeded with a relocalized pose. The result's
/// `failed` flag compares against `recovered`.
pub fn refine(
    map: &VoxelHashMap,
    scan: &[LabeledPoint],
    recovered: &Pose,
    cfg: &OdometryConfig,
    thresholds: &FailureThresholds,
) -> Result<RegistrationResult, OdometryError> {
    register(map, scan, recovered, cfg, thresholds)
}

/// Indices kept after removing, in every window of `window` scans, one run
/// of `run` consecutive scans at a seeded random offset.
pub fn simulate_dropped_frames(count: usize, run: usize, window: usize, seed: u64) -> Vec<usize> {
    assert!(run < window, "drop run must be shorter than its window");
    if run == 0 {
        return (0..count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; count];
    let mut start = 0;
    while start < count {
        let offset = rng.gen_range(0..=window - run);
        for d in drop.iter_mut().skip(start + offset).take(run) {
            *d = true;
        }
        start += window;
    }
    (0..count).filter(|&i| !drop[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{PathShape, SyntheticConfig, SyntheticWorld};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Pose::from_axis_angle(&axis.normalize(), rng.gen_range(-3.0..3.0))
            .with_translation(Vector3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-2.0..2.0)))
    }

    fn point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(0.0..3.0))
    }

    #[test]
    fn exact_correspondences_recover_the_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        let pairs: Vec<_> = (0..10)
            .map(|_| {
                let c = point(&mut rng);
                (c, t.transform_point(&c))
            })
            .collect();
        let out = relocalize(&pairs, &RelocalizationConfig::default(), &mut rng);
        assert!(out.success);
        assert_eq!(out.inlier_ratio, 1.0);
        assert!((out.pose.translation() - t.translation()).norm() < 1e-6);
        assert!(out.pose.between(&t).rotation_angle() < 1e-6);
    }

    #[test]
    fn too_few_pairs_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = vec![(Vector3::zeros(), Vector3::zeros()); 2];
        let out = relocalize(&pairs, &RelocalizationConfig::default(), &mut rng);
        assert!(!out.success);
        assert_eq!(out.inlier_ratio, 0.0);
    }

    #[test]
    fn ratio_is_order_invariant_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_pose(&mut rng);
        let mut pairs: Vec<_> = (0..8)
            .map(|_| {
                let c = point(&mut rng);
                (c, t.transform_point(&c))
            })
            .collect();
        pairs.extend((0..4).map(|_| (point(&mut rng), point(&mut rng))));
        let cfg = RelocalizationConfig::default();
        let a = relocalize(&pairs, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let b = relocalize(&shuffled, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a.inlier_ratio, b.inlier_ratio);
        assert!((a.pose.translation() - b.pose.translation()).norm() < 1e-9);

        // Moving the map frame by G moves the recovered pose to G·T.
        let g = random_pose(&mut rng);
        let moved: Vec<_> = pairs.iter().map(|(c, m)| (*c, g.transform_point(m))).collect();
        let c = relocalize(&moved, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let expect = g.compose(&a.pose);
        assert!((c.pose.translation() - expect.translation()).norm() < 1e-6);
        assert!(c.pose.between(&expect).rotation_angle() < 1e-6);
    }

    #[test]
    fn collinear_samples_alone_yield_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..6)
            .map(|i| {
                let c = Vector3::new(i as f64, 0.0, 0.0);
                (c, c)
            })
            .collect();
        assert!(!relocalize(&pairs, &RelocalizationConfig::default(), &mut rng).success);
    }

    #[test]
    fn drop_pattern_counts_and_determinism() {
        assert_eq!(simulate_dropped_frames(50, 0, 200, 1), (0..50).collect::<Vec<_>>());
        let kept = simulate_dropped_frames(400, 2, 200, 7);
        assert_eq!(kept.len(), 396);
        assert_eq!(kept, simulate_dropped_frames(400, 2, 200, 7));
        let kept = simulate_dropped_frames(400, 10, 200, 8);
        assert_eq!(kept.len(), 380);
        // Removed scans form one consecutive run per window.
        for w in 0..2 {
            let removed: Vec<usize> = (w * 200..(w + 1) * 200).filter(|i| !kept.contains(i)).collect();
            assert_eq!(removed.len(), 10);
            assert!(removed.windows(2).all(|p| p[1] == p[0] + 1));
        }
    }

    fn straight_world() -> SyntheticWorld {
        SyntheticWorld::generate(&SyntheticConfig {
            shape: PathShape::Straight { length: 40.0 },
            seed: 21,
            skew: false,
            ..Default::default()
        })
    }

    fn map_from(world: &SyntheticWorld, k: usize) -> VoxelHashMap {
        let mut map = VoxelHashMap::new(0.5, 20, 100.0);
        map.insert(&world.observe_world(&world.poses[k]));
        map
    }

    fn scan_points(world: &SyntheticWorld, k: usize) -> Vec<LabeledPoint> {
        crate::preprocess::voxel_downsample(&world.scan(k), 0.5).points
    }

    #[test]
    fn refinement_from_exact_and_perturbed_starts() {
        let world = straight_world();
        let k = 20;
        let map = map_from(&world, k);
        let scan = scan_points(&world, k);
        let cfg = OdometryConfig::default();
        let th = FailureThresholds::default();
        let truth = world.poses[k];
        let r = refine(&map, &scan, &truth, &cfg, &th).unwrap();
        assert!(r.iterations <= 2);
        let off = truth.compose(&Pose::from_translation(Vector3::new(0.4, -0.3, 0.0)));
        let r = refine(&map, &scan, &off, &cfg, &th).unwrap();
        assert!((r.pose.translation() - truth.translation()).norm() < 1e-2);
    }

    #[test]
    fn refinement_from_a_wrong_place_is_rejected() {
        let world = straight_world();
        let k = 20;
        let map = map_from(&world, k);
        let scan = scan_points(&world, k);
        let truth = world.poses[k];
        let wrong = truth.compose(&Pose::from_translation(Vector3::new(20.0, 0.0, 0.0)));
        match refine(&map, &scan, &wrong, &OdometryConfig::default(), &FailureThresholds::default()) {
            Err(_) => {}
            Ok(r) => assert!(r.failed || (r.pose.translation() - truth.translation()).norm() > 1.0),
        }
    }

    proptest::proptest! {
        #[test]
        fn dropped_frames_remove_one_run_per_window(
            count in 0usize..600,
            window in 2usize..60,
            run_frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let run = ((window - 1) as f64 * run_frac) as usize;
            let kept = simulate_dropped_frames(count, run, window, seed);
            proptest::prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(kept.iter().all(|&i| i < count));
            for start in (0..count).step_by(window) {
                let end = (start + window).min(count);
                let removed = (start..end).filter(|i| kept.binary_search(i).is_err()).collect::<Vec<_>>();
                proptest::prop_assert!(removed.len() <= run);
                if end - start == window {
                    proptest::prop_assert_eq!(removed.len(), run);
                }
                proptest::prop_assert!(removed.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }
    }
}
