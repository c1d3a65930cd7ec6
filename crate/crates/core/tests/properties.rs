//! Randomized properties across modules.

use std::collections::BTreeSet;

use handlift_core::clustering::{
    associate_tracks, build_proposals, cluster_proposals, connected_components, fuse_cluster, DetectionRef,
    DistanceMatrix, Proposal3D,
};
use handlift_core::geometry::{reprojection_error, triangulate_multiview};
use handlift_core::metrics::{evaluate, mpjpe, pck_auc, tracking_accuracy, MetricsConfig};
use handlift_core::pipeline::{FrameAnnotation, FrameInput, PipelineConfig, SessionState};
use handlift_core::synth::{generate_scene, render_detections, NoiseSpec, SceneSpec, SyntheticScene, Trajectory};
use handlift_core::threshold_search::{
    candidate_thresholds, evaluate_threshold, select, select_cd, select_ns, select_repr, Criterion, FrameContext,
};
use handlift_core::{CameraModel, Detection2D, MatchingMode, Pose3D};
use nalgebra::{Point2, Point3, Vector3};
use proptest::prelude::*;

fn camera(yaw: f64, pitch: f64, dist: f64, f: f64) -> CameraModel {
    let eye = Point3::new(dist * pitch.cos() * yaw.cos(), dist * pitch.cos() * yaw.sin(), dist * pitch.sin());
    CameraModel::look_at("c", f, f, 640.0, 360.0, 1280, 720, eye, Point3::origin(), Vector3::z()).unwrap()
}

fn arb_camera() -> impl Strategy<Value = CameraModel> {
    (0.0..std::f64::consts::TAU, -1.0f64..1.2, 1.0f64..4.0, 400.0f64..1600.0).prop_map(|(y, p, d, f)| camera(y, p, d, f))
}

fn arb_point() -> impl Strategy<Value = Point3<f64>> {
    (-0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn detection(keypoints: Vec<Point2<f64>>, conf: Vec<f64>) -> Detection2D {
    Detection2D {
        bbox: Detection2D::bbox_from_keypoints(&keypoints, &conf, 0.0),
        keypoints,
        keypoint_conf: conf,
        side_prob: 0.5,
        det_conf: 1.0,
    }
}

fn arrange(cameras: &[CameraModel], f: &FrameInput) -> Vec<Vec<Detection2D>> {
    cameras.iter().map(|c| f.detections.get(&c.id).cloned().unwrap_or_default()).collect()
}

fn noisy_scene(seed: u64, hands: usize, sigma: f64, frames: usize) -> (SyntheticScene, Vec<FrameInput>) {
    let spec = SceneSpec {
        seed,
        n_hands: hands,
        duration_frames: frames,
        trajectory: [Trajectory::Linear, Trajectory::Orbit, Trajectory::Handover][seed as usize % 3],
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let noise = NoiseSpec {
        pixel_sigma: sigma,
        p_miss: 0.1,
        p_false_positive: 0.3,
        ..NoiseSpec::default()
    };
    let frames = render_detections(&scene.ground_truth, &scene.cameras, &noise, seed, spec.fps).unwrap();
    (scene, frames)
}

/// Pipeline state warmed on all frames but the last, and the last frame.
fn warm(seed: u64, hands: usize, sigma: f64, mode: MatchingMode) -> (SessionState, Vec<Vec<Detection2D>>) {
    let (scene, frames) = noisy_scene(seed, hands, sigma, 6);
    let mut config = PipelineConfig::default();
    config.search.mode = mode;
    let mut state = SessionState::new(scene.cameras.clone(), config).unwrap();
    for f in &frames[..5] {
        state.annotate(f).unwrap();
    }
    let dets = arrange(&scene.cameras, &frames[5]);
    (state, dets)
}

fn context<'a>(state: &'a SessionState, dets: &'a [Vec<Detection2D>]) -> FrameContext<'a> {
    let proposals = build_proposals(&state.cameras, dets, &state.config.proposal);
    FrameContext::new(&state.cameras, dets, &state.tracks, proposals).with_conf_cutoff(state.config.proposal.conf_cutoff)
}

fn random_proposals(centers: &[(f64, f64)], picks: &[(usize, f64, u8, u8, u8)]) -> Vec<Proposal3D> {
    picks
        .iter()
        .map(|&(c, jitter, cam, idx_a, idx_b)| {
            let (x, y) = centers[c % centers.len()];
            let a = (cam % 6) as usize;
            let b = (a + 1 + (idx_a as usize % 5)) % 6;
            Proposal3D {
                pose: Pose3D::new((0..21).map(|j| Point3::new(x + jitter, y - jitter, 0.004 * j as f64)).collect()),
                source: [DetectionRef::new(a, idx_a as usize % 3), DetectionRef::new(b, idx_b as usize % 3)],
                mean_conf: 1.0,
            }
        })
        .collect()
}

// ------------------------------------------------------------------ geometry

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn zero_noise_views_recover_the_point(cams in prop::collection::vec(arb_camera(), 2..6), x in arb_point()) {
        let usable: Vec<&CameraModel> = cams.iter().filter(|c| (0.2..=5.0).contains(&c.depth(&x))).collect();
        prop_assume!(usable.len() >= 2);
        let obs: Vec<Point2<f64>> = usable.iter().map(|c| c.project(&x).unwrap()).collect();
        let got = triangulate_multiview(&usable, &obs, &vec![1.0; usable.len()]).unwrap();
        prop_assert!((got - x).norm() < 1e-7, "error {}", (got - x).norm());
    }

    #[test]
    fn projection_is_scale_invariant(cam in arb_camera(), x in arb_point(), lambda in 0.01f64..100.0) {
        let pc = cam.to_camera_frame(&x);
        prop_assume!(pc.z > 0.1);
        let a = cam.project_camera_frame(&pc).unwrap();
        let b = cam.project_camera_frame(&Point3::from(pc.coords * lambda)).unwrap();
        prop_assert!((a - b).norm() <= 1e-9 * a.coords.norm().max(1.0));
    }

    #[test]
    fn reprojection_error_is_additive_and_vanishes_only_at_zero(
        cams in prop::collection::vec(arb_camera(), 2..6),
        x in arb_point(),
        split in 1usize..5,
        bump in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 21),
        conf in prop::collection::vec(0.0f64..1.0, 21),
    ) {
        let pose = Pose3D::new((0..21).map(|j| x + Vector3::new(0.0, 0.0, 0.003 * j as f64)).collect());
        let exact: Vec<Detection2D> = cams
            .iter()
            .map(|c| detection(pose.joints.iter().map(|j| c.project(j).unwrap_or(Point2::origin())).collect(), conf.clone()))
            .collect();
        prop_assume!(cams.iter().all(|c| pose.joints.iter().all(|j| c.depth(j) > 0.1)));
        let pairs: Vec<(&CameraModel, &Detection2D)> = cams.iter().zip(&exact).collect();
        prop_assert!(reprojection_error(&pose, &pairs) < 1e-12);

        let moved: Vec<Detection2D> = exact
            .iter()
            .map(|d| detection(d.keypoints.iter().zip(&bump).map(|(p, b)| p + nalgebra::Vector2::new(b.0, b.1)).collect(), conf.clone()))
            .collect();
        let pairs: Vec<(&CameraModel, &Detection2D)> = cams.iter().zip(&moved).collect();
        let total = reprojection_error(&pose, &pairs);
        prop_assert!(total >= 0.0);
        let included_nonzero = conf.iter().zip(&bump).any(|(c, b)| *c >= 0.05 && (b.0 != 0.0 || b.1 != 0.0));
        prop_assert_eq!(total > 0.0, included_nonzero);
        let k = split.min(pairs.len() - 1);
        let parts = reprojection_error(&pose, &pairs[..k]) + reprojection_error(&pose, &pairs[k..]);
        prop_assert!((total - parts).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn multiview_ignores_observation_order(
        cams in prop::collection::vec(arb_camera(), 2..7),
        x in arb_point(),
        noise in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 7),
        rotate in 1usize..6,
    ) {
        prop_assume!(cams.iter().all(|c| c.depth(&x) > 0.2));
        let obs: Vec<Point2<f64>> = cams
            .iter()
            .zip(&noise)
            .map(|(c, n)| c.project(&x).unwrap() + nalgebra::Vector2::new(n.0, n.1))
            .collect();
        let refs: Vec<&CameraModel> = cams.iter().collect();
        let w = vec![1.0; cams.len()];
        let a = triangulate_multiview(&refs, &obs, &w).unwrap();
        let r = rotate % cams.len();
        let mut refs2 = refs.clone();
        let mut obs2 = obs.clone();
        refs2.rotate_left(r);
        obs2.rotate_left(r);
        refs2.reverse();
        obs2.reverse();
        let b = triangulate_multiview(&refs2, &obs2, &w).unwrap();
        prop_assert!((a - b).norm() < 1e-12, "moved {}", (a - b).norm());
    }
}

// ------------------------------------------------------------------ clustering

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn components_only_merge_as_delta_grows(
        centers in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 1..4),
        picks in prop::collection::vec((0usize..4, 0.0f64..0.03, any::<u8>(), any::<u8>(), any::<u8>()), 1..25),
        d1 in 0.001f64..0.08,
        extra in 0.0f64..0.08,
    ) {
        let props = random_proposals(&centers, &picks);
        let dist = DistanceMatrix::new(&props);
        let small = connected_components(&dist, d1);
        let large = connected_components(&dist, d1 + extra);
        for c in &small {
            prop_assert!(large.iter().any(|l| c.iter().all(|p| l.contains(p))));
        }
    }

    #[test]
    fn clusters_are_conflict_free_and_disjoint(
        centers in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 1..4),
        picks in prop::collection::vec((0usize..4, 0.0f64..0.03, any::<u8>(), any::<u8>(), any::<u8>()), 1..25),
        delta in 0.001f64..0.2,
    ) {
        let props = random_proposals(&centers, &picks);
        let mut seen = BTreeSet::new();
        let mut covered = BTreeSet::new();
        for c in cluster_proposals(&props, delta) {
            prop_assert!(c.is_conflict_free());
            for d in &c.detections {
                prop_assert!(seen.insert(*d), "detection {:?} in two clusters", d);
            }
            covered.extend(c.proposals.iter().copied());
        }
        prop_assert!(covered.len() <= props.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn association_is_a_matching(seed in 0u64..1000, hands in 2usize..=4, dm in any::<bool>()) {
        let mode = if dm { MatchingMode::Dm } else { MatchingMode::Tm };
        let (state, dets) = warm(seed, hands, 1.5, mode);
        let props = build_proposals(&state.cameras, &dets, &state.config.proposal);
        let mut clusters = cluster_proposals(&props, state.config.search.delta_default);
        let a = associate_tracks(&mut clusters, &props, &state.tracks, state.config.search.association_gate, mode);
        let assigned: Vec<_> = a.cluster_track.iter().flatten().collect();
        let unique: BTreeSet<_> = assigned.iter().collect();
        prop_assert_eq!(assigned.len(), unique.len());
        prop_assert_eq!(a.cluster_track.len(), clusters.len());
        for t in &a.unmatched_tracks {
            prop_assert!(!unique.contains(&t));
        }
        if dm {
            for (c, t) in clusters.iter().zip(&a.cluster_track) {
                prop_assert!(t.is_none() || c.is_dm_valid());
            }
        }
    }

    #[test]
    fn fusing_twice_is_bitwise_stable(seed in 0u64..1000, sigma in 0.0f64..2.0) {
        let (state, dets) = warm(seed, 3, sigma, MatchingMode::Tm);
        let props = build_proposals(&state.cameras, &dets, &state.config.proposal);
        for c in cluster_proposals(&props, state.config.search.delta_default) {
            let a = fuse_cluster(&c, &state.cameras, &dets, 1, None, 0.05);
            let b = fuse_cluster(&c, &state.cameras, &dets, 1, None, 0.05);
            prop_assert_eq!(a.ok(), b.ok());
        }
    }
}

// ------------------------------------------------------------------ threshold search

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn criteria_are_pure_and_bounded(seed in 0u64..1000, hands in 2usize..=4, sigma in 0.5f64..3.0, dm in any::<bool>()) {
        let mode = if dm { MatchingMode::Dm } else { MatchingMode::Tm };
        let (state, dets) = warm(seed, hands, sigma, mode);
        let ctx = context(&state, &dets);
        let cfg = &state.config.search;
        for criterion in [Criterion::Ns, Criterion::Cd, Criterion::Repr] {
            let mut c = *cfg;
            c.criterion = criterion;
            let a = select(&ctx, state.last_accepted, &c);
            let b = select(&context(&state, &dets), state.last_accepted, &c);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.accepted_threshold >= cfg.delta_min && a.accepted_threshold <= cfg.delta_max);
        }
    }

    #[test]
    fn cd_stops_at_the_first_full_cover(seed in 0u64..1000, hands in 2usize..=4, sigma in 0.5f64..3.0) {
        let (state, dets) = warm(seed, hands, sigma, MatchingMode::Tm);
        let ctx = context(&state, &dets);
        let cfg = &state.config.search;
        let got = select_cd(&ctx, state.last_accepted, cfg);
        let candidates = candidate_thresholds(state.last_accepted, cfg);
        let first_full = candidates
            .iter()
            .position(|&d| evaluate_threshold(&ctx, d, cfg).covered.len() == state.tracks.len());
        if let Some(k) = first_full {
            prop_assert_eq!(got.searched_offsets, k);
            prop_assert_eq!(got.accepted_threshold, candidates[k]);
        } else {
            prop_assert_eq!(got.searched_offsets, candidates.len() - 1);
        }
    }

    /// Repr pools every candidate, so wherever the size tier lets NS's pick
    /// compete (it has at least `cluster_size_min` proposals and the default
    /// threshold is a candidate), Repr's pick costs no more.
    #[test]
    fn repr_never_costs_more_than_ns_within_the_tier(seed in 0u64..1000, hands in 2usize..=4, sigma in 0.5f64..3.0, dm in any::<bool>()) {
        let mode = if dm { MatchingMode::Dm } else { MatchingMode::Tm };
        let (state, dets) = warm(seed, hands, sigma, mode);
        let ctx = context(&state, &dets);
        let cfg = &state.config.search;
        let ns = select_ns(&ctx, cfg);
        let repr = select_repr(&ctx, cfg.delta_default, cfg);
        let repr_picks: Vec<_> = repr.per_hand.values().flatten().collect();
        for (t, n) in &ns.per_hand {
            let (Some(n), Some(Some(r))) = (n, repr.per_hand.get(t)) else { continue };
            if n.cluster.proposals.len() < cfg.cluster_size_min {
                continue;
            }
            // another track may hold a detection of NS's pick; then Repr
            // had to settle for a disjoint option
            let contested = repr_picks
                .iter()
                .any(|o| o.estimate.track_id != *t && !o.cluster.detections.is_disjoint(&n.cluster.detections));
            if !contested {
                prop_assert!(r.cost <= n.cost, "track {}: repr {} > ns {}", t, r.cost, n.cost);
            }
        }
    }
}

// ------------------------------------------------------------------ metrics and synth

fn shifted(seq: &[FrameAnnotation], v: Vector3<f64>) -> Vec<FrameAnnotation> {
    let mut out = seq.to_vec();
    for f in &mut out {
        for h in &mut f.hands {
            h.pose = h.pose.translated(&v);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metric_identities(seed in 0u64..1000, hands in 1usize..=4, v in (-0.01f64..0.01, -0.01f64..0.01, -0.01f64..0.01), tau in 0.001f64..0.1) {
        let gt = generate_scene(&SceneSpec { seed, n_hands: hands, duration_frames: 10, ..SceneSpec::default() }).unwrap().ground_truth;
        let cfg = MetricsConfig::default();
        prop_assert_eq!(mpjpe(&gt, &gt, &cfg).unwrap(), 0.0);
        prop_assert_eq!(pck_auc(&gt, &gt, &cfg).unwrap(), 1.0);
        let gated = MetricsConfig { track_tau: tau, ..cfg };
        prop_assert_eq!(tracking_accuracy(&gt, &gt, &gated).unwrap(), 1.0);

        let v = Vector3::new(v.0, v.1, v.2);
        let moved = shifted(&gt, v);
        let m = mpjpe(&gt, &moved, &cfg).unwrap();
        prop_assert!((m - v.norm() * 1000.0).abs() < 1e-9, "{} vs {}", m, v.norm() * 1000.0);

        let worse = shifted(&gt, v * 2.0);
        prop_assert!(pck_auc(&gt, &worse, &cfg).unwrap() <= pck_auc(&gt, &moved, &cfg).unwrap());

        let mut perm = moved.clone();
        for f in &mut perm {
            f.hands.rotate_left(1);
        }
        prop_assert_eq!(evaluate(&gt, &perm, &cfg).unwrap(), evaluate(&gt, &moved, &cfg).unwrap());
        let r = evaluate(&gt, &worse, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.pck_auc) && r.track_acc <= 1.0 && r.mpjpe_mm >= 0.0);
    }

    #[test]
    fn synth_is_seed_deterministic_and_exact(seed in 0u64..10_000, hands in 1usize..=4) {
        let spec = SceneSpec { seed, n_hands: hands, duration_frames: 5, ..SceneSpec::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        prop_assert_eq!(&a.ground_truth, &b.ground_truth);
        let noisy = NoiseSpec { pixel_sigma: 1.0, p_miss: 0.2, p_false_positive: 0.5, ..NoiseSpec::default() };
        prop_assert_eq!(
            render_detections(&a.ground_truth, &a.cameras, &noisy, seed, 20.0).unwrap(),
            render_detections(&b.ground_truth, &b.cameras, &noisy, seed, 20.0).unwrap()
        );

        // detections are shuffled per camera; find each hand's by its wrist
        let exact = render_detections(&a.ground_truth, &a.cameras, &NoiseSpec::default(), seed, 20.0).unwrap();
        for (gt, frame) in a.ground_truth.iter().zip(&exact) {
            for hand in &gt.hands {
                let own: Vec<(&CameraModel, &Detection2D)> = a
                    .cameras
                    .iter()
                    .filter_map(|c| {
                        let wrist = c.project(&hand.pose.joints[0]).ok()?;
                        let d = frame.detections.get(&c.id)?.iter().find(|d| (d.keypoints[0] - wrist).norm() < 1e-6)?;
                        Some((c, d))
                    })
                    .collect();
                for j in 0..hand.pose.joints.len() {
                    let (cams, obs): (Vec<&CameraModel>, Vec<Point2<f64>>) =
                        own.iter().filter(|(_, d)| d.keypoint_conf[j] > 0.0).map(|(c, d)| (*c, d.keypoints[j])).unzip();
                    if cams.len() >= 2 {
                        let p = triangulate_multiview(&cams, &obs, &vec![1.0; cams.len()]).unwrap();
                        prop_assert!((p - hand.pose.joints[j]).norm() < 1e-7);
                    }
                }
            }
        }
    }
}
