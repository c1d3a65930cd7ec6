//! Synthetic multi-camera scenes with exact ground truth.
//!
//! Cameras sit on a ring aimed at the origin (world z up). Hands are a
//! 21-joint template carried along simple trajectories with a gentle finger
//! curl. Rendering projects every joint, then applies the detector noise model.
//! Every random draw is made whether or not its effect is enabled, so two
//! renderings that differ only in noise magnitudes consume identical random
//! streams.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};

use nalgebra::{Point2, Point3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{HandEstimate, HandStatus, Side, TrackId};
use crate::geometry::{CameraModel, Detection2D, Pose3D};
use crate::pipeline::{FrameAnnotation, FrameInput};
use crate::threshold_search::ConfigError;

pub const TEMPLATE_JOINTS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Trajectory {
    #[serde(alias = "linear")]
    Linear,
    #[serde(alias = "orbit")]
    Orbit,
    #[serde(alias = "handover")]
    Handover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_cameras: usize,
    pub rig_radius: f64,
    pub rig_height: f64,
    pub n_hands: usize,
    pub trajectory: Trajectory,
    pub duration_frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_cameras: 8,
            rig_radius: 1.5,
            rig_height: 1.0,
            n_hands: 4,
            trajectory: Trajectory::Linear,
            duration_frames: 200,
            fps: 20.0,
            seed: 0,
            image_width: 1280,
            image_height: 720,
            focal_px: 900.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_cameras < 2 {
            return Err(ConfigError::new("n_cameras", "must be at least 2"));
        }
        if !(1..=4).contains(&self.n_hands) {
            return Err(ConfigError::new("n_hands", "must lie in 1..=4"));
        }
        if self.duration_frames == 0 {
            return Err(ConfigError::new("duration_frames", "must be at least 1"));
        }
        for (field, v) in [
            ("rig_radius", self.rig_radius),
            ("fps", self.fps),
            ("focal_px", self.focal_px),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::new(field, "must be positive"));
            }
        }
        if !self.rig_height.is_finite() {
            return Err(ConfigError::new("rig_height", "must be finite"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ConfigError::new("image_width", "image size must be non-zero"));
        }
        Ok(())
    }
}

/// Ranges for the sampled detector confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfModel {
    pub det_conf: [f64; 2],
    pub keypoint_conf: [f64; 2],
}

impl Default for ConfModel {
    fn default() -> Self {
        Self {
            det_conf: [0.8, 1.0],
            keypoint_conf: [0.7, 1.0],
        }
    }
}

/// Hand-level occlusion: with probability `p_occluded` per (hand, frame),
/// the hand is seen by exactly `visible_cameras` randomly chosen cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub p_occluded: f64,
    pub visible_cameras: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    /// Per (camera, hand, frame) drop probability.
    pub p_miss: f64,
    /// Expected spurious detections per camera-frame.
    pub p_false_positive: f64,
    pub p_side_flip: f64,
    pub conf_model: ConfModel,
    pub occlusion: Option<Occlusion>,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let prob = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::new(field, "must lie in [0, 1]"))
            }
        };
        prob("p_miss", self.p_miss)?;
        prob("p_side_flip", self.p_side_flip)?;
        if !(self.pixel_sigma.is_finite() && self.pixel_sigma >= 0.0) {
            return Err(ConfigError::new("pixel_sigma", "must be non-negative"));
        }
        if !(self.p_false_positive.is_finite() && self.p_false_positive >= 0.0) {
            return Err(ConfigError::new("p_false_positive", "must be non-negative"));
        }
        for (field, [lo, hi]) in [
            ("conf_model.det_conf", self.conf_model.det_conf),
            ("conf_model.keypoint_conf", self.conf_model.keypoint_conf),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(ConfigError::new(field, "must be an ordered range inside [0, 1]"));
            }
        }
        if let Some(o) = &self.occlusion {
            prob("occlusion.p_occluded", o.p_occluded)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub cameras: Vec<CameraModel>,
    /// Ground truth, one record per frame, in the annotation schema.
    pub ground_truth: Vec<FrameAnnotation>,
}

/// Canonical flat right hand in its local frame: wrist at the origin,
/// fingers along +y, palm normal +z. `curl` bends each finger about local x.
pub fn hand_template(curl: [f64; 5]) -> Vec<Point3<f64>> {
    // (lateral offset, knuckle y, segment lengths)
    const FINGERS: [(f64, f64, [f64; 3]); 5] = [
        (-0.035, 0.035, [0.035, 0.030, 0.025]),
        (-0.022, 0.090, [0.040, 0.025, 0.020]),
        (-0.004, 0.092, [0.045, 0.028, 0.020]),
        (0.013, 0.088, [0.040, 0.026, 0.019]),
        (0.028, 0.080, [0.032, 0.020, 0.017]),
    ];
    let mut joints = Vec::with_capacity(TEMPLATE_JOINTS);
    joints.push(Point3::origin());
    for (f, (x, y, segs)) in FINGERS.iter().enumerate() {
        let mut p = Point3::new(*x, *y, 0.0);
        joints.push(p);
        let mut angle = 0.0;
        for s in segs {
            angle += curl[f];
            p += Vector3::new(0.0, angle.cos(), angle.sin()) * *s;
            joints.push(p);
        }
    }
    joints
}

fn hand_side(hand: usize) -> Side {
    if hand.is_multiple_of(2) {
        Side::Right
    } else {
        Side::Left
    }
}

/// Wrist position and yaw of `hand` at time `t` seconds.
fn placement(spec: &SceneSpec, hand: usize, t: f64) -> (Vector3<f64>, f64) {
    let n = spec.n_hands as f64;
    let phase = hand as f64 * 1.3;
    match spec.trajectory {
        Trajectory::Linear => {
            let base = TAU * hand as f64 / n.max(1.0) + PI / 4.0;
            let centre = Vector3::new(0.3 * base.cos(), 0.3 * base.sin(), 0.0);
            let dir = Vector3::new(-base.sin(), base.cos(), 0.3).normalize();
            // ping-pong with a 4 s period
            let u = (t / 4.0 + hand as f64 * 0.25).fract();
            let tri = 1.0 - 4.0 * (u - 0.5).abs();
            (centre + dir * (0.1 * tri), base - PI / 2.0)
        }
        Trajectory::Orbit => {
            let radius = (0.25f64).min(spec.rig_radius / 2.0 - 0.05).max(0.0);
            let a = TAU * hand as f64 / n + 0.4 * t;
            let pos = Vector3::new(radius * a.cos(), radius * a.sin(), 0.05 * (0.9 * t + phase).sin());
            (pos, a + PI / 2.0)
        }
        Trajectory::Handover => {
            if hand < 2 {
                // the pair meets every 5 s with wrists 3 cm apart
                let gap = 0.03 + 0.17 * (1.0 - (TAU * t / 5.0).cos());
                let sign = if hand == 0 { -1.0 } else { 1.0 };
                (Vector3::new(sign * gap / 2.0, 0.0, 0.0), 0.0)
            } else {
                let a = if hand == 2 { PI / 2.0 } else { -PI / 2.0 };
                let pos = Vector3::new(0.05 * (0.7 * t).sin(), 0.4 * a.sin(), 0.0);
                (pos, a)
            }
        }
    }
}

/// Ground-truth pose of `hand` at time `t` seconds.
pub fn hand_pose(spec: &SceneSpec, hand: usize, t: f64) -> Pose3D {
    let mut curl = [0.0; 5];
    for (f, c) in curl.iter_mut().enumerate() {
        *c = 0.15 + 0.1 * (1.7 * t + 0.9 * f as f64 + hand as f64).sin();
    }
    let (wrist, yaw) = placement(spec, hand, t);
    let rot = Rotation3::from_euler_angles(0.0, 0.0, yaw) * Rotation3::from_euler_angles(0.25, 0.0, 0.0);
    let mirror = match hand_side(hand) {
        Side::Right => 1.0,
        Side::Left => -1.0,
    };
    Pose3D::new(
        hand_template(curl)
            .into_iter()
            .map(|p| Point3::from(rot * Vector3::new(mirror * p.x, p.y, p.z) + wrist))
            .collect(),
    )
}

pub fn rig_cameras(spec: &SceneSpec) -> Result<Vec<CameraModel>, ConfigError> {
    (0..spec.n_cameras)
        .map(|k| {
            let a = TAU * k as f64 / spec.n_cameras as f64;
            let eye = Point3::new(spec.rig_radius * a.cos(), spec.rig_radius * a.sin(), spec.rig_height);
            CameraModel::look_at(
                format!("cam{k}"),
                spec.focal_px,
                spec.focal_px,
                spec.image_width as f64 / 2.0,
                spec.image_height as f64 / 2.0,
                spec.image_width,
                spec.image_height,
                eye,
                Point3::origin(),
                Vector3::z(),
            )
            .map_err(|e| ConfigError::new("rig", e.to_string()))
        })
        .collect()
}

/// Cameras and ground-truth poses for a scene. Fully determined by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, ConfigError> {
    spec.validate()?;
    let cameras = rig_cameras(spec)?;
    let ground_truth = (0..spec.duration_frames)
        .map(|f| {
            let t = f as f64 / spec.fps;
            let hands = (0..spec.n_hands)
                .map(|h| HandEstimate {
                    track_id: h as TrackId + 1,
                    pose: hand_pose(spec, h, t),
                    side: hand_side(h),
                    side_confidence: 1.0,
                    contributing: BTreeSet::new(),
                    status: HandStatus::Fused,
                    interpolated_joints: BTreeSet::new(),
                })
                .collect();
            FrameAnnotation {
                frame_index: f as u64,
                hands,
                accepted_threshold: 0.0,
                skipped: BTreeSet::new(),
                manual_overrides: Vec::new(),
            }
        })
        .collect();
    Ok(SyntheticScene {
        spec: spec.clone(),
        cameras,
        ground_truth,
    })
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Projects ground truth into detections under `noise`. Each frame draws
/// from its own random stream, so frames can be rendered independently.
pub fn render_detections(
    ground_truth: &[FrameAnnotation],
    cameras: &[CameraModel],
    noise: &NoiseSpec,
    seed: u64,
    fps: f64,
) -> Result<Vec<FrameInput>, ConfigError> {
    noise.validate()?;
    let poisson = (noise.p_false_positive > 0.0)
        .then(|| Poisson::new(noise.p_false_positive))
        .transpose()
        .map_err(|e| ConfigError::new("p_false_positive", e.to_string()))?;
    Ok(ground_truth
        .par_iter()
        .map(|gt| render_frame(gt, cameras, noise, poisson.as_ref(), seed, fps))
        .collect())
}

fn render_frame(
    gt: &FrameAnnotation,
    cameras: &[CameraModel],
    noise: &NoiseSpec,
    poisson: Option<&Poisson<f64>>,
    seed: u64,
    fps: f64,
) -> FrameInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(gt.frame_index);

    // which cameras see each hand this frame
    let n = cameras.len();
    let visible_in: Vec<Vec<bool>> = gt
        .hands
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            match noise.occlusion {
                Some(o) if u < o.p_occluded => {
                    let mut v = vec![false; n];
                    for &c in order.iter().take(o.visible_cameras) {
                        v[c] = true;
                    }
                    v
                }
                _ => vec![true; n],
            }
        })
        .collect();

    let mut detections = BTreeMap::new();
    for (c, cam) in cameras.iter().enumerate() {
        let mut dets = Vec::new();
        for (h, hand) in gt.hands.iter().enumerate() {
            let miss: f64 = rng.random();
            let flip: f64 = rng.random();
            let det_conf = uniform(&mut rng, noise.conf_model.det_conf);
            let side_u: f64 = rng.random();
            let j = hand.pose.joint_count();
            let mut keypoints = Vec::with_capacity(j);
            let mut conf = Vec::with_capacity(j);
            let mut seen = 0;
            for p in &hand.pose.joints {
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                let kc = uniform(&mut rng, noise.conf_model.keypoint_conf);
                let visible = cam.depth(p) > 0.2;
                let proj = cam.project(p).ok().filter(|px| visible && cam.contains_pixel(px));
                match proj {
                    Some(px) => {
                        seen += 1;
                        keypoints.push(Point2::new(
                            px.x + noise.pixel_sigma * zx,
                            px.y + noise.pixel_sigma * zy,
                        ));
                        conf.push(kc);
                    }
                    None => {
                        keypoints.push(Point2::new(0.0, 0.0));
                        conf.push(0.0);
                    }
                }
            }
            if !visible_in[h][c] || miss < noise.p_miss || 2 * seen < j || conf.first() == Some(&0.0) {
                continue;
            }
            let side_prob = match hand.side {
                Side::Right => 0.9 + 0.1 * side_u,
                Side::Left => 0.1 * side_u,
            };
            let side_prob = if flip < noise.p_side_flip { 1.0 - side_prob } else { side_prob };
            let bbox = Detection2D::bbox_from_keypoints(&keypoints, &conf, f64::MIN_POSITIVE);
            dets.push(Detection2D {
                keypoints,
                keypoint_conf: conf,
                bbox,
                side_prob,
                det_conf,
            });
        }

        // false positives: shifted, jittered copies of real detections
        let count = poisson.map_or(0, |p| p.sample(&mut rng) as usize);
        let real = dets.len();
        for _ in 0..count {
            let pick: usize = rng.random_range(0..real.max(1));
            let dx = rng.random_range(-200.0..200.0);
            let dy = rng.random_range(-120.0..120.0);
            if real == 0 {
                continue;
            }
            let mut ghost = dets[pick].clone();
            for kp in &mut ghost.keypoints {
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                kp.x += dx + 3.0 * jx;
                kp.y += dy + 3.0 * jy;
            }
            ghost.det_conf *= 0.6;
            ghost.bbox = Detection2D::bbox_from_keypoints(&ghost.keypoints, &ghost.keypoint_conf, f64::MIN_POSITIVE);
            dets.push(ghost);
        }
        dets.shuffle(&mut rng);
        detections.insert(cam.id.clone(), dets);
    }
    FrameInput {
        frame_index: gt.frame_index,
        timestamp: gt.frame_index as f64 / fps,
        detections,
    }
}
