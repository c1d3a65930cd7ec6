//! Pinhole camera model, projection, DLT triangulation and reprojection error.
//!
//! Pixel coordinates are assumed undistorted. Extrinsics map world points
//! (meters) into the camera frame, with +Z pointing forward.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point2, Point3, RowVector4, SymmetricEigen, Vector3};
use thiserror::Error;

/// Keypoints per hand in the standard full-hand convention.
pub const DEFAULT_JOINT_COUNT: usize = 21;

/// Keypoints with a confidence below this are ignored by triangulation and
/// reprojection sums.
pub const DEFAULT_CONF_CUTOFF: f64 = 0.05;

const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_BASELINE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind camera {camera} (depth {depth})")]
    BehindCamera { camera: String, depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("triangulated point has non-positive depth in camera {camera}")]
    CheiralityViolation { camera: String },
    #[error("need at least 2 usable observations, got {0}")]
    InsufficientViews(usize),
    #[error("invalid camera {camera:?}: field `{field}` {reason}")]
    InvalidCamera {
        camera: String,
        field: &'static str,
        reason: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid world-to-camera transform.
    pub extrinsic: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Builds a camera and checks its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            id: id.into(),
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. Image x points right and image y
    /// points down, with `up` giving the world's up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeometryError::DegenerateGeometry(
                "look_at: up vector parallel to viewing direction".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        let mut extrinsic = Matrix4::identity();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(id, fx, fy, cx, cy, extrinsic, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |field: &'static str, reason: String| GeometryError::InvalidCamera {
            camera: self.id.clone(),
            field,
            reason,
        };
        for (field, v) in [("fx", self.fx), ("fy", self.fy)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(bad(field, format!("must be finite, got {v}")));
            }
        }
        if self.width == 0 {
            return Err(bad("width", "must be positive".into()));
        }
        if self.height == 0 {
            return Err(bad("height", "must be positive".into()));
        }
        if self.extrinsic.iter().any(|v| !v.is_finite()) {
            return Err(bad("extrinsic", "contains non-finite values".into()));
        }
        let bottom = self.extrinsic.fixed_view::<1, 4>(3, 0);
        if bottom != RowVector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(bad("extrinsic", "last row must be [0, 0, 0, 1]".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(bad(
                "extrinsic",
                format!("rotation block is not orthonormal (max |R^T R - I| = {err:e})"),
            ));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(bad(
                "extrinsic",
                format!("rotation determinant must be +1, got {det}"),
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation().transpose() * self.translation()))
    }

    pub fn to_camera_frame(&self, point: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * point.coords + self.translation())
    }

    pub fn depth(&self, point: &Point3<f64>) -> f64 {
        self.to_camera_frame(point).z
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// The 3x4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        self.intrinsic_matrix() * self.extrinsic.fixed_view::<3, 4>(0, 0)
    }

    /// Projects a point given in this camera's frame.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN depth is behind too
    pub fn project_camera_frame(&self, pc: &Point3<f64>) -> Result<Point2<f64>, GeometryError> {
        if !(pc.z > 0.0) {
            return Err(GeometryError::BehindCamera {
                camera: self.id.clone(),
                depth: pc.z,
            });
        }
        Ok(Point2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    pub fn project(&self, point: &Point3<f64>) -> Result<Point2<f64>, GeometryError> {
        self.project_camera_frame(&self.to_camera_frame(point))
    }

    pub fn contains_pixel(&self, px: &Point2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Squared image diagonal in px².
    pub fn diagonal_sq(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        w * w + h * h
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project(camera: &CameraModel, point: &Point3<f64>) -> Result<Point2<f64>, GeometryError> {
    camera.project(point)
}

/// A 3D hand pose. Proposals may carry non-finite joints where triangulation
/// was not possible; fused poses are always complete.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Point3<f64>>,
}

impl Pose3D {
    pub fn new(joints: Vec<Point3<f64>>) -> Self {
        Self { joints }
    }

    pub fn missing(joint_count: usize) -> Self {
        Self {
            joints: vec![Point3::new(f64::NAN, f64::NAN, f64::NAN); joint_count],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn is_joint_finite(&self, j: usize) -> bool {
        self.joints[j].iter().all(|v| v.is_finite())
    }

    pub fn is_complete(&self) -> bool {
        (0..self.joints.len()).all(|j| self.is_joint_finite(j))
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        Self {
            joints: self.joints.iter().map(|p| p + offset).collect(),
        }
    }
}

/// One hand detection in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub keypoints: Vec<Point2<f64>>,
    pub keypoint_conf: Vec<f64>,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// Probability that this is a right hand.
    pub side_prob: f64,
    pub det_conf: f64,
}

impl Detection2D {
    pub fn joint_count(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.keypoints.len() != self.keypoint_conf.len() {
            return Err(GeometryError::InvalidInput(format!(
                "{} keypoints but {} confidences",
                self.keypoints.len(),
                self.keypoint_conf.len()
            )));
        }
        if self.keypoints.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(GeometryError::InvalidInput("non-finite keypoint".into()));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.keypoint_conf.iter().all(|&c| in_unit(c))
            || !in_unit(self.side_prob)
            || !in_unit(self.det_conf)
        {
            return Err(GeometryError::InvalidInput(
                "confidence outside [0, 1]".into(),
            ));
        }
        if !(self.bbox[2] >= 0.0 && self.bbox[3] >= 0.0) {
            return Err(GeometryError::InvalidInput("negative bbox size".into()));
        }
        Ok(())
    }

    /// Tight box around keypoints with confidence at or above `cutoff`.
    pub fn bbox_from_keypoints(keypoints: &[Point2<f64>], conf: &[f64], cutoff: f64) -> [f64; 4] {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (p, &c) in keypoints.iter().zip(conf) {
            if c >= cutoff {
                lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        if lo.x > hi.x {
            return [0.0; 4];
        }
        [lo.x, lo.y, hi.x - lo.x, hi.y - lo.y]
    }
}

fn dlt_rows(camera: &CameraModel, px: &Point2<f64>) -> [RowVector4<f64>; 2] {
    let p = camera.projection_matrix();
    let r = [
        px.x * p.row(2) - p.row(0),
        px.y * p.row(2) - p.row(1),
    ];
    r.map(|row| {
        let n = row.norm();
        if n > 0.0 {
            row / n
        } else {
            row
        }
    })
}

/// Null vector of the stacked, row-normalized DLT system `A`, taken as the
/// eigenvector of `AᵀA` with the smallest eigenvalue (the right singular
/// vector of the smallest singular value of `A`).
fn solve_dlt(cameras: &[&CameraModel], observations: &[Point2<f64>], weights: &[f64]) -> Result<Point3<f64>, GeometryError> {
    let mut normal = Matrix4::<f64>::zeros();
    for ((cam, px), &w) in cameras.iter().zip(observations).zip(weights) {
        for row in dlt_rows(cam, px) {
            let r = row * w;
            normal += r.transpose() * r;
        }
    }
    let eig = SymmetricEigen::new(normal);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let x = eig.eigenvectors.column(idx);
    if x[3].abs() < 1e-15 * x.norm() {
        return Err(GeometryError::DegenerateGeometry(
            "triangulated point at infinity".into(),
        ));
    }
    Ok(Point3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn check_cheirality(cameras: &[&CameraModel], point: &Point3<f64>) -> Result<(), GeometryError> {
    for cam in cameras {
        if !(cam.depth(point) > 0.0) {
            return Err(GeometryError::CheiralityViolation {
                camera: cam.id.clone(),
            });
        }
    }
    Ok(())
}

fn max_baseline(cameras: &[&CameraModel]) -> f64 {
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    let mut best: f64 = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.max((centers[i] - centers[j]).norm());
        }
    }
    best
}

/// Two-view linear triangulation.
pub fn triangulate_pair(
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    kp_a: &Point2<f64>,
    kp_b: &Point2<f64>,
) -> Result<Point3<f64>, GeometryError> {
    let finite = |p: &Point2<f64>| p.x.is_finite() && p.y.is_finite();
    let seen = finite(kp_a) as usize + finite(kp_b) as usize;
    if seen < 2 {
        return Err(GeometryError::InsufficientViews(seen));
    }
    let cams = [cam_a, cam_b];
    if max_baseline(&cams) <= MIN_BASELINE {
        return Err(GeometryError::DegenerateGeometry(
            "camera centers coincide".into(),
        ));
    }
    let point = solve_dlt(&cams, &[*kp_a, *kp_b], &[1.0, 1.0])?;
    check_cheirality(&cams, &point)?;
    Ok(point)
}

/// Weighted multi-view linear triangulation. Observations with zero weight
/// are dropped; the remaining weights are scaled so the largest is one.
pub fn triangulate_multiview(
    cameras: &[&CameraModel],
    observations: &[Point2<f64>],
    weights: &[f64],
) -> Result<Point3<f64>, GeometryError> {
    if cameras.len() != observations.len() || cameras.len() != weights.len() {
        return Err(GeometryError::InvalidInput(format!(
            "{} cameras, {} observations, {} weights",
            cameras.len(),
            observations.len(),
            weights.len()
        )));
    }
    let mut used_cams = Vec::with_capacity(cameras.len());
    let mut used_obs = Vec::with_capacity(cameras.len());
    let mut used_w = Vec::with_capacity(cameras.len());
    for ((cam, obs), &w) in cameras.iter().zip(observations).zip(weights) {
        if w > 0.0 && obs.x.is_finite() && obs.y.is_finite() {
            used_cams.push(*cam);
            used_obs.push(*obs);
            used_w.push(w);
        }
    }
    if used_cams.len() < 2 {
        return Err(GeometryError::InsufficientViews(used_cams.len()));
    }
    if max_baseline(&used_cams) <= MIN_BASELINE {
        return Err(GeometryError::DegenerateGeometry(
            "camera centers coincide".into(),
        ));
    }
    let w_max = used_w.iter().cloned().fold(0.0, f64::max);
    for w in &mut used_w {
        *w /= w_max;
    }
    let point = solve_dlt(&used_cams, &used_obs, &used_w)?;
    check_cheirality(&used_cams, &point)?;
    Ok(point)
}

/// Sum of squared pixel residuals of `pose` against each matched detection,
/// using [`DEFAULT_CONF_CUTOFF`].
pub fn reprojection_error(pose: &Pose3D, matched: &[(&CameraModel, &Detection2D)]) -> f64 {
    reprojection_error_with_cutoff(pose, matched, DEFAULT_CONF_CUTOFF)
}

/// Keypoints with confidence below `cutoff` are skipped. A joint that cannot
/// be projected costs the camera's squared image diagonal.
pub fn reprojection_error_with_cutoff(
    pose: &Pose3D,
    matched: &[(&CameraModel, &Detection2D)],
    cutoff: f64,
) -> f64 {
    let mut total = 0.0;
    for (cam, det) in matched {
        for (j, joint) in pose.joints.iter().enumerate() {
            let Some(&conf) = det.keypoint_conf.get(j) else {
                continue;
            };
            if conf < cutoff || conf <= 0.0 {
                continue;
            }
            let projected = if pose.is_joint_finite(j) {
                cam.project(joint).ok()
            } else {
                None
            };
            total += match projected {
                Some(px) => (px - det.keypoints[j]).norm_squared(),
                None => cam.diagonal_sq(),
            };
        }
    }
    total
}
