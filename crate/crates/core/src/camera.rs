//! Camera geometry: intrinsics, rigid world-from-camera transforms, and
//! posed depth frames with projection / backprojection.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Error, Debug)]
pub enum CameraError {
    #[error("depth must be a positive finite value, got {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (defect {0:.3e})")]
    InvalidRotation(f64),
    #[error("depth buffer has {got} entries, expected {expected}")]
    DepthSizeMismatch { expected: usize, got: usize },
}

/// Pinhole intrinsics (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera-frame ray direction through pixel `(u, v)` with z = 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid transform, by convention world-from-camera (`p_w = R p_c + t`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

const ROTATION_TOL: f64 = 1e-6;

impl RigidTransform {
    /// Validates orthonormality and det +1 to 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, CameraError> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_defect = (rotation.determinant() - 1.0).abs();
        let worst = defect.max(det_defect);
        if worst > ROTATION_TOL {
            return Err(CameraError::InvalidRotation(worst));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` with +z looking at `target`; +y is chosen to point
    /// "down" relative to `up_hint` in the usual image convention.
    pub fn look_at(eye: Vec3, target: Vec3, up_hint: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = up_hint.cross(&z);
        if x.norm() < 1e-9 {
            // Gaze parallel to the hint; fall back to an arbitrary axis.
            x = Vec3::new(1.0, 0.0, 0.0).cross(&z);
            if x.norm() < 1e-9 {
                x = Vec3::new(0.0, 1.0, 0.0).cross(&z);
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self { rotation, translation: eye }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }
}

/// One posed depth frame. Depth is the range along the optical axis in
/// meters; 0 or NaN marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub pose: RigidTransform,
    pub frame_id: u32,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        intrinsics: Intrinsics,
        pose: RigidTransform,
        frame_id: u32,
    ) -> Result<Self, CameraError> {
        if depth.len() != width * height {
            return Err(CameraError::DepthSizeMismatch {
                expected: width * height,
                got: depth.len(),
            });
        }
        // Re-validate the pose so frames built from raw matrices are checked.
        RigidTransform::new(pose.rotation, pose.translation)?;
        Ok(Self { width, height, depth, intrinsics, pose, frame_id })
    }

    /// Depth at integer pixel, `None` when out of bounds or invalid.
    pub fn depth_at(&self, u: i64, v: i64) -> Option<f64> {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            return None;
        }
        let d = self.depth[v as usize * self.width + u as usize] as f64;
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

/// Lifts pixel `(u, v)` with optical-axis depth `d` into world space.
pub fn backproject(
    u: f64,
    v: f64,
    d: f64,
    intrinsics: &Intrinsics,
    pose: &RigidTransform,
) -> Result<Vec3, CameraError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(CameraError::InvalidDepth(d));
    }
    let p_cam = intrinsics.ray_direction(u, v) * d;
    Ok(pose.transform_point(&p_cam))
}

/// Projects a world point into the image; `None` when behind the camera.
/// Returns `(u, v, depth)` with depth along the optical axis.
pub fn project(
    p_world: &Vec3,
    intrinsics: &Intrinsics,
    pose: &RigidTransform,
) -> Option<(f64, f64, f64)> {
    let p_cam = pose.inverse().transform_point(p_world);
    if p_cam.z <= 0.0 {
        return None;
    }
    let u = intrinsics.fx * p_cam.x / p_cam.z + intrinsics.cx;
    let v = intrinsics.fy * p_cam.y / p_cam.z + intrinsics.cy;
    Some((u, v, p_cam.z))
}
