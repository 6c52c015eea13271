//! Rigid transforms, pinhole projection and point clouds.
//!
//! Rotations are unit quaternions stored `(w, x, y, z)` with the sign fixed so
//! that `w >= 0`. All quantities are `f64`, lengths in meters.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point cloud arrays disagree in length: {points} points, {other} {what}")]
    CloudLengthMismatch {
        points: usize,
        other: usize,
        what: &'static str,
    },
}

/// A rigid transform mapping model coordinates into camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // renormalize and pick the w >= 0 cover
    let mut raw = *q.quaternion();
    let n = raw.norm();
    // leave already-unit input untouched so serialized poses reload bit-exactly
    if (n - 1.0).abs() > 4.0 * f64::EPSILON {
        raw /= n;
    }
    if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_unchecked(raw)
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a (not necessarily normalized) quaternion `(w, x, y, z)`.
    pub fn new(quaternion: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let q = Quaternion::new(quaternion[0], quaternion[1], quaternion[2], quaternion[3]);
        let n = q.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self {
            rotation: canonical(UnitQuaternion::new_unchecked(q)),
            translation: Vec3::from(translation),
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::from(t),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vec3::from(axis));
        Self::from_parts(
            UnitQuaternion::from_axis_angle(&axis, angle),
            Vec3::from(translation),
        )
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self::from_parts(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: canonical(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: canonical(inv),
            translation: -(inv * self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_points(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply(p)).collect(),
            colors: cloud.colors.clone(),
            pixel_index: cloud.pixel_index.clone(),
        }
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// `(qw, qx, qy, qz, tx, ty, tz)`, the order used in scene files.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.quaternion();
        let t = self.translation;
        [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
    }

    pub fn from_array(a: &[f64; 7]) -> Result<Self, GeometryError> {
        Self::new([a[0], a[1], a[2], a[3]], [a[4], a[5], a[6]])
    }
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 140.0,
            fy: 140.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Returns `(u, v, depth)` in pixels and meters.
    pub fn project(&self, p: &Vec3) -> Result<(f64, f64, f64), GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Nearest pixel `(row, col)` of a camera-frame point, or `None` when the
    /// point is behind the camera or lands outside the image.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(usize, usize)> {
        let (u, v, _) = self.project(p).ok()?;
        let col = u.round();
        let row = v.round();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Points with optional per-point colors and source pixels `(row, col)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub pixel_index: Option<Vec<[usize; 2]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self {
            points,
            colors: None,
            pixel_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, image: Option<(usize, usize)>) -> Result<(), GeometryError> {
        let n = self.points.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(GeometryError::CloudLengthMismatch {
                    points: n,
                    other: c.len(),
                    what: "colors",
                });
            }
        }
        if let Some(px) = &self.pixel_index {
            if px.len() != n {
                return Err(GeometryError::CloudLengthMismatch {
                    points: n,
                    other: px.len(),
                    what: "pixel indices",
                });
            }
            if let Some((h, w)) = image {
                if let Some(bad) = px.iter().find(|p| p[0] >= h || p[1] >= w) {
                    return Err(GeometryError::InvalidIntrinsics(format!(
                        "pixel index {:?} outside {}x{} image",
                        bad, h, w
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        if self.points.is_empty() {
            return Vec3::zeros();
        }
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

/// Rotation about `axis` by `deg` degrees, identity translation. Handy in tests.
pub fn rotation_deg(axis: [f64; 3], deg: f64) -> Pose {
    Pose::from_axis_angle(axis, deg.to_radians(), [0.0; 3])
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter_map("zero quaternion", |(q, t)| {
                let n = q.iter().map(|v| v * v).sum::<f64>();
                if n < 1e-3 {
                    None
                } else {
                    Pose::new(q, t).ok()
                }
            })
    }

    proptest! {
        #[test]
        fn composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-9);
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
        }

        #[test]
        fn transform_matches_sequential_application(
            a in pose_strategy(),
            b in pose_strategy(),
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
        ) {
            let cloud = PointCloud::from_points(pts.into_iter().map(Vec3::from).collect());
            let once = a.compose(&b).transform_points(&cloud);
            let twice = a.transform_points(&b.transform_points(&cloud));
            for (x, y) in once.points.iter().zip(&twice.points) {
                prop_assert!((x - y).norm() < 1e-9);
            }
        }

        #[test]
        fn transform_round_trip(
            p in pose_strategy(),
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
        ) {
            let cloud = PointCloud::from_points(pts.into_iter().map(Vec3::from).collect());
            let back = p.inverse().transform_points(&p.transform_points(&cloud));
            for (x, y) in back.points.iter().zip(&cloud.points) {
                prop_assert!((x - y).norm() < 1e-9);
            }
        }

        #[test]
        fn project_backproject_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.05f64..5.0) {
            let k = CameraIntrinsics::default();
            let p = Vec3::new(x, y, z);
            let (u, v, d) = k.project(&p).unwrap();
            prop_assert!((k.backproject(u, v, d).unwrap() - p).norm() < 1e-9);
        }

        #[test]
        fn backproject_project_round_trip(u in -50.0f64..200.0, v in -50.0f64..200.0, d in 0.05f64..5.0) {
            let k = CameraIntrinsics::default();
            let (u2, v2, d2) = k.project(&k.backproject(u, v, d).unwrap()).unwrap();
            prop_assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9 && (d - d2).abs() < 1e-12);
        }
    }
}
