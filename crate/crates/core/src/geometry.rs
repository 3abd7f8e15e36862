//! Pinhole cameras, rigid poses, axis-aligned boxes and rays.
//!
//! Conventions: `(u, v)` address pixel centers with `u` along the image width
//! and `v` along the height. Depth is the camera-frame `z` coordinate, not the
//! length of the viewing ray. Poses map camera coordinates to world
//! coordinates. Everything is `f64`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0}: must be positive and finite")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) outside image of size {width}x{height}")]
    OutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("point is behind the camera (camera-frame z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid box: min {min:?} exceeds max {max:?}")]
    InvalidAabb { min: [f64; 3], max: [f64; 3] },
    #[error("ray direction has zero length")]
    ZeroDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels, principal point at the image center, given horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x_radians: f64) -> Result<Self, GeometryError> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_radians).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidIntrinsics(msg.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point must lie inside the image");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel-center coordinates of integer pixel `(col, row)`.
    ///
    /// Pixel `(i, j)` spans `[i, i+1) x [j, j+1)`, so its center is `(i + 0.5, j + 0.5)`.
    pub fn pixel_center(col: u32, row: u32) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Camera-to-world rigid transform.
/// Serialized as row-major `rotation` (3 rows) and `translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        if !(ortho_err <= POSE_TOLERANCE) {
            return Err(GeometryError::InvalidPose(format!("rotation not orthonormal (error {ortho_err:e})")));
        }
        let det = self.rotation.determinant();
        if !((det - 1.0).abs() <= POSE_TOLERANCE) {
            return Err(GeometryError::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(GeometryError::InvalidPose("translation not finite".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`. Camera axes: +z forward, +x right, +y down
    /// (image rows grow downward), with `up` giving the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("up is parallel to the viewing direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Ok(Self { rotation, translation: eye })
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for CameraPose {
    type Error = GeometryError;
    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let m = r.rotation;
        let rot = Mat3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]);
        CameraPose::new(rot, Vec3::from(r.translation))
    }
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        let r = p.rotation;
        PoseRepr {
            rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            translation: p.translation.into(),
        }
    }
}

/// Lift pixel `(u, v)` with camera-frame depth into world coordinates.
pub fn backproject(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    if !intr.contains(u, v) {
        return Err(GeometryError::OutOfBounds { u, v, width: intr.width, height: intr.height });
    }
    let p_cam = Vec3::new((u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth);
    Ok(pose.to_world(&p_cam))
}

/// Project a world point to `(u, v, depth)`. The pixel may fall outside the image.
pub fn project(point: &Vec3, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<(f64, f64, f64), GeometryError> {
    let p = pose.to_camera(point);
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, p.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AabbRepr", into = "AabbRepr")]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AabbRepr {
    min: [f64; 3],
    max: [f64; 3],
}

impl TryFrom<AabbRepr> for Aabb {
    type Error = GeometryError;
    fn try_from(r: AabbRepr) -> Result<Self, Self::Error> {
        Aabb::from_arrays(r.min, r.max)
    }
}

impl From<Aabb> for AabbRepr {
    fn from(b: Aabb) -> Self {
        AabbRepr { min: b.min.into(), max: b.max.into() }
    }
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if (0..3).all(|i| min[i] <= max[i]) {
            Ok(Self { min, max })
        } else {
            Err(GeometryError::InvalidAabb { min: min.into(), max: max.into() })
        }
    }

    pub fn from_arrays(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(Vec3::from(min), Vec3::from(max))
    }

    pub fn from_center_half_extents(center: Vec3, half: Vec3) -> Result<Self, GeometryError> {
        Self::new(center - half, center + half)
    }

    /// From `[xmin, ymin, zmin, xmax, ymax, zmax]`.
    pub fn from_flat(v: [f64; 6]) -> Result<Self, GeometryError> {
        Self::from_arrays([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z]
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn is_degenerate(&self) -> bool {
        self.volume() <= 0.0
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains_point(&other.min) && self.contains_point(&other.max)
    }

    /// Closed-interval overlap test.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|i| (self.max[i].min(other.max[i]) - self.min[i].max(other.min[i])).max(0.0))
            .product()
    }
}

/// Volumetric intersection over union. Zero-volume boxes score 0.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn aabb_center_distance(a: &Aabb, b: &Aabb) -> f64 {
    (a.center() - b.center()).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeometryError> {
        let direction = direction.try_normalize(1e-300).ok_or(GeometryError::ZeroDirection)?;
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }

    /// World-space ray through pixel `(u, v)`.
    pub fn through_pixel(u: f64, v: f64, intr: &CameraIntrinsics, pose: &CameraPose) -> Self {
        let d_cam = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        let direction = (pose.rotation * d_cam).normalize();
        Self { origin: pose.translation, direction }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 120.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(-3.0..3.0);
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        CameraPose::new(*rot.matrix(), t).unwrap()
    }

    #[test]
    fn principal_point_backprojects_onto_optical_axis() {
        let k = intr();
        let p = backproject(k.cx, k.cy, 1.0, &k, &CameraPose::identity()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn one_focal_length_offset() {
        let k = intr();
        let p = backproject(k.cx + k.fx, k.cy, 2.0, &CameraIntrinsics { width: 200, ..k }, &CameraPose::identity()).unwrap();
        assert!((p - Vec3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_matches_explicit_matrix_oracle() {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let u = rng.random_range(0.0..64.0);
            let v = rng.random_range(0.0..48.0);
            let d = rng.random_range(0.1..20.0);
            // Oracle: K^-1 [u v 1]^T scaled by d, then homogeneous 4x4 pose.
            let k_inv = k.matrix().try_inverse().unwrap();
            let cam = k_inv * Vec3::new(u, v, 1.0) * d;
            let mut t4 = nalgebra::Matrix4::<f64>::identity();
            t4.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
            t4.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
            let expected = (t4 * nalgebra::Vector4::new(cam.x, cam.y, cam.z, 1.0)).xyz();
            let got = backproject(u, v, d, &k, &pose).unwrap();
            assert!((got - expected).norm() < 1e-9, "{got} vs {expected}");
        }
    }

    #[test]
    fn project_matches_explicit_matrix_oracle() {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let p_cam = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..9.0));
            let world = pose.rotation * p_cam + pose.translation;
            let r_inv = pose.rotation.try_inverse().unwrap();
            let h = k.matrix() * (r_inv * (world - pose.translation));
            let (u, v, d) = project(&world, &k, &pose).unwrap();
            assert!((u - h.x / h.z).abs() < 1e-9 && (v - h.y / h.z).abs() < 1e-9 && (d - h.z).abs() < 1e-9);
        }
    }

    #[test]
    fn project_origin_ray() {
        let k = intr();
        let (u, v, d) = project(&Vec3::new(0.0, 0.0, 1.0), &k, &CameraPose::identity()).unwrap();
        assert_eq!((u, v, d), (k.cx, k.cy, 1.0));
    }

    #[test]
    fn error_paths() {
        let k = intr();
        let id = CameraPose::identity();
        assert!(matches!(backproject(1.0, 1.0, 0.0, &k, &id), Err(GeometryError::InvalidDepth(_))));
        assert!(matches!(backproject(1.0, 1.0, -2.0, &k, &id), Err(GeometryError::InvalidDepth(_))));
        assert!(matches!(backproject(64.0, 1.0, 1.0, &k, &id), Err(GeometryError::OutOfBounds { .. })));
        assert!(matches!(backproject(1.0, -0.1, 1.0, &k, &id), Err(GeometryError::OutOfBounds { .. })));
        assert!(matches!(project(&Vec3::new(0.0, 0.0, -1.0), &k, &id), Err(GeometryError::BehindCamera(_))));
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraPose::new(Mat3::identity() * 2.0, Vec3::zeros()).is_err());
        let reflect = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(reflect, Vec3::zeros()).is_err());
        assert!(Aabb::from_arrays([1.0, 0.0, 0.0], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn look_at_is_a_valid_pose_facing_target() {
        let pose = CameraPose::look_at(Vec3::new(3.0, 1.0, -2.0), Vec3::new(0.0, 0.5, 0.0), Vec3::new(0.0, 1.0, 0.0)).unwrap();
        pose.validate().unwrap();
        let target_cam = pose.to_camera(&Vec3::new(0.0, 0.5, 0.0));
        assert!(target_cam.x.abs() < 1e-12 && target_cam.y.abs() < 1e-12 && target_cam.z > 0.0);
    }

    #[test]
    fn rigid_pose_preserves_distances() {
        let k = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let pix: Vec<_> = (0..4)
                .map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..48.0), rng.random_range(0.5..5.0)))
                .collect();
            let cam: Vec<_> = pix.iter().map(|&(u, v, d)| backproject(u, v, d, &k, &CameraPose::identity()).unwrap()).collect();
            let world: Vec<_> = pix.iter().map(|&(u, v, d)| backproject(u, v, d, &k, &pose).unwrap()).collect();
            for i in 0..4 {
                for j in 0..4 {
                    assert!(((cam[i] - cam[j]).norm() - (world[i] - world[j]).norm()).abs() < 1e-9);
                }
            }
        }
    }

    fn unit_cube_at(x: f64, y: f64, z: f64) -> Aabb {
        Aabb::from_arrays([x, y, z], [x + 1.0, y + 1.0, z + 1.0]).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = unit_cube_at(0.0, 0.0, 0.0);
        assert_eq!(aabb_iou(&a, &a), 1.0);
        assert_eq!(aabb_iou(&a, &unit_cube_at(2.0, 0.0, 0.0)), 0.0);
        let shifted = unit_cube_at(0.5, 0.5, 0.5);
        assert!((aabb_iou(&a, &shifted) - 0.125 / 1.875).abs() < 1e-15);
        let flat = Aabb::from_arrays([0.0; 3], [1.0, 1.0, 0.0]).unwrap();
        assert_eq!(aabb_iou(&flat, &flat), 0.0);
        assert_eq!(aabb_iou(&flat, &a), 0.0);
    }

    /// Brute-force voxel counting at res^3 over a 2-unit cube whose cells
    /// align with box faces placed on a 0.01 lattice.
    fn voxel_count_iou(a: &Aabb, b: &Aabb, res: usize) -> f64 {
        let lo = a.min.inf(&b.min).map(f64::floor);
        let step = Vec3::repeat(2.0 / res as f64);
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    let p = lo + Vec3::new((i as f64 + 0.5) * step.x, (j as f64 + 0.5) * step.y, (k as f64 + 0.5) * step.z);
                    let (ia, ib) = (a.contains_point(&p), b.contains_point(&p));
                    inter += (ia && ib) as u64;
                    union += (ia || ib) as u64;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_agrees_with_voxel_counting() {
        let a = unit_cube_at(0.0, 0.0, 0.0);
        let b = unit_cube_at(0.5, 0.5, 0.5);
        assert!((aabb_iou(&a, &b) - voxel_count_iou(&a, &b, 200)).abs() < 1e-3);
        let c = Aabb::from_arrays([0.2, 0.3, 0.1], [1.7, 0.6, 0.5]).unwrap();
        assert!((aabb_iou(&a, &c) - voxel_count_iou(&a, &c, 200)).abs() < 1e-3);
    }

    #[test]
    fn center_distance_cases() {
        let a = unit_cube_at(0.0, 0.0, 0.0);
        assert_eq!(aabb_center_distance(&a, &a), 0.0);
        assert!((aabb_center_distance(&a, &unit_cube_at(3.0, 4.0, 0.0)) - 5.0).abs() < 1e-15);
        let b = Aabb::from_arrays([-1.0, 2.0, 0.5], [0.0, 3.0, 4.5]).unwrap();
        let oracle = ((0.5f64 - -0.5).powi(2) + (0.5f64 - 2.5).powi(2) + (0.5f64 - 2.5).powi(2)).sqrt();
        assert!((aabb_center_distance(&a, &b) - oracle).abs() < 1e-12);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = Aabb> {
            (prop::array::uniform3(-5.0..5.0f64), prop::array::uniform3(0.01..3.0f64)).prop_map(|(lo, ext)| {
                Aabb::from_arrays(lo, [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2]]).unwrap()
            })
        }

        proptest! {
            #[test]
            fn round_trip(u in 0.0..64.0f64, v in 0.0..48.0f64, d in 0.05..50.0f64, yaw in -3.0..3.0f64, tx in -4.0..4.0f64) {
                let k = CameraIntrinsics::new(80.0, 90.0, 31.0, 22.0, 64, 48).unwrap();
                let rot = nalgebra::Rotation3::from_euler_angles(0.3, yaw, -0.2);
                let pose = CameraPose::new(*rot.matrix(), Vec3::new(tx, 1.0, -2.0)).unwrap();
                let p = backproject(u, v, d, &k, &pose).unwrap();
                let (u2, v2, d2) = project(&p, &k, &pose).unwrap();
                prop_assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6 && (d - d2).abs() < 1e-6);
            }

            #[test]
            fn iou_symmetric_and_bounded(a in boxes(), b in boxes()) {
                let ab = aabb_iou(&a, &b);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab, aabb_iou(&b, &a));
            }

            #[test]
            fn iou_monotone_under_translation(a in boxes(), b in boxes(), axis in 0usize..3, step in 0.01..0.5f64) {
                let start = b.center()[axis] >= a.center()[axis];
                let dir = if start { 1.0 } else { -1.0 };
                let mut prev = aabb_iou(&a, &b);
                let mut moved = b;
                for _ in 0..20 {
                    moved.min[axis] += dir * step;
                    moved.max[axis] += dir * step;
                    let cur = aabb_iou(&a, &moved);
                    prop_assert!(cur <= prev + 1e-12);
                    prev = cur;
                }
            }
        }
    }
}
