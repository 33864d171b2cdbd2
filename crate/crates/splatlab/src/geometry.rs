//! Cameras, projection, and the depth normalization used by the student head.
//!
//! Poses are stored world-to-camera so the projection matrix is directly
//! `K [R|t]`. Pixel (i, j) has its center at (i + 0.5, j + 0.5).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplatError};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SplatError::InvalidInput("focal lengths must be positive".into()));
        }
        if self.cx <= 0.0 || self.cx >= self.width as f64 || self.cy <= 0.0 || self.cy >= self.height as f64 {
            return Err(SplatError::InvalidInput("principal point outside image".into()));
        }
        Ok(())
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(SplatError::InvalidInput("rotation is not orthonormal".into()));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(SplatError::InvalidInput("rotation determinant is not 1".into()));
        }
        Ok(())
    }

    /// Camera position in world coordinates, -R^T t.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn camera_to_world(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, near: f64, far: f64) -> Result<Self> {
        intrinsics.validate()?;
        pose.validate()?;
        if !(near > 0.0 && near < far) {
            return Err(SplatError::InvalidInput("require 0 < near < far".into()));
        }
        Ok(Camera { intrinsics, pose, near, far })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-space unit direction of the ray through a pixel position.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
        (self.pose.rotation.transpose() * dir_cam).normalize()
    }
}

/// Behind-camera points are rejected, not a crash.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { pixel: [f64; 2], depth: f64 },
    BehindCamera,
}

/// Project a world point. Depth is camera-space z.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Projection {
    let p = camera.pose.world_to_camera(point);
    if p.z <= 0.0 {
        return Projection::BehindCamera;
    }
    let k = &camera.intrinsics;
    Projection::Visible {
        pixel: [k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy],
        depth: p.z,
    }
}

/// Lift a pixel position at a camera-space depth back to a world point.
pub fn unproject(camera: &Camera, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(SplatError::InvalidInput(format!("unproject needs depth > 0, got {depth}")));
    }
    let k = &camera.intrinsics;
    let p_cam = Vector3::new((pixel[0] - k.cx) / k.fx * depth, (pixel[1] - k.cy) / k.fy * depth, depth);
    Ok(camera.pose.camera_to_world(&p_cam))
}

/// Scale, shift, and clip a raw non-negative head activation into [near, far].
///
/// depth = clamp(fx * raw + near, near, far). The scaling focal is fx.
pub fn normalize_depth(raw: f64, camera: &Camera) -> f64 {
    (camera.intrinsics.fx * raw + camera.near).clamp(camera.near, camera.far)
}

/// Derivative of `normalize_depth` with respect to `raw` (zero in the clamped regions).
pub fn normalize_depth_grad(raw: f64, camera: &Camera) -> f64 {
    let unclamped = camera.intrinsics.fx * raw + camera.near;
    if unclamped > camera.near && unclamped < camera.far {
        camera.intrinsics.fx
    } else {
        0.0
    }
}

/// Translate a camera along its own viewing axis; intrinsics and depth bounds unchanged.
pub fn shifted_pose(camera: &Camera, forward_shift: f64) -> Camera {
    // Moving the camera center by `shift * view_axis` in world space subtracts
    // the shift from the camera-frame z translation.
    let mut out = *camera;
    out.pose.translation.z -= forward_shift;
    out
}

/// JSON wire schema: {fx,fy,cx,cy,width,height,R:[9 row-major],t:[3],near,far}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let m = &c.pose.rotation;
        CameraJson {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            t: [c.pose.translation.x, c.pose.translation.y, c.pose.translation.z],
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<&CameraJson> for Camera {
    type Error = SplatError;

    fn try_from(j: &CameraJson) -> Result<Camera> {
        let rotation = Matrix3::from_row_slice(&j.r);
        let pose = Pose { rotation, translation: Vector3::new(j.t[0], j.t[1], j.t[2]) };
        Camera::new(
            Intrinsics { fx: j.fx, fy: j.fy, cx: j.cx, cy: j.cy, width: j.width, height: j.height },
            pose,
            j.near,
            j.far,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_camera() -> Camera {
        Camera::new(
            Intrinsics { fx: 100.0, fy: 100.0, cx: 128.0, cy: 128.0, width: 256, height: 256 },
            Pose::identity(),
            1.0,
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn project_principal_ray() {
        match project(&test_camera(), &Vector3::new(0.0, 0.0, 2.0)) {
            Projection::Visible { pixel, depth } => {
                assert_eq!(pixel, [128.0, 128.0]);
                assert_eq!(depth, 2.0);
            }
            _ => panic!("expected visible"),
        }
    }

    #[test]
    fn project_off_axis() {
        // 100 * (1/2) + 128 = 178
        match project(&test_camera(), &Vector3::new(1.0, 0.0, 2.0)) {
            Projection::Visible { pixel, depth } => {
                assert_eq!(pixel, [178.0, 128.0]);
                assert_eq!(depth, 2.0);
            }
            _ => panic!("expected visible"),
        }
    }

    #[test]
    fn project_behind_camera() {
        assert_eq!(project(&test_camera(), &Vector3::new(0.0, 0.0, -1.0)), Projection::BehindCamera);
    }

    #[test]
    fn unproject_examples() {
        let cam = test_camera();
        let p = unproject(&cam, [128.0, 128.0], 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        let p = unproject(&cam, [178.0, 128.0], 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 2.0), epsilon = 1e-12);
        assert!(unproject(&cam, [10.0, 10.0], 0.0).is_err());
        assert!(unproject(&cam, [10.0, 10.0], -3.0).is_err());
    }

    #[test]
    fn normalize_depth_examples() {
        let mut cam = test_camera();
        cam.intrinsics.fx = 1.0;
        assert_eq!(normalize_depth(0.0, &cam), 1.0);
        assert_eq!(normalize_depth(1e6, &cam), 100.0);
        cam.intrinsics.fx = 2.0;
        assert_eq!(normalize_depth(3.0, &cam), 7.0);
    }

    #[test]
    fn shifted_pose_examples() {
        let cam = test_camera();
        let same = shifted_pose(&cam, 0.0);
        assert_eq!(same, cam);
        let moved = shifted_pose(&cam, 0.5);
        assert_relative_eq!(moved.pose.camera_center(), Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        assert_eq!(moved.intrinsics, cam.intrinsics);
        assert_eq!(moved.near, cam.near);
        assert_eq!(moved.far, cam.far);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = test_camera();
        let j = CameraJson::from(&cam);
        let text = serde_json::to_string(&j).unwrap();
        let back: CameraJson = serde_json::from_str(&text).unwrap();
        let cam2 = Camera::try_from(&back).unwrap();
        assert_eq!(cam, cam2);
    }

    fn random_rotation(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
        let r = nalgebra::Rotation3::from_euler_angles(ax, ay, az);
        *r.matrix()
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(
            px in 0.0f64..256.0,
            py in 0.0f64..256.0,
            depth in 1.0001f64..99.0,
            ax in -1.0f64..1.0,
            ay in -1.0f64..1.0,
            az in -1.0f64..1.0,
            tx in -2.0f64..2.0,
            ty in -2.0f64..2.0,
            tz in -2.0f64..2.0,
        ) {
            let cam = Camera::new(
                Intrinsics { fx: 100.0, fy: 120.0, cx: 128.0, cy: 120.0, width: 256, height: 256 },
                Pose { rotation: random_rotation(ax, ay, az), translation: Vector3::new(tx, ty, tz) },
                1.0, 100.0,
            ).unwrap();
            let world = unproject(&cam, [px, py], depth).unwrap();
            match project(&cam, &world) {
                Projection::Visible { pixel, depth: d } => {
                    prop_assert!((pixel[0] - px).abs() < 1e-9);
                    prop_assert!((pixel[1] - py).abs() < 1e-9);
                    prop_assert!((d - depth).abs() < 1e-9);
                }
                _ => prop_assert!(false, "round trip went behind camera"),
            }
        }

        #[test]
        fn rigid_consistency(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
            wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in 2.0f64..50.0,
        ) {
            // project(cam ∘ T, p) == project(cam, T⁻¹ p)
            let base = test_camera();
            let t_rot = random_rotation(ax, ay, az);
            let t_vec = Vector3::new(tx, ty, tz);
            // cam ∘ T: world->cam composed with rigid T applied to the world.
            let composed = Camera::new(
                base.intrinsics,
                Pose {
                    rotation: base.pose.rotation * t_rot,
                    translation: base.pose.rotation * t_vec + base.pose.translation,
                },
                base.near, base.far,
            ).unwrap();
            let p = Vector3::new(wx, wy, wz);
            let p_inv = t_rot.transpose() * (p - t_vec);
            let a = project(&composed, &p_inv);
            let b = project(&base, &p);
            match (a, b) {
                (Projection::Visible { pixel: pa, depth: da }, Projection::Visible { pixel: pb, depth: db }) => {
                    prop_assert!((pa[0] - pb[0]).abs() < 1e-9);
                    prop_assert!((pa[1] - pb[1]).abs() < 1e-9);
                    prop_assert!((da - db).abs() < 1e-9);
                }
                (Projection::BehindCamera, Projection::BehindCamera) => {}
                _ => prop_assert!(false, "visibility mismatch"),
            }
        }

        #[test]
        fn normalize_depth_in_bounds(raw in 0.0f64..1e7) {
            let cam = test_camera();
            let d = normalize_depth(raw, &cam);
            prop_assert!(d >= cam.near && d <= cam.far);
        }
    }
}
