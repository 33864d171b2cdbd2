//! The 3D Gaussian primitive and the lift from per-pixel predictions to a cloud.
//!
//! Covariance is never stored as a raw matrix: it is kept factored as
//! scale + unit quaternion, which keeps it positive definite under
//! optimization. Sigma = R(q) diag(scale^2) R(q)^T.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3, Vector4};
use std::io::{Read, Write};

use crate::error::{Result, SplatError};
use crate::geometry::{normalize_depth, unproject, Camera};

/// Smallest permitted axis scale; keeps covariances invertible.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    pub alpha: f64,
    pub scale: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rot: Vector4<f64>,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SplatError::InvalidInput("alpha outside [0,1]".into()));
        }
        if self.scale.min() < SCALE_FLOOR {
            return Err(SplatError::InvalidInput("scale below floor".into()));
        }
        if (self.rot.norm() - 1.0).abs() > 1e-9 {
            return Err(SplatError::InvalidInput("quaternion not normalized".into()));
        }
        if self.color.min() < 0.0 || self.color.max() > 1.0 {
            return Err(SplatError::InvalidInput("color outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(&self.scale, &self.rot)
    }
}

pub type GaussianCloud = Vec<Gaussian>;

/// Rotation matrix of a quaternion (w, x, y, z), normalized internally.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    )
}

/// Sigma = R(q) diag(scale^2) R(q)^T; symmetric positive definite by construction.
pub fn build_covariance(scale: &Vector3<f64>, rot: &Vector4<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(rot);
    let s2 = Matrix3::from_diagonal(&Vector3::new(scale.x * scale.x, scale.y * scale.y, scale.z * scale.z));
    r * s2 * r.transpose()
}

/// Raw per-pixel channel layout consumed by [`lift_predictions`].
///
/// 14 channels per pixel: depth_raw, alpha_logit, scale_raw (3), rot_raw (4),
/// color_logit (3), plus 2 reserved channels ignored by the lift.
pub const RAW_CHANNELS: usize = 14;
pub const RAW_DEPTH: usize = 0;
pub const RAW_ALPHA: usize = 1;
pub const RAW_SCALE: usize = 2;
pub const RAW_ROT: usize = 5;
pub const RAW_COLOR: usize = 9;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Activate one pixel's raw parameters into a Gaussian placed on the pixel ray.
///
/// Centers go through normalize_depth and unproject at the pixel center, so
/// the lift is exactly the inverse of projecting the center back to the pixel.
pub fn activate_pixel(raw: &[f64], px: f64, py: f64, camera: &Camera) -> Result<Gaussian> {
    assert_eq!(raw.len(), RAW_CHANNELS);
    let depth = normalize_depth(raw[RAW_DEPTH].max(0.0), camera);
    let mu = unproject(camera, [px, py], depth)?;
    let alpha = sigmoid(raw[RAW_ALPHA]);
    let scale = Vector3::new(
        softplus(raw[RAW_SCALE]) + SCALE_FLOOR,
        softplus(raw[RAW_SCALE + 1]) + SCALE_FLOOR,
        softplus(raw[RAW_SCALE + 2]) + SCALE_FLOOR,
    );
    let mut rot = Vector4::new(raw[RAW_ROT], raw[RAW_ROT + 1], raw[RAW_ROT + 2], raw[RAW_ROT + 3]);
    let n = rot.norm();
    if n < 1e-8 {
        rot = Vector4::new(1.0, 0.0, 0.0, 0.0);
    } else {
        rot /= n;
    }
    let color = Vector3::new(
        sigmoid(raw[RAW_COLOR]),
        sigmoid(raw[RAW_COLOR + 1]),
        sigmoid(raw[RAW_COLOR + 2]),
    );
    Ok(Gaussian { mu, alpha, scale, rot, color })
}

/// Lift an H x W x 14 grid of raw predictions into one Gaussian per pixel.
///
/// Row-major over pixels: the Gaussian for pixel (x, y) sits at index y*W + x.
pub fn lift_predictions(raw_grid: &[f64], width: usize, height: usize, camera: &Camera) -> Result<GaussianCloud> {
    if width != camera.width() || height != camera.height() {
        return Err(SplatError::InvalidInput(format!(
            "grid {}x{} does not match camera {}x{}",
            width, height, camera.width(), camera.height()
        )));
    }
    if raw_grid.len() != width * height * RAW_CHANNELS {
        return Err(SplatError::InvalidInput("raw grid length mismatch".into()));
    }
    let mut cloud = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * RAW_CHANNELS;
            cloud.push(activate_pixel(
                &raw_grid[base..base + RAW_CHANNELS],
                x as f64 + 0.5,
                y as f64 + 0.5,
                camera,
            )?);
        }
    }
    Ok(cloud)
}

/// Binary cloud dump: header {count: u64 LE}, then per Gaussian 14 f32 LE
/// (mu 3, alpha 1, scale 3, rot 4, color 3).
pub fn write_cloud<W: Write>(w: &mut W, cloud: &GaussianCloud) -> Result<()> {
    w.write_u64::<LittleEndian>(cloud.len() as u64)?;
    for g in cloud {
        for v in [
            g.mu.x, g.mu.y, g.mu.z,
            g.alpha,
            g.scale.x, g.scale.y, g.scale.z,
            g.rot[0], g.rot[1], g.rot[2], g.rot[3],
            g.color.x, g.color.y, g.color.z,
        ] {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_cloud<R: Read>(r: &mut R) -> Result<GaussianCloud> {
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut cloud = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0f64; 14];
        for x in v.iter_mut() {
            *x = r.read_f32::<LittleEndian>()? as f64;
        }
        cloud.push(Gaussian {
            mu: Vector3::new(v[0], v[1], v[2]),
            alpha: v[3],
            scale: Vector3::new(v[4], v[5], v[6]),
            rot: Vector4::new(v[7], v[8], v[9], v[10]).normalize(),
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    Ok(cloud)
}

/// Replace every color with the given constant; used for confidence-weight renders.
pub fn recolor(cloud: &GaussianCloud, value: f64) -> GaussianCloud {
    cloud
        .iter()
        .map(|g| Gaussian { color: Vector3::new(value, value, value), ..*g })
        .collect()
}
