//! Differentiable EWA splatting of a Gaussian cloud.
//!
//! Forward: project each Gaussian to a screen-space 2D Gaussian
//! (Sigma' = J R Sigma R^T J^T + dilation), then per-pixel front-to-back
//! alpha blending sorted by camera depth. The tiled renderer bins splats into
//! 16x16 pixel tiles; `render_brute_force` is the no-tiling oracle with the
//! identical per-contribution arithmetic, so the two agree to within float
//! reassociation.
//!
//! Backward: exact analytic gradients of the forward formula for every
//! Gaussian field, replayed from the per-pixel contribution lists retained
//! during the forward pass.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Result, SplatError};
use crate::geometry::Camera;
use crate::splat::{quat_to_rotation, Gaussian, GaussianCloud};

pub const TILE_SIZE: usize = 16;
/// Screen-space covariance dilation in pixel^2 (anti-aliasing floor).
pub const COV_DILATION: f64 = 0.3;
/// Contributions with blended opacity below this are skipped, forward and backward.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Pixels with accumulated weight below this report `far` in depth mode.
pub const DEPTH_EPS: f64 = 1e-4;
// exp(-r^2 / (2 lambda_max)) < ALPHA_CUTOFF outside r = sqrt(2 ln 255) sigma;
// 3.4 sigma plus a half-pixel margin keeps binning conservative.
const BIN_RADIUS_SIGMA: f64 = 3.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Color,
    Weight,
    Depth,
}

/// A Gaussian projected to screen space.
#[derive(Debug, Clone, Copy)]
struct ProjectedSplat {
    mean: Vector2<f64>,
    cov_inv: Matrix2<f64>,
    /// Camera-space center, kept for the backward chain through J.
    p_cam: Vector3<f64>,
    radius: f64,
    alpha: f64,
    color: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Contrib {
    splat: u32,
    alpha_prime: f64,
    /// Transmittance in front of this contribution.
    transmittance: f64,
}

#[derive(Debug)]
pub struct ForwardState {
    projected: Vec<Option<ProjectedSplat>>,
    /// Per-pixel front-to-back contribution lists, row-major.
    contribs: Vec<Vec<Contrib>>,
    cloud_len: usize,
}

#[derive(Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub mode: RenderMode,
    /// H*W*3, only in Color mode.
    pub color: Option<Vec<f64>>,
    /// H*W accumulated opacity, always available.
    pub weight: Vec<f64>,
    /// H*W expected depth, only in Depth mode.
    pub depth: Option<Vec<f64>>,
    state: Option<ForwardState>,
}

impl RenderOutput {
    pub fn drop_state(&mut self) {
        self.state = None;
    }
}

/// Per-Gaussian gradients returned by [`render_backward`].
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub mu: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
    pub scale: Vec<Vector3<f64>>,
    pub rot: Vec<Vector4<f64>>,
    pub color: Vec<Vector3<f64>>,
}

impl CloudGrads {
    fn zeros(n: usize) -> Self {
        CloudGrads {
            mu: vec![Vector3::zeros(); n],
            alpha: vec![0.0; n],
            scale: vec![Vector3::zeros(); n],
            rot: vec![Vector4::zeros(); n],
            color: vec![Vector3::zeros(); n],
        }
    }

}

fn project_splat(g: &Gaussian, camera: &Camera) -> Option<ProjectedSplat> {
    if g.alpha < ALPHA_CUTOFF {
        return None;
    }
    let p = camera.pose.world_to_camera(&g.mu);
    if p.z <= 1e-8 {
        return None;
    }
    let k = &camera.intrinsics;
    let mean = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    let j = perspective_jacobian(&p, k.fx, k.fy);
    let sigma_cam = camera.pose.rotation * g.covariance() * camera.pose.rotation.transpose();
    let cov2d = j * sigma_cam * j.transpose() + Matrix2::identity() * COV_DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let cov_inv = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    // largest eigenvalue of the 2x2 covariance
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + ((mid * mid - det).max(0.0)).sqrt();
    let radius = BIN_RADIUS_SIGMA * lambda_max.sqrt() + 0.5;
    Some(ProjectedSplat { mean, cov_inv, p_cam: p, radius, alpha: g.alpha, color: g.color })
}

fn perspective_jacobian(p: &Vector3<f64>, fx: f64, fy: f64) -> nalgebra::Matrix2x3<f64> {
    let z = p.z;
    nalgebra::Matrix2x3::new(
        fx / z, 0.0, -fx * p.x / (z * z),
        0.0, fy / z, -fy * p.y / (z * z),
    )
}

/// Sort key shared by the tiled and brute-force paths: camera depth with
/// ties broken by Gaussian index.
fn sort_by_depth(indices: &mut Vec<u32>, projected: &[Option<ProjectedSplat>]) {
    indices.sort_by(|&a, &b| {
        let za = projected[a as usize].as_ref().unwrap().p_cam.z;
        let zb = projected[b as usize].as_ref().unwrap().p_cam.z;
        za.partial_cmp(&zb).unwrap().then(a.cmp(&b))
    });
}

struct PixelAccum {
    color: Vector3<f64>,
    weight: f64,
    depth_sum: f64,
    contribs: Vec<Contrib>,
}

fn blend_pixel(
    px: f64,
    py: f64,
    order: &[u32],
    projected: &[Option<ProjectedSplat>],
) -> PixelAccum {
    let mut acc = PixelAccum {
        color: Vector3::zeros(),
        weight: 0.0,
        depth_sum: 0.0,
        contribs: Vec::new(),
    };
    let mut transmittance = 1.0;
    let pixel = Vector2::new(px, py);
    for &idx in order {
        let s = projected[idx as usize].as_ref().unwrap();
        let d = pixel - s.mean;
        let power = -0.5 * (d.transpose() * s.cov_inv * d)[(0, 0)];
        if power > 0.0 {
            continue;
        }
        let alpha_prime = s.alpha * power.exp();
        if alpha_prime < ALPHA_CUTOFF {
            continue;
        }
        let w = alpha_prime * transmittance;
        acc.color += s.color * w;
        acc.weight += w;
        acc.depth_sum += s.p_cam.z * w;
        acc.contribs.push(Contrib { splat: idx, alpha_prime, transmittance });
        transmittance *= 1.0 - alpha_prime;
        if transmittance <= 0.0 {
            break;
        }
    }
    acc
}

fn finish_output(
    camera: &Camera,
    mode: RenderMode,
    projected: Vec<Option<ProjectedSplat>>,
    pixels: Vec<PixelAccum>,
    cloud_len: usize,
) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let mut weight = vec![0.0; w * h];
    let mut color = if mode == RenderMode::Color { Some(vec![0.0; w * h * 3]) } else { None };
    let mut depth = if mode == RenderMode::Depth { Some(vec![0.0; w * h]) } else { None };
    let mut contribs = Vec::with_capacity(w * h);
    for (i, acc) in pixels.into_iter().enumerate() {
        weight[i] = acc.weight;
        if let Some(c) = color.as_mut() {
            c[i * 3] = acc.color.x;
            c[i * 3 + 1] = acc.color.y;
            c[i * 3 + 2] = acc.color.z;
        }
        if let Some(dm) = depth.as_mut() {
            dm[i] = if acc.weight > DEPTH_EPS { acc.depth_sum / acc.weight } else { camera.far };
        }
        contribs.push(acc.contribs);
    }
    RenderOutput {
        width: w,
        height: h,
        mode,
        color,
        weight,
        depth,
        state: Some(ForwardState { projected, contribs, cloud_len }),
    }
}

/// Tiled differentiable renderer. 16x16 tiles, per-tile splat binning;
/// deterministic regardless of thread count (tiles own disjoint pixels).
pub fn render(cloud: &GaussianCloud, camera: &Camera, mode: RenderMode) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let projected: Vec<Option<ProjectedSplat>> =
        cloud.iter().map(|g| project_splat(g, camera)).collect();

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in projected.iter().enumerate() {
        let Some(s) = p else { continue };
        let x0 = ((s.mean.x - s.radius) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let y0 = ((s.mean.y - s.radius) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let x1 = (((s.mean.x + s.radius) / TILE_SIZE as f64).floor() as isize).min(tiles_x as isize - 1);
        let y1 = (((s.mean.y + s.radius) / TILE_SIZE as f64).floor() as isize).min(tiles_y as isize - 1);
        if x1 < 0 || y1 < 0 || x0 >= tiles_x || y0 >= tiles_y {
            continue;
        }
        for ty in y0..=(y1 as usize) {
            for tx in x0..=(x1 as usize) {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let tile_results: Vec<(usize, Vec<PixelAccum>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let mut order = bins[tile].clone();
            sort_by_depth(&mut order, &projected);
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let mut accs = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for dy in 0..TILE_SIZE {
                let y = ty * TILE_SIZE + dy;
                if y >= h {
                    break;
                }
                for dx in 0..TILE_SIZE {
                    let x = tx * TILE_SIZE + dx;
                    if x >= w {
                        continue;
                    }
                    accs.push(blend_pixel(x as f64 + 0.5, y as f64 + 0.5, &order, &projected));
                }
            }
            (tile, accs)
        })
        .collect();

    // scatter tile pixels back to row-major order
    let mut pixels: Vec<Option<PixelAccum>> = (0..w * h).map(|_| None).collect();
    for (tile, accs) in tile_results {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let mut it = accs.into_iter();
        for dy in 0..TILE_SIZE {
            let y = ty * TILE_SIZE + dy;
            if y >= h {
                break;
            }
            for dx in 0..TILE_SIZE {
                let x = tx * TILE_SIZE + dx;
                if x >= w {
                    continue;
                }
                pixels[y * w + x] = it.next();
            }
        }
    }
    let pixels: Vec<PixelAccum> = pixels.into_iter().map(|p| p.unwrap()).collect();
    finish_output(camera, mode, projected, pixels, cloud.len())
}

/// Reference renderer: no tiling, no culling beyond the shared per-contribution
/// cutoff, one global stable depth sort. Identical contract to [`render`].
pub fn render_brute_force(cloud: &GaussianCloud, camera: &Camera, mode: RenderMode) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let projected: Vec<Option<ProjectedSplat>> =
        cloud.iter().map(|g| project_splat(g, camera)).collect();
    let mut order: Vec<u32> = projected
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|_| i as u32))
        .collect();
    sort_by_depth(&mut order, &projected);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            pixels.push(blend_pixel(x as f64 + 0.5, y as f64 + 0.5, &order, &projected));
        }
    }
    finish_output(camera, mode, projected, pixels, cloud.len())
}

/// Upstream gradient for [`render_backward`], matching the forward mode.
pub enum Upstream<'a> {
    /// H*W*3 gradient of the color image.
    Color(&'a [f64]),
    /// H*W gradient of the weight map.
    Weight(&'a [f64]),
    /// H*W gradient of the expected-depth map.
    Depth(&'a [f64]),
}

/// Exact analytic gradients of the forward pass for every Gaussian field.
pub fn render_backward(
    output: &RenderOutput,
    cloud: &GaussianCloud,
    camera: &Camera,
    upstream: &Upstream,
) -> Result<CloudGrads> {
    let state = output
        .state
        .as_ref()
        .ok_or_else(|| SplatError::Contract("forward state was dropped before backward".into()))?;
    if state.cloud_len != cloud.len() {
        return Err(SplatError::Contract("cloud changed since the forward pass".into()));
    }
    match (output.mode, upstream) {
        (RenderMode::Color, Upstream::Color(g)) => {
            if g.len() != output.width * output.height * 3 {
                return Err(SplatError::InvalidInput("upstream color grad size mismatch".into()));
            }
        }
        (RenderMode::Weight, Upstream::Weight(g)) | (RenderMode::Depth, Upstream::Depth(g)) => {
            if g.len() != output.width * output.height {
                return Err(SplatError::InvalidInput("upstream grad size mismatch".into()));
            }
        }
        _ => return Err(SplatError::InvalidInput("upstream gradient does not match render mode".into())),
    }

    let n = cloud.len();
    let (w, h) = (output.width, output.height);

    // Screen-space accumulators per Gaussian.
    #[derive(Clone)]
    struct ScreenGrad {
        mean: Vector2<f64>,
        cov: Matrix2<f64>,
        z: f64,
        alpha: f64,
        color: Vector3<f64>,
    }
    let zero = ScreenGrad {
        mean: Vector2::zeros(),
        cov: Matrix2::zeros(),
        z: 0.0,
        alpha: 0.0,
        color: Vector3::zeros(),
    };

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut tile_grads: Vec<Vec<ScreenGrad>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let mut grads = vec![zero.clone(); n];
            for dy in 0..TILE_SIZE {
                let y = ty * TILE_SIZE + dy;
                if y >= h {
                    break;
                }
                for dx in 0..TILE_SIZE {
                    let x = tx * TILE_SIZE + dx;
                    if x >= w {
                        continue;
                    }
                    let pix = y * w + x;
                    let list = &state.contribs[pix];
                    if list.is_empty() {
                        continue;
                    }
                    // Per-pixel upstream in (color grad, weight grad, depth-sum grad) form.
                    let (gc, gw, gz) = match upstream {
                        Upstream::Color(g) => {
                            (Vector3::new(g[pix * 3], g[pix * 3 + 1], g[pix * 3 + 2]), 0.0, 0.0)
                        }
                        Upstream::Weight(g) => (Vector3::zeros(), g[pix], 0.0),
                        Upstream::Depth(g) => {
                            let weight = output.weight[pix];
                            if weight <= DEPTH_EPS {
                                continue;
                            }
                            let depth_px = output.depth.as_ref().unwrap()[pix];
                            // D = depth_sum / weight
                            (Vector3::zeros(), -depth_px / weight * g[pix], g[pix] / weight)
                        }
                    };
                    if gc == Vector3::zeros() && gw == 0.0 && gz == 0.0 {
                        continue;
                    }
                    let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    // Suffix sums over later contributions.
                    let mut suffix_c = Vector3::zeros();
                    let mut suffix_w = 0.0;
                    let mut suffix_z = 0.0;
                    for c in list.iter().rev() {
                        let s = state.projected[c.splat as usize].as_ref().unwrap();
                        let gacc = &mut grads[c.splat as usize];
                        let blend = c.alpha_prime * c.transmittance;
                        gacc.color += gc * blend;
                        gacc.z += gz * blend;
                        let one_minus = 1.0 - c.alpha_prime;
                        let (rc, rw, rz) = if one_minus > 1e-12 {
                            (suffix_c / one_minus, suffix_w / one_minus, suffix_z / one_minus)
                        } else {
                            (Vector3::zeros(), 0.0, 0.0)
                        };
                        let d_alpha_prime = gc.dot(&(s.color * c.transmittance - rc))
                            + gw * (c.transmittance - rw)
                            + gz * (s.p_cam.z * c.transmittance - rz);
                        // alpha' = alpha * exp(power)
                        let gauss_val = c.alpha_prime / s.alpha;
                        gacc.alpha += d_alpha_prime * gauss_val;
                        let d_power = d_alpha_prime * c.alpha_prime;
                        let d = pixel - s.mean;
                        let y_vec = s.cov_inv * d;
                        // power = -1/2 d^T C^-1 d, d = pixel - mean
                        gacc.mean += y_vec * d_power;
                        gacc.cov += (y_vec * y_vec.transpose()) * (0.5 * d_power);
                        suffix_c += s.color * blend;
                        suffix_w += blend;
                        suffix_z += s.p_cam.z * blend;
                    }
                }
            }
            grads
        })
        .collect();

    // Fixed-order reduction over tiles keeps backward deterministic.
    let mut screen = tile_grads.remove(0);
    for t in &tile_grads {
        for i in 0..n {
            screen[i].mean += t[i].mean;
            screen[i].cov += t[i].cov;
            screen[i].z += t[i].z;
            screen[i].alpha += t[i].alpha;
            screen[i].color += t[i].color;
        }
    }

    // Geometric chain per Gaussian: screen-space grads -> (mu, scale, rot).
    let mut out = CloudGrads::zeros(n);
    let k = &camera.intrinsics;
    let rc = camera.pose.rotation;
    for i in 0..n {
        let Some(s) = state.projected[i].as_ref() else { continue };
        let g = &cloud[i];
        let sg = &screen[i];
        out.color[i] = sg.color;
        out.alpha[i] = sg.alpha;

        let p = s.p_cam;
        let z = p.z;
        let j = perspective_jacobian(&p, k.fx, k.fy);

        // mean2d path: dp += J^T dmean
        let mut dp = j.transpose() * sg.mean;
        dp.z += sg.z;

        // cov2d path: C = J V J^T + dilation, V = Rc Sigma Rc^T
        let cbar = 0.5 * (sg.cov + sg.cov.transpose());
        let sigma_cam = rc * g.covariance() * rc.transpose();
        let dv = j.transpose() * cbar * j;
        let dj = 2.0 * cbar * j * sigma_cam;
        dp.x += dj[(0, 2)] * (-k.fx / (z * z));
        dp.y += dj[(1, 2)] * (-k.fy / (z * z));
        dp.z += dj[(0, 0)] * (-k.fx / (z * z))
            + dj[(0, 2)] * (2.0 * k.fx * p.x / (z * z * z))
            + dj[(1, 1)] * (-k.fy / (z * z))
            + dj[(1, 2)] * (2.0 * k.fy * p.y / (z * z * z));

        out.mu[i] = rc.transpose() * dp;

        // world covariance path: Sigma = R(q) S^2 R(q)^T
        let dsigma = rc.transpose() * dv * rc;
        let a = 0.5 * (dsigma + dsigma.transpose());
        let rot_m = quat_to_rotation(&g.rot);
        let s2 = Matrix3::from_diagonal(&Vector3::new(
            g.scale.x * g.scale.x,
            g.scale.y * g.scale.y,
            g.scale.z * g.scale.z,
        ));
        let rt_a_r = rot_m.transpose() * a * rot_m;
        out.scale[i] = Vector3::new(
            2.0 * g.scale.x * rt_a_r[(0, 0)],
            2.0 * g.scale.y * rt_a_r[(1, 1)],
            2.0 * g.scale.z * rt_a_r[(2, 2)],
        );
        let dr = 2.0 * a * rot_m * s2;
        out.rot[i] = quat_rotation_backward(&g.rot, &dr);
    }
    Ok(out)
}

/// Pull a gradient on R(q/|q|) back to the raw quaternion components.
fn quat_rotation_backward(q: &Vector4<f64>, dr: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let qn = q / norm;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g_unit = Vector4::new(
        dr.component_mul(&dw).sum(),
        dr.component_mul(&dx).sum(),
        dr.component_mul(&dy).sum(),
        dr.component_mul(&dz).sum(),
    );
    // through the normalization q -> q/|q|
    (g_unit - qn * qn.dot(&g_unit)) / norm
}
