//! Student models (per-pixel field and micro conv net), the teacher oracle,
//! the extrapolator, and the graph nodes that plug the Gaussian lift and the
//! rasterizer into the autodiff tape.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Graph, Tensor, Var};
use crate::error::{Result, SplatError};
use crate::geometry::{
    normalize_depth_grad, project, shifted_pose, unproject, Camera, Projection,
};
use crate::rasterizer::{render, render_backward, RenderMode, RenderOutput, Upstream};
use crate::splat::{
    lift_predictions, sigmoid, Gaussian, GaussianCloud, RAW_ALPHA, RAW_CHANNELS, RAW_COLOR,
    RAW_DEPTH, RAW_ROT, RAW_SCALE,
};

/// Column layout of a lifted Gaussian row (matches the cloud dump order).
pub const G_MU: usize = 0;
pub const G_ALPHA: usize = 3;
pub const G_SCALE: usize = 4;
pub const G_ROT: usize = 7;
pub const G_COLOR: usize = 11;
pub const G_COLS: usize = 14;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn tensor_to_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

/// Rebuild a Gaussian cloud from a lifted [N,14] tensor.
pub fn cloud_from_tensor(t: &Tensor) -> Result<GaussianCloud> {
    if t.shape.len() != 2 || t.shape[1] != G_COLS {
        return Err(SplatError::InvalidInput("expected an [N,14] Gaussian tensor".into()));
    }
    let mut cloud = Vec::with_capacity(t.shape[0]);
    for row in t.data.chunks(G_COLS) {
        let r = |i: usize| row[i] as f64;
        cloud.push(Gaussian {
            mu: Vector3::new(r(G_MU), r(G_MU + 1), r(G_MU + 2)),
            alpha: r(G_ALPHA),
            scale: Vector3::new(r(G_SCALE), r(G_SCALE + 1), r(G_SCALE + 2)),
            rot: Vector4::new(r(G_ROT), r(G_ROT + 1), r(G_ROT + 2), r(G_ROT + 3)),
            color: Vector3::new(r(G_COLOR), r(G_COLOR + 1), r(G_COLOR + 2)),
        });
    }
    Ok(cloud)
}

fn tensor_from_cloud(cloud: &GaussianCloud) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * G_COLS);
    for g in cloud {
        data.extend(g.mu.iter().map(|&v| v as f32));
        data.push(g.alpha as f32);
        data.extend(g.scale.iter().map(|&v| v as f32));
        data.extend(g.rot.iter().map(|&v| v as f32));
        data.extend(g.color.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![cloud.len(), G_COLS], data)
}

/// Fused activation + unprojection of an [H,W,14] raw grid into [N,14]
/// Gaussian rows, with an analytic backward through every activation.
#[derive(Debug)]
struct LiftOp {
    raw: Vec<f64>,
    width: usize,
    height: usize,
    camera: Camera,
}

impl CustomGrad for LiftOp {
    fn backward(&self, upstream: &[f32]) -> Vec<Vec<f32>> {
        let mut grad = vec![0.0f32; self.raw.len()];
        let k = &self.camera.intrinsics;
        let rt = self.camera.pose.rotation.transpose();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                let raw = &self.raw[i * RAW_CHANNELS..(i + 1) * RAW_CHANNELS];
                let up = &upstream[i * G_COLS..(i + 1) * G_COLS];
                let g = &mut grad[i * RAW_CHANNELS..(i + 1) * RAW_CHANNELS];

                // depth: mu = R^T (p_cam - t) with p_cam = (u d, v d, d)
                let u = (x as f64 + 0.5 - k.cx) / k.fx;
                let v = (y as f64 + 0.5 - k.cy) / k.fy;
                let dmu_dd = rt * Vector3::new(u, v, 1.0);
                let up_mu =
                    Vector3::new(up[G_MU] as f64, up[G_MU + 1] as f64, up[G_MU + 2] as f64);
                let clamped = raw[RAW_DEPTH].max(0.0);
                let dd = if raw[RAW_DEPTH] > 0.0 {
                    normalize_depth_grad(clamped, &self.camera)
                } else {
                    0.0
                };
                g[RAW_DEPTH] = (up_mu.dot(&dmu_dd) * dd) as f32;

                let sa = sigmoid(raw[RAW_ALPHA]);
                g[RAW_ALPHA] = (up[G_ALPHA] as f64 * sa * (1.0 - sa)) as f32;

                for c in 0..3 {
                    // d softplus = sigmoid
                    g[RAW_SCALE + c] =
                        (up[G_SCALE + c] as f64 * sigmoid(raw[RAW_SCALE + c])) as f32;
                }

                let r = Vector4::new(
                    raw[RAW_ROT],
                    raw[RAW_ROT + 1],
                    raw[RAW_ROT + 2],
                    raw[RAW_ROT + 3],
                );
                let n = r.norm();
                if n >= 1e-8 {
                    let q = r / n;
                    let up_rot = Vector4::new(
                        up[G_ROT] as f64,
                        up[G_ROT + 1] as f64,
                        up[G_ROT + 2] as f64,
                        up[G_ROT + 3] as f64,
                    );
                    let gr = (up_rot - q * q.dot(&up_rot)) / n;
                    for c in 0..4 {
                        g[RAW_ROT + c] = gr[c] as f32;
                    }
                }
                // identity fallback below the norm floor: zero gradient

                for c in 0..3 {
                    let s = sigmoid(raw[RAW_COLOR + c]);
                    g[RAW_COLOR + c] = (up[G_COLOR + c] as f64 * s * (1.0 - s)) as f32;
                }
            }
        }
        vec![grad]
    }
}

/// Graph node: [H,W,14] raw predictions -> [N,14] lifted Gaussians.
pub fn lift_node(g: &mut Graph, raw: Var, camera: &Camera) -> Result<Var> {
    let t = g.value(raw);
    if t.shape.len() != 3
        || t.shape[2] != RAW_CHANNELS
        || t.shape[0] != camera.height()
        || t.shape[1] != camera.width()
    {
        return Err(SplatError::InvalidInput(format!(
            "lift expects [{},{},{}], got {:?}",
            camera.height(),
            camera.width(),
            RAW_CHANNELS,
            t.shape
        )));
    }
    let raw64 = tensor_to_f64(t);
    let (h, w) = (t.shape[0], t.shape[1]);
    let cloud = lift_predictions(&raw64, w, h, camera)?;
    let value = tensor_from_cloud(&cloud);
    let op = LiftOp { raw: raw64, width: w, height: h, camera: camera.clone() };
    Ok(g.custom(&[raw], value, Box::new(op)))
}

/// View a lifted [N,14] tensor's centers as an [H,W,3] grid.
pub fn mu_grid(g: &mut Graph, lifted: Var, height: usize, width: usize) -> Result<Var> {
    let mu = g.slice_channels(lifted, G_MU, G_MU + 3)?;
    g.reshape(mu, vec![height, width, 3])
}

#[derive(Debug)]
struct RenderOp {
    output: RenderOutput,
    cloud: GaussianCloud,
    camera: Camera,
}

impl CustomGrad for RenderOp {
    fn backward(&self, upstream: &[f32]) -> Vec<Vec<f32>> {
        let up64: Vec<f64> = upstream.iter().map(|&v| v as f64).collect();
        let up = match self.output.mode {
            RenderMode::Color => Upstream::Color(&up64),
            RenderMode::Weight => Upstream::Weight(&up64),
            RenderMode::Depth => Upstream::Depth(&up64),
        };
        let grads = render_backward(&self.output, &self.cloud, &self.camera, &up)
            .expect("render backward over the recorded forward state");
        let mut dg = vec![0.0f32; self.cloud.len() * G_COLS];
        for i in 0..self.cloud.len() {
            let row = &mut dg[i * G_COLS..(i + 1) * G_COLS];
            for c in 0..3 {
                row[G_MU + c] = grads.mu[i][c] as f32;
                row[G_SCALE + c] = grads.scale[i][c] as f32;
                row[G_COLOR + c] = grads.color[i][c] as f32;
            }
            row[G_ALPHA] = grads.alpha[i] as f32;
            for c in 0..4 {
                row[G_ROT + c] = grads.rot[i][c] as f32;
            }
        }
        vec![dg]
    }
}

/// Graph node: rasterize a lifted [N,14] tensor. Color mode yields [H,W,3];
/// weight and depth modes yield [H,W,1].
pub fn render_node(g: &mut Graph, gaussians: Var, camera: &Camera, mode: RenderMode) -> Result<Var> {
    let cloud = cloud_from_tensor(g.value(gaussians))?;
    let output = render(&cloud, camera, mode);
    let (h, w) = (output.height, output.width);
    let value = match mode {
        RenderMode::Color => Tensor::new(
            vec![h, w, 3],
            output.color.as_ref().unwrap().iter().map(|&v| v as f32).collect(),
        ),
        RenderMode::Weight => {
            Tensor::new(vec![h, w, 1], output.weight.iter().map(|&v| v as f32).collect())
        }
        RenderMode::Depth => Tensor::new(
            vec![h, w, 1],
            output.depth.as_ref().unwrap().iter().map(|&v| v as f32).collect(),
        ),
    };
    let op = RenderOp { output, cloud, camera: camera.clone() };
    Ok(g.custom(&[gaussians], value, Box::new(op)))
}

/// Per-pixel learnable raw parameters; the degenerate "network" used for
/// single-scene mechanism tests.
#[derive(Debug, Clone)]
pub struct StudentField {
    pub width: usize,
    pub height: usize,
    pub params: Vec<Param>,
}

impl StudentField {
    pub fn new(width: usize, height: usize) -> Self {
        let mut data = vec![0.0f32; width * height * RAW_CHANNELS];
        for px in data.chunks_mut(RAW_CHANNELS) {
            // mid-range depth, moderate opacity, small isotropic scale,
            // identity rotation, mid-gray color
            px[RAW_DEPTH] = 0.12;
            px[RAW_ALPHA] = 2.0;
            for c in 0..3 {
                px[RAW_SCALE + c] = -3.0;
            }
            px[RAW_ROT] = 1.0;
        }
        StudentField {
            width,
            height,
            params: vec![Param {
                name: "field.raw".into(),
                value: Tensor::new(vec![height, width, RAW_CHANNELS], data),
            }],
        }
    }

    /// Raw prediction grid for one context view; the image is unused by the
    /// field variant (its parameters are the prediction).
    pub fn forward(&self, _g: &mut Graph, bound: &[Var], _image: Var) -> Result<Var> {
        Ok(bound[0])
    }
}

/// Backbone (3 stages of conv3x3 + GeLU), a shallow refine branch over the
/// raw image concatenated with backbone features, and a conv3x3-GeLU-conv1x1
/// head emitting the 14 raw channels.
#[derive(Debug, Clone)]
pub struct StudentConvNet {
    pub channels: usize,
    pub params: Vec<Param>,
}

impl StudentConvNet {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels;
        let mut params = Vec::new();
        let mut conv = |name: &str, cout: usize, k: usize, cin: usize| {
            let fan_in = k * k * cin;
            params.push(Param {
                name: format!("{name}.w"),
                value: kaiming_uniform(&mut rng, vec![cout, k, k, cin], fan_in),
            });
            params.push(Param { name: format!("{name}.b"), value: Tensor::zeros(vec![cout]) });
        };
        conv("backbone.0", c, 3, 3);
        conv("backbone.1", c, 3, c);
        conv("backbone.2", c, 3, c);
        conv("refine.0", c, 3, 3 + c);
        conv("head.0", c, 3, c);
        conv("head.1", RAW_CHANNELS, 1, c);
        StudentConvNet { channels: c, params }
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], image: Var) -> Result<Var> {
        let conv = |g: &mut Graph, x: Var, i: usize| -> Result<Var> {
            g.conv2d(x, bound[i * 2], bound[i * 2 + 1])
        };
        let mut f = image;
        for stage in 0..3 {
            let h = conv(g, f, stage)?;
            f = g.gelu(h);
        }
        let cat = g.concat_channels(image, f)?;
        let r = conv(g, cat, 3)?;
        let r = g.gelu(r);
        let h = conv(g, r, 4)?;
        let h = g.gelu(h);
        conv(g, h, 5)
    }
}

/// Micro conv net mapping a rendered novel view (plus, by default, its
/// confidence weight) to a filled image in [0,1].
#[derive(Debug, Clone)]
pub struct Extrapolator {
    pub channels: usize,
    pub with_weight: bool,
    pub params: Vec<Param>,
}

impl Extrapolator {
    pub fn new(seed: u64, channels: usize, with_weight: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = if with_weight { 4 } else { 3 };
        let c = channels;
        let mut params = Vec::new();
        let mut conv = |name: &str, cout: usize, k: usize, ci: usize| {
            params.push(Param {
                name: format!("{name}.w"),
                value: kaiming_uniform(&mut rng, vec![cout, k, k, ci], k * k * ci),
            });
            params.push(Param { name: format!("{name}.b"), value: Tensor::zeros(vec![cout]) });
        };
        conv("fill.0", c, 3, cin);
        conv("fill.1", c, 3, c);
        conv("fill.2", 3, 1, c);
        Extrapolator { channels: c, with_weight, params }
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], rendered: Var, weight: Var) -> Result<Var> {
        let input =
            if self.with_weight { g.concat_channels(rendered, weight)? } else { rendered };
        let h = g.conv2d(input, bound[0], bound[1])?;
        let h = g.gelu(h);
        let h = g.conv2d(h, bound[2], bound[3])?;
        let h = g.gelu(h);
        let h = g.conv2d(h, bound[4], bound[5])?;
        Ok(g.sigmoid(h))
    }
}

/// Shared parameter plumbing for checkpoints and graph binding.
pub trait ParamModel {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];

    /// Create one requires-grad leaf per parameter, in declaration order.
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().iter().map(|p| g.leaf(p.value.clone(), true)).collect()
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        self.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        for p in self.params_mut() {
            let t = state
                .iter()
                .find(|(n, _)| n == &p.name)
                .map(|(_, t)| t)
                .ok_or_else(|| SplatError::InvalidInput(format!("missing tensor {}", p.name)))?;
            if t.shape != p.value.shape {
                return Err(SplatError::InvalidInput(format!("shape mismatch for {}", p.name)));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

macro_rules! impl_param_model {
    ($ty:ty) => {
        impl ParamModel for $ty {
            fn params(&self) -> &[Param] {
                &self.params
            }
            fn params_mut(&mut self) -> &mut [Param] {
                &mut self.params
            }
        }
    };
}

impl_param_model!(StudentField);
impl_param_model!(StudentConvNet);
impl_param_model!(Extrapolator);

/// Either student variant behind one forward interface.
#[derive(Debug, Clone)]
pub enum StudentModel {
    Field(StudentField),
    ConvNet(StudentConvNet),
}

impl StudentModel {
    pub fn forward(&self, g: &mut Graph, bound: &[Var], image: Var) -> Result<Var> {
        match self {
            StudentModel::Field(m) => m.forward(g, bound, image),
            StudentModel::ConvNet(m) => m.forward(g, bound, image),
        }
    }
}

impl ParamModel for StudentModel {
    fn params(&self) -> &[Param] {
        match self {
            StudentModel::Field(m) => m.params(),
            StudentModel::ConvNet(m) => m.params(),
        }
    }
    fn params_mut(&mut self) -> &mut [Param] {
        match self {
            StudentModel::Field(m) => m.params_mut(),
            StudentModel::ConvNet(m) => m.params_mut(),
        }
    }
}

/// Inference-only path: image + camera -> Gaussian cloud, no tape kept.
pub fn student_cloud(model: &StudentModel, image: &Tensor, camera: &Camera) -> Result<GaussianCloud> {
    if image.shape != vec![camera.height(), camera.width(), 3] {
        return Err(SplatError::InvalidInput("image does not match the camera dims".into()));
    }
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let bound = model.bind(&mut g);
    let raw = model.forward(&mut g, &bound, img)?;
    let raw64 = tensor_to_f64(g.value(raw));
    lift_predictions(&raw64, camera.width(), camera.height(), camera)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum TeacherVariant {
    ScaledGt,
    PlaneSweep { hypotheses: usize, depth_min: f64, depth_max: f64 },
}

/// Oracle standing in for a multi-view teacher: produces Gaussian centers
/// that are exact geometry up to one hidden per-run scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherOracle {
    pub variant: TeacherVariant,
    /// Hidden relative scale s > 0, fixed for the whole run.
    pub scale: f64,
}

impl TeacherOracle {
    /// Draw the hidden scale once from the run seed.
    pub fn from_seed(variant: TeacherVariant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac);
        TeacherOracle { variant, scale: rng.gen_range(0.5..2.0) }
    }

    pub fn with_scale(variant: TeacherVariant, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(SplatError::InvalidInput("teacher scale must be > 0".into()));
        }
        Ok(TeacherOracle { variant, scale })
    }

    /// Teacher depth per context view, before unprojection (already scaled).
    pub fn teacher_depths(
        &self,
        scene: &crate::scenes::SyntheticScene,
        contexts: &[Camera],
    ) -> Result<Vec<Vec<f64>>> {
        match &self.variant {
            TeacherVariant::ScaledGt => Ok(contexts
                .iter()
                .map(|cam| {
                    crate::scenes::render_ground_truth(scene, cam)
                        .depth
                        .iter()
                        .map(|d| d * self.scale)
                        .collect()
                })
                .collect()),
            TeacherVariant::PlaneSweep { hypotheses, depth_min, depth_max } => {
                if contexts.len() < 2 {
                    return Err(SplatError::InvalidInput(
                        "plane_sweep teacher needs at least 2 context views".into(),
                    ));
                }
                let gt: Vec<_> =
                    contexts.iter().map(|c| crate::scenes::render_ground_truth(scene, c)).collect();
                let mut out = Vec::with_capacity(contexts.len());
                for i in 0..contexts.len() {
                    let j = if i == 0 { 1 } else { 0 };
                    let depth = plane_sweep_depth(
                        &gt[i].image,
                        &contexts[i],
                        &gt[j].image,
                        &contexts[j],
                        *depth_min,
                        *depth_max,
                        *hypotheses,
                    )?;
                    out.push(depth.iter().map(|d| d * self.scale).collect());
                }
                Ok(out)
            }
        }
    }

    /// Scaled Gaussian centers along each pixel ray, one grid per context view.
    pub fn teacher_centers(
        &self,
        scene: &crate::scenes::SyntheticScene,
        contexts: &[Camera],
    ) -> Result<Vec<Vec<Vector3<f64>>>> {
        let depths = self.teacher_depths(scene, contexts)?;
        let mut out = Vec::with_capacity(contexts.len());
        for (cam, depth) in contexts.iter().zip(&depths) {
            let w = cam.width();
            let mut mu = Vec::with_capacity(depth.len());
            for (idx, &d) in depth.iter().enumerate() {
                let (x, y) = (idx % w, idx / w);
                mu.push(unproject(cam, [x as f64 + 0.5, y as f64 + 0.5], d)?);
            }
            out.push(mu);
        }
        Ok(out)
    }
}

fn sample_bilinear(image: &[f32], width: usize, height: usize, px: f64, py: f64) -> [f64; 3] {
    let x = (px - 0.5).clamp(0.0, width as f64 - 1.0);
    let y = (py - 0.5).clamp(0.0, height as f64 - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let v00 = image[(y0 * width + x0) * 3 + c] as f64;
        let v01 = image[(y0 * width + x1) * 3 + c] as f64;
        let v10 = image[(y1 * width + x0) * 3 + c] as f64;
        let v11 = image[(y1 * width + x1) * 3 + c] as f64;
        out[c] = v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx;
    }
    out
}

const SWEEP_OOB_PENALTY: f64 = 10.0;

/// Per-pixel depth by testing `hypotheses` linearly spaced depths: the cost
/// is the 3x3-window SSD between the reference view and the other view
/// sampled at the hypothesis reprojection. Ties keep the nearer hypothesis.
pub fn plane_sweep_depth(
    img_ref: &[f32],
    cam_ref: &Camera,
    img_other: &[f32],
    cam_other: &Camera,
    depth_min: f64,
    depth_max: f64,
    hypotheses: usize,
) -> Result<Vec<f64>> {
    if hypotheses < 2 || depth_min <= 0.0 || depth_max <= depth_min {
        return Err(SplatError::InvalidInput("bad plane sweep configuration".into()));
    }
    let (w, h) = (cam_ref.width(), cam_ref.height());
    if img_ref.len() != w * h * 3 {
        return Err(SplatError::InvalidInput("reference image size mismatch".into()));
    }
    let (ow, oh) = (cam_other.width(), cam_other.height());
    if img_other.len() != ow * oh * 3 {
        return Err(SplatError::InvalidInput("other image size mismatch".into()));
    }
    let step = (depth_max - depth_min) / (hypotheses - 1) as f64;
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best_cost = f64::INFINITY;
            let mut best_depth = depth_min;
            for k in 0..hypotheses {
                let d = depth_min + k as f64 * step;
                let mut cost = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sx = x as i64 + dx;
                        let sy = y as i64 + dy;
                        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                            continue;
                        }
                        let px = sx as f64 + 0.5;
                        let py = sy as f64 + 0.5;
                        let world = unproject(cam_ref, [px, py], d)?;
                        match project(cam_other, &world) {
                            Projection::Visible { pixel, depth }
                                if depth > 0.0
                                    && pixel[0] >= 0.0
                                    && pixel[0] <= ow as f64
                                    && pixel[1] >= 0.0
                                    && pixel[1] <= oh as f64 =>
                            {
                                let s = sample_bilinear(img_other, ow, oh, pixel[0], pixel[1]);
                                let base = (sy as usize * w + sx as usize) * 3;
                                for c in 0..3 {
                                    let diff = img_ref[base + c] as f64 - s[c];
                                    cost += diff * diff;
                                }
                            }
                            _ => cost += SWEEP_OOB_PENALTY,
                        }
                    }
                }
                if cost < best_cost {
                    best_cost = cost;
                    best_depth = d;
                }
            }
            out[y * w + x] = best_depth;
        }
    }
    Ok(out)
}

/// Render the student's cloud from a forward-shifted virtual pose and run the
/// two-view plane-sweep refiner on {input view, rendered view}.
pub fn refine_with_teacher(
    cloud: &GaussianCloud,
    image: &[f32],
    camera: &Camera,
    shift: f64,
    depth_min: f64,
    depth_max: f64,
    hypotheses: usize,
) -> Result<Vec<f64>> {
    if shift == 0.0 {
        return Err(SplatError::InvalidInput(
            "refine needs a non-zero forward shift (zero baseline)".into(),
        ));
    }
    let virtual_cam = shifted_pose(camera, shift);
    let rendered = render(cloud, &virtual_cam, RenderMode::Color);
    let fake_view: Vec<f32> =
        rendered.color.as_ref().unwrap().iter().map(|&v| v as f32).collect();
    plane_sweep_depth(image, camera, &fake_view, &virtual_cam, depth_min, depth_max, hypotheses)
}

/// Median of elementwise ratios; the hidden teacher scale is recoverable as
/// `ratio_median(teacher_depth, gt_depth)`.
pub fn ratio_median(num: &[f64], den: &[f64]) -> f64 {
    let mut r: Vec<f64> =
        num.iter().zip(den).filter(|(_, &d)| d > 0.0).map(|(&n, &d)| n / d).collect();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2]
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2])
    }
}
