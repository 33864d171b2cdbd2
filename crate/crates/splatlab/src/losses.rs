//! Training objectives: geometric center supervision, 3D gradient matching,
//! weight-composed photometric loss with routed gradients, and the assembled
//! total with ablation flags.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Result, SplatError};
use crate::geometry::Camera;
use crate::models::{lift_node, mu_grid, render_node, Extrapolator, StudentModel};
use crate::rasterizer::RenderMode;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_geo: f32,
    pub lambda_grad: f32,
    pub lambda_l2: f32,
    pub lambda_perc: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_geo: 1.0, lambda_grad: 1.0, lambda_l2: 1.0, lambda_perc: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_grad", self.lambda_grad),
            ("lambda_l2", self.lambda_l2),
            ("lambda_perc", self.lambda_perc),
        ] {
            if !(v >= 0.0) {
                return Err(SplatError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_composition: bool,
    #[serde(default)]
    pub no_extrapolation: bool,
    #[serde(default)]
    pub no_grad_match: bool,
    #[serde(default)]
    pub no_teacher: bool,
}

impl AblationFlags {
    /// Ablations stack: dropping the extrapolator leaves nothing to compose,
    /// so it is only valid together with the composition ablation.
    pub fn validate(&self) -> Result<()> {
        if self.no_extrapolation && !self.no_composition {
            return Err(SplatError::Config(
                "no_extrapolation requires no_composition (nothing left to compose)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration loss record; total equals the sum of the parts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub geo: f64,
    pub grad: f64,
    pub l2: f64,
    pub perc: f64,
    pub total: f64,
}

/// Graph handles for every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub geo: Var,
    pub grad: Var,
    pub l2: Var,
    pub perc: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph, iter: u64) -> LossReport {
        LossReport {
            iter,
            geo: g.scalar_value(self.geo) as f64,
            grad: g.scalar_value(self.grad) as f64,
            l2: g.scalar_value(self.l2) as f64,
            perc: g.scalar_value(self.perc) as f64,
            total: g.scalar_value(self.total) as f64,
        }
    }
}

/// lambda_geo * mean |mu_t - mu_s| over all H*W*3 elements.
pub fn loss_geo(g: &mut Graph, mu_s: Var, mu_t: Var, lambda: f32) -> Result<Var> {
    let d = g.sub(mu_t, mu_s)?;
    let a = g.abs(d);
    let m = g.mean(a);
    Ok(g.scale(m, lambda))
}

/// Reference f64 neighbor-distance map: channel 0 next-row, channel 1
/// next-column, (H-1)x(W-1)x2. The graph op mirrors this in f32.
pub fn grad3d_f64(mu: &[Vector3<f64>], height: usize, width: usize) -> Result<Vec<f64>> {
    if height < 2 || width < 2 || mu.len() != height * width {
        return Err(SplatError::InvalidInput("grad3d needs an H>=2 x W>=2 grid".into()));
    }
    let mut out = vec![0.0; (height - 1) * (width - 1) * 2];
    for y in 0..height - 1 {
        for x in 0..width - 1 {
            let p = mu[y * width + x];
            let o = (y * (width - 1) + x) * 2;
            out[o] = (mu[(y + 1) * width + x] - p).norm();
            out[o + 1] = (mu[y * width + x + 1] - p).norm();
        }
    }
    Ok(out)
}

/// lambda_grad * mean |grad3d(mu_t) - grad3d(mu_s)|.
pub fn loss_grad_match(g: &mut Graph, mu_s: Var, mu_t: Var, lambda: f32) -> Result<Var> {
    let gs = g.grad3d(mu_s)?;
    let gt = g.grad3d(mu_t)?;
    let d = g.sub(gt, gs)?;
    let a = g.abs(d);
    let m = g.mean(a);
    Ok(g.scale(m, lambda))
}

/// I_c = filled * (1 - W) + rendered * W, with W in [0,1] broadcast over RGB.
pub fn compose(g: &mut Graph, rendered: Var, filled: Var, weight: Var) -> Result<Var> {
    let direct = g.mul_bcast(rendered, weight)?;
    let ones = g.constant(Tensor::new(
        g.value(weight).shape.clone(),
        vec![1.0; g.value(weight).numel()],
    ));
    let inv = g.sub(ones, weight)?;
    let fill = g.mul_bcast(filled, inv)?;
    g.add(direct, fill)
}

/// Blur-then-halve pyramid step (binomial 3x3 kernel per channel).
fn pyr_down(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.value(x).shape[2];
    let mut wdata = vec![0.0f32; c * 3 * 3 * c];
    let k = [1.0f32, 2.0, 1.0];
    for co in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                wdata[((co * 3 + ky) * 3 + kx) * c + co] = k[ky] * k[kx] / 16.0;
            }
        }
    }
    let w = g.constant(Tensor::new(vec![c, 3, 3, c], wdata));
    let b = g.constant(Tensor::zeros(vec![c]));
    let blurred = g.conv2d(x, w, b)?;
    g.avg_pool2(blurred)
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    Ok(g.mean(ad))
}

/// Photometric loss split into its two reported parts:
/// l2 = lambda_l2 * RMS(composed - target), perc = lambda_perc * proxy
/// (pyramid L1 at 1/2 and 1/4 scale plus Sobel-gradient L1 at full scale).
pub fn loss_photo(g: &mut Graph, composed: Var, target: Var, w: &LossWeights) -> Result<(Var, Var)> {
    if g.value(composed).shape != g.value(target).shape {
        return Err(SplatError::InvalidInput("photometric shape mismatch".into()));
    }
    let d = g.sub(composed, target)?;
    let sq = g.mul(d, d)?;
    let ms = g.mean(sq);
    let rms = g.sqrt_guard(ms);
    let l2 = g.scale(rms, w.lambda_l2);

    let c_half = pyr_down(g, composed)?;
    let t_half = pyr_down(g, target)?;
    let p1 = mean_abs_diff(g, c_half, t_half)?;
    let c_quarter = pyr_down(g, c_half)?;
    let t_quarter = pyr_down(g, t_half)?;
    let p2 = mean_abs_diff(g, c_quarter, t_quarter)?;
    let sc = g.sobel(composed)?;
    let st = g.sobel(target)?;
    let p3 = mean_abs_diff(g, sc, st)?;
    let s12 = g.add(p1, p2)?;
    let proxy = g.add(s12, p3)?;
    let perc = g.scale(proxy, w.lambda_perc);
    Ok((l2, perc))
}

/// Photometric supervision for one target view with gradient routing: the
/// extrapolator and the blend weights see stop-gradient copies of the render
/// and the weight, so the rasterizer only receives the W-weighted direct
/// term and cannot cheat by lowering opacity to lean on the fill.
pub fn photo_for_target(
    g: &mut Graph,
    rendered: Var,
    weight: Var,
    extrap: &Extrapolator,
    extrap_bound: &[Var],
    target: Var,
    w: &LossWeights,
    flags: &AblationFlags,
) -> Result<(Var, Var)> {
    if flags.no_extrapolation {
        return loss_photo(g, rendered, target, w);
    }
    let sg_rendered = g.stop_gradient(rendered);
    let sg_weight = g.stop_gradient(weight);
    let filled = extrap.forward(g, extrap_bound, sg_rendered, sg_weight)?;
    if flags.no_composition {
        loss_photo(g, filled, target, w)
    } else {
        let composed = compose(g, rendered, filled, sg_weight)?;
        loss_photo(g, composed, target, w)
    }
}

/// One training example: a context view with teacher centers, and target
/// views for novel-view supervision.
#[derive(Debug, Clone)]
pub struct SceneBatch {
    pub context_image: Tensor,
    pub context_camera: Camera,
    /// [H,W,3] teacher Gaussian centers for the context view.
    pub teacher_mu: Option<Tensor>,
    pub targets: Vec<(Camera, Tensor)>,
}

/// Full objective: teacher supervision on the context view plus composed
/// photometric supervision averaged over target views.
pub fn total_loss(
    g: &mut Graph,
    batch: &SceneBatch,
    student: &StudentModel,
    student_bound: &[Var],
    extrap: &Extrapolator,
    extrap_bound: &[Var],
    w: &LossWeights,
    flags: &AblationFlags,
) -> Result<LossTerms> {
    w.validate()?;
    flags.validate()?;
    let cam = &batch.context_camera;
    let (h, wd) = (cam.height(), cam.width());
    let image = g.constant(batch.context_image.clone());
    let raw = student.forward(g, student_bound, image)?;
    let lifted = lift_node(g, raw, cam)?;
    let zero = g.constant(Tensor::scalar(0.0));

    let (geo, grad) = if flags.no_teacher {
        (zero, zero)
    } else {
        let teacher = batch.teacher_mu.as_ref().ok_or_else(|| {
            SplatError::InvalidInput("teacher centers required unless no_teacher is set".into())
        })?;
        let mu_s = mu_grid(g, lifted, h, wd)?;
        let mu_t = g.constant(teacher.clone());
        let geo = loss_geo(g, mu_s, mu_t, w.lambda_geo)?;
        let grad = if flags.no_grad_match {
            zero
        } else {
            loss_grad_match(g, mu_s, mu_t, w.lambda_grad)?
        };
        (geo, grad)
    };

    // the rasterizer always gets direct supervision: the context view is
    // reconstructed raw, without routing through the extrapolator
    let recon = render_node(g, lifted, cam, RenderMode::Color)?;
    let (mut l2, mut perc) = loss_photo(g, recon, image, w)?;
    if !batch.targets.is_empty() {
        let (mut tl2_sum, mut tperc_sum) = (zero, zero);
        for (target_cam, target_image) in &batch.targets {
            let rendered = render_node(g, lifted, target_cam, RenderMode::Color)?;
            let weight = render_node(g, lifted, target_cam, RenderMode::Weight)?;
            let target = g.constant(target_image.clone());
            let (tl2, tperc) =
                photo_for_target(g, rendered, weight, extrap, extrap_bound, target, w, flags)?;
            tl2_sum = g.add(tl2_sum, tl2)?;
            tperc_sum = g.add(tperc_sum, tperc)?;
        }
        let inv = 1.0 / batch.targets.len() as f32;
        let tl2 = g.scale(tl2_sum, inv);
        let tperc = g.scale(tperc_sum, inv);
        l2 = g.add(l2, tl2)?;
        perc = g.add(perc, tperc)?;
    }

    let gg = g.add(geo, grad)?;
    let pp = g.add(l2, perc)?;
    let total = g.add(gg, pp)?;
    Ok(LossTerms { geo, grad, l2, perc, total })
}
