//! Evaluation-only measures: PSNR, SSIM, depth error statistics with optional
//! median scaling, ordinal pair accuracy, and the two-crop square protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplatError};

pub const PSNR_CAP: f64 = 99.0;
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Peak signal-to-noise ratio in dB for images in [0,1], capped at 99.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SplatError::InvalidInput("psnr shape mismatch".into()));
    }
    let mse: f64 =
        a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Standard SSIM: 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2 on
/// unit range, valid windows only, averaged over channels.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize, channels: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height * channels {
        return Err(SplatError::InvalidInput("ssim shape mismatch".into()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(SplatError::InvalidInput("image smaller than the SSIM window".into()));
    }
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    // Separable pass: blur rows then columns for the five moment maps.
    for ch in 0..channels {
        let plane = |src: &[f32], f: &dyn Fn(f64, f64) -> f64, other: &[f32]| -> Vec<f64> {
            let mut out = vec![0.0; width * height];
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(src[i * channels + ch] as f64, other[i * channels + ch] as f64);
            }
            out
        };
        let ia = plane(a, &|x, _| x, b);
        let ib = plane(b, &|x, _| x, a);
        let iaa = plane(a, &|x, _| x * x, b);
        let ibb = plane(b, &|x, _| x * x, a);
        let iab = plane(a, &|x, y| x * y, b);

        let blur = |src: &[f64]| -> Vec<f64> {
            // horizontal
            let mut tmp = vec![0.0; width * height];
            for y in 0..height {
                for x in half..width - half {
                    let mut acc = 0.0;
                    for k in 0..SSIM_WINDOW {
                        acc += win[k] * src[y * width + x + k - half];
                    }
                    tmp[y * width + x] = acc;
                }
            }
            // vertical
            let mut out = vec![0.0; width * height];
            for y in half..height - half {
                for x in half..width - half {
                    let mut acc = 0.0;
                    for k in 0..SSIM_WINDOW {
                        acc += win[k] * tmp[(y + k - half) * width + x];
                    }
                    out[y * width + x] = acc;
                }
            }
            out
        };

        let mu_a = blur(&ia);
        let mu_b = blur(&ib);
        let m_aa = blur(&iaa);
        let m_bb = blur(&ibb);
        let m_ab = blur(&iab);

        for y in half..height - half {
            for x in half..width - half {
                let i = y * width + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = m_aa[i] - ma * ma;
                let vb = m_bb[i] - mb * mb;
                let cov = m_ab[i] - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub delta1: f64,
    pub pixel_count: usize,
}

fn masked_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// AbsRel = mean |d_hat - d| / d; delta1 = fraction with max(d_hat/d, d/d_hat)
/// strictly below 1.25. With `median_scaling` each map is first divided by its
/// own masked median.
pub fn depth_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    median_scaling: bool,
) -> Result<DepthEvalResult> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(SplatError::InvalidInput("depth metric shape mismatch".into()));
    }
    let mut p: Vec<f64> = Vec::new();
    let mut g: Vec<f64> = Vec::new();
    for i in 0..pred.len() {
        if mask[i] {
            if gt[i] <= 0.0 || pred[i] <= 0.0 {
                return Err(SplatError::InvalidInput("non-positive depth under mask".into()));
            }
            p.push(pred[i]);
            g.push(gt[i]);
        }
    }
    if p.is_empty() {
        return Err(SplatError::InvalidInput("empty mask".into()));
    }
    if median_scaling {
        let mp = masked_median(&p);
        let mg = masked_median(&g);
        for v in p.iter_mut() {
            *v /= mp;
        }
        for v in g.iter_mut() {
            *v /= mg;
        }
    }
    let mut abs_rel = 0.0;
    let mut hits = 0usize;
    for (d_hat, d) in p.iter().zip(&g) {
        abs_rel += (d_hat - d).abs() / d;
        let ratio = (d_hat / d).max(d / d_hat);
        if ratio < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    Ok(DepthEvalResult {
        abs_rel: abs_rel / p.len() as f64,
        delta1: hits as f64 / p.len() as f64,
        pixel_count: p.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrdinalPair {
    pub ax: usize,
    pub ay: usize,
    pub bx: usize,
    pub by: usize,
    /// "a" or "b": which pixel is closer to the camera.
    pub closer: String,
}

/// Fraction of annotated pairs whose depth ordering the prediction matches.
/// Exact ties count as incorrect.
pub fn ordinal_accuracy(pred: &[f64], width: usize, pairs: &[OrdinalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SplatError::InvalidInput("empty ordinal pair list".into()));
    }
    let height = pred.len() / width;
    let mut correct = 0usize;
    for p in pairs {
        if p.ax >= width || p.bx >= width || p.ay >= height || p.by >= height {
            return Err(SplatError::InvalidInput("ordinal pair out of bounds".into()));
        }
        let da = pred[p.ay * width + p.ax];
        let db = pred[p.by * width + p.bx];
        let pred_closer = if da < db {
            "a"
        } else if db < da {
            "b"
        } else {
            // tie: matches neither label
            ""
        };
        if pred_closer == p.closer {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EvalCrop {
    pub image: Vec<f32>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub size: usize,
}

pub const CROP_SIZE: usize = 256;

fn resize_bilinear<T: Copy + Into<f64>>(
    src: &[T],
    sw: usize,
    sh: usize,
    channels: usize,
    dw: usize,
    dh: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; dw * dh * channels];
    for oy in 0..dh {
        let py = ((oy as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).max(0.0);
        let y0 = (py.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = py - y0 as f64;
        for ox in 0..dw {
            let px = ((ox as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).max(0.0);
            let x0 = (px.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fx = px - x0 as f64;
            for c in 0..channels {
                let v00: f64 = src[(y0 * sw + x0) * channels + c].into();
                let v01: f64 = src[(y0 * sw + x1) * channels + c].into();
                let v10: f64 = src[(y1 * sw + x0) * channels + c].into();
                let v11: f64 = src[(y1 * sw + x1) * channels + c].into();
                out[(oy * dw + ox) * channels + c] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

fn resize_nearest_mask(src: &[bool], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<bool> {
    let mut out = vec![false; dw * dh];
    for oy in 0..dh {
        let sy = (((oy as f64 + 0.5) * sh as f64 / dh as f64) as usize).min(sh - 1);
        for ox in 0..dw {
            let sx = (((ox as f64 + 0.5) * sw as f64 / dw as f64) as usize).min(sw - 1);
            out[oy * dw + ox] = src[sy * sw + sx];
        }
    }
    out
}

/// Two maximal square crops anchored at opposite ends of the long axis,
/// each resized to 256x256 (bilinear image/depth, nearest mask).
pub fn diode_crop_protocol(
    image: &[f32],
    depth: &[f64],
    mask: &[bool],
    width: usize,
    height: usize,
) -> Result<Vec<EvalCrop>> {
    if image.len() != width * height * 3 || depth.len() != width * height || mask.len() != depth.len()
    {
        return Err(SplatError::InvalidInput("crop protocol shape mismatch".into()));
    }
    let side = width.min(height);
    let anchors: [(usize, usize); 2] = if width >= height {
        [(0, 0), (width - side, 0)]
    } else {
        [(0, 0), (0, height - side)]
    };
    let mut crops = Vec::with_capacity(2);
    for (cx, cy) in anchors {
        let mut img = vec![0.0f32; side * side * 3];
        let mut dep = vec![0.0f64; side * side];
        let mut msk = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let s = (cy + y) * width + cx + x;
                let d = y * side + x;
                img[d * 3..d * 3 + 3].copy_from_slice(&image[s * 3..s * 3 + 3]);
                dep[d] = depth[s];
                msk[d] = mask[s];
            }
        }
        let image_r: Vec<f32> = resize_bilinear(&img, side, side, 3, CROP_SIZE, CROP_SIZE)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let depth_r = resize_bilinear(&dep, side, side, 1, CROP_SIZE, CROP_SIZE);
        let mask_r = resize_nearest_mask(&msk, side, side, CROP_SIZE, CROP_SIZE);
        crops.push(EvalCrop { image: image_r, depth: depth_r, mask: mask_r, size: CROP_SIZE });
    }
    Ok(crops)
}
