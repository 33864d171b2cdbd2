//! Minimal reverse-mode autodiff over dense f32 tensors.
//!
//! Eager tape: every operation executes immediately and records itself on the
//! owning [`Graph`]; `backward` replays the tape in reverse creation order,
//! which is a valid reverse topological order by construction. A Graph is
//! single-threaded; distinct graphs may run on distinct threads.

use crate::error::{Result, SplatError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation plugged into the tape from outside this module
/// (the rasterizer and the prediction-to-Gaussian lift use this).
pub trait CustomGrad: std::fmt::Debug {
    /// Given dL/d(output), return dL/d(input) for each declared input.
    fn backward(&self, upstream: &[f32]) -> Vec<Vec<f32>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a: [H,W,C] times w: [H,W,1], broadcast over channels.
    MulBcast(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    SqrtEps(Var),
    SqrtGuard(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    StopGradient,
    Reshape(Var),
    SliceChannels { input: Var, from: usize, to: usize },
    ConcatChannels(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    BilinearResize(Var),
    AvgPool2(Var),
    Sobel(Var),
    Grad3d(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomGrad> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    grads: Vec<Option<Vec<f32>>>,
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus32(x: f32) -> f32 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// erf via Abramowitz-Stegun 7.1.26; max absolute error ~1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (Gaussian CDF) GeLU.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * normal_cdf(x)) as f32
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    (normal_cdf(x) + x * normal_pdf(x)) as f32
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data[0]
    }

    /// Gradient buffer of a node after `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].value.shape != self.nodes[b.0].value.shape {
            return Err(SplatError::InvalidInput(format!(
                "shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].value.shape, self.nodes[b.0].value.shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data), Op::Mul(a, b), rg))
    }

    /// Elementwise product of an [H,W,C] tensor with an [H,W,1] map.
    pub fn mul_bcast(&mut self, a: Var, w: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sw = self.nodes[w.0].value.shape.clone();
        if sa.len() != 3 || sw != vec![sa[0], sa[1], 1] {
            return Err(SplatError::InvalidInput(format!(
                "mul_bcast expects [H,W,C] x [H,W,1], got {sa:?} x {sw:?}"
            )));
        }
        let c = sa[2];
        let mut data = Vec::with_capacity(self.nodes[a.0].value.numel());
        for (i, &wv) in self.nodes[w.0].value.data.iter().enumerate() {
            for ch in 0..c {
                data.push(self.nodes[a.0].value.data[i * c + ch] * wv);
            }
        }
        let rg = self.requires(a) || self.requires(w);
        Ok(self.push(Tensor::new(sa, data), Op::MulBcast(a, w), rg))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x * k).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::Scale(a, k), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().map(|&x| x as f64).sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s: f64 = self.nodes[a.0].value.data.iter().map(|&x| x as f64).sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::Abs(a), rg)
    }

    /// sqrt(x + 1e-12); the epsilon keeps the gradient finite at exact zero.
    pub fn sqrt_eps(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| (x + 1e-12).sqrt()).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::SqrtEps(a), rg)
    }

    /// Exact sqrt forward; the backward slope is clamped near zero so a
    /// perfect-match loss is exactly 0 without a NaN gradient.
    pub fn sqrt_guard(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.max(0.0).sqrt()).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::SqrtGuard(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| sigmoid32(x)).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| softplus32(x)).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::Softplus(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, data), Op::Gelu(a), rg)
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.numel() {
            return Err(SplatError::InvalidInput("reshape element count mismatch".into()));
        }
        let data = self.nodes[a.0].value.data.clone();
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(shape, data), Op::Reshape(a), rg))
    }

    /// Select channels [from, to) of the last dimension.
    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape.clone();
        let c = *shape.last().ok_or_else(|| SplatError::InvalidInput("rank-0 slice".into()))?;
        if from >= to || to > c {
            return Err(SplatError::InvalidInput("bad channel slice".into()));
        }
        let rows = self.nodes[a.0].value.numel() / c;
        let mut data = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].value.data[r * c + from..r * c + to]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = to - from;
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(out_shape, data), Op::SliceChannels { input: a, from, to }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sb = self.nodes[b.0].value.shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(SplatError::InvalidInput("concat_channels spatial dims differ".into()));
        }
        let (ca, cb) = (sa[2], sb[2]);
        let rows = sa[0] * sa[1];
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].value.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].value.data[r * cb..(r + 1) * cb]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![sa[0], sa[1], ca + cb], data),
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    /// 2D convolution, stride 1, zero padding (K-1)/2 (same spatial size).
    /// input [H,W,Cin], weight [Cout,Kh,Kw,Cin], bias [Cout].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].value.shape.clone();
        let sw = self.nodes[weight.0].value.shape.clone();
        let sb = self.nodes[bias.0].value.shape.clone();
        if si.len() != 3 || sw.len() != 4 || sw[3] != si[2] || sb != vec![sw[0]] {
            return Err(SplatError::InvalidInput(format!(
                "conv2d shapes: input {si:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        if sw[1] % 2 == 0 || sw[2] % 2 == 0 {
            return Err(SplatError::InvalidInput("conv2d needs odd kernel size".into()));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sw[0], sw[1], sw[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let x = &self.nodes[input.0].value.data;
        let wt = &self.nodes[weight.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0f32; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xb = (iy as usize * w + ix as usize) * cin;
                            let wb = ((co * kh + ky) * kw + kx) * cin;
                            for ci in 0..cin {
                                acc += x[xb + ci] * wt[wb + ci];
                            }
                        }
                    }
                    out[(oy * w + ox) * cout + co] = acc;
                }
            }
        }
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![h, w, cout], out),
            Op::Conv2d { input, weight, bias },
            rg,
        ))
    }

    /// Resize [H,W,C] to [out_h,out_w,C] with half-pixel-centered bilinear sampling.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 3 {
            return Err(SplatError::InvalidInput("bilinear_resize expects [H,W,C]".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let x = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; out_h * out_w * c];
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ((iy0, iy1, fy), (ix0, ix1, fx)) in
                    [(bilinear_axis(oy, out_h, h), bilinear_axis(ox, out_w, w))].iter().copied()
                {
                    for ch in 0..c {
                        let v00 = x[(iy0 * w + ix0) * c + ch];
                        let v01 = x[(iy0 * w + ix1) * c + ch];
                        let v10 = x[(iy1 * w + ix0) * c + ch];
                        let v11 = x[(iy1 * w + ix1) * c + ch];
                        out[(oy * out_w + ox) * c + ch] = v00 * (1.0 - fy) * (1.0 - fx)
                            + v01 * (1.0 - fy) * fx
                            + v10 * fy * (1.0 - fx)
                            + v11 * fy * fx;
                    }
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![out_h, out_w, c], out), Op::BilinearResize(a), rg))
    }

    /// 2x2 average pooling; requires even spatial dims.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(SplatError::InvalidInput("avg_pool2 expects even [H,W,C]".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let x = &self.nodes[a.0].value.data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x[((oy * 2 + dy) * w + ox * 2 + dx) * c + ch];
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = acc * 0.25;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![oh, ow, c], out), Op::AvgPool2(a), rg))
    }

    /// Per-channel Sobel gradients with zero padding: [H,W,C] -> [H,W,2C]
    /// (x-gradient then y-gradient for each channel).
    pub fn sobel(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 3 {
            return Err(SplatError::InvalidInput("sobel expects [H,W,C]".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let x = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; h * w * 2 * c];
        let sample = |ix: isize, iy: isize, ch: usize| -> f32 {
            if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                0.0
            } else {
                x[(iy as usize * w + ix as usize) * c + ch]
            }
        };
        for y in 0..h as isize {
            for xw in 0..w as isize {
                for ch in 0..c {
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for (dy, dx, kx, ky) in sobel_taps() {
                        let v = sample(xw + dx, y + dy, ch);
                        gx += v * kx;
                        gy += v * ky;
                    }
                    let base = ((y as usize) * w + xw as usize) * 2 * c;
                    out[base + ch] = gx;
                    out[base + c + ch] = gy;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![h, w, 2 * c], out), Op::Sobel(a), rg))
    }

    /// 3D local-structure map: channel 0 is the Euclidean distance to the
    /// next-row neighbor, channel 1 to the next-column neighbor.
    /// [H,W,3] -> [H-1,W-1,2].
    pub fn grad3d(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 3 || s[2] != 3 || s[0] < 2 || s[1] < 2 {
            return Err(SplatError::InvalidInput("grad3d expects [H>=2,W>=2,3]".into()));
        }
        let (h, w) = (s[0], s[1]);
        let x = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; (h - 1) * (w - 1) * 2];
        for y in 0..h - 1 {
            for xw in 0..w - 1 {
                let p = (y * w + xw) * 3;
                let pr = ((y + 1) * w + xw) * 3;
                let pc = (y * w + xw + 1) * 3;
                let dr: f32 = (0..3).map(|k| (x[pr + k] - x[p + k]).powi(2)).sum::<f32>().sqrt();
                let dc: f32 = (0..3).map(|k| (x[pc + k] - x[p + k]).powi(2)).sum::<f32>().sqrt();
                out[(y * (w - 1) + xw) * 2] = dr;
                out[(y * (w - 1) + xw) * 2 + 1] = dc;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![h - 1, w - 1, 2], out), Op::Grad3d(a), rg))
    }

    /// Install an externally differentiated node (e.g. the rasterizer).
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomGrad>) -> Var {
        let rg = inputs.iter().any(|&v| self.requires(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse-mode sweep from a scalar loss. Populates gradients of every
    /// node reachable from the loss that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(SplatError::Contract("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SplatError::InvalidInput("backward needs a scalar loss".into()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, node: usize, g: &[f32]) -> Result<()> {
        // Borrow dance: compute input deltas from immutable state, then accumulate.
        let op = std::mem::replace(&mut self.nodes[node].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f32> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f32> =
                    g.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x * y).collect();
                let db: Vec<f32> =
                    g.iter().zip(&self.nodes[a.0].value.data).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MulBcast(a, wv) => {
                let c = self.nodes[a.0].value.shape[2];
                let wdata = &self.nodes[wv.0].value.data;
                let adata = &self.nodes[a.0].value.data;
                let mut da = vec![0.0f32; adata.len()];
                let mut dw = vec![0.0f32; wdata.len()];
                for i in 0..wdata.len() {
                    for ch in 0..c {
                        da[i * c + ch] = g[i * c + ch] * wdata[i];
                        dw[i] += g[i * c + ch] * adata[i * c + ch];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*wv, &dw);
            }
            Op::Scale(a, k) => {
                let da: Vec<f32> = g.iter().map(|x| x * k).collect();
                self.accumulate(*a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                self.accumulate(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0] / n as f32; n];
                self.accumulate(*a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, &x)| if x >= 0.0 { *gv } else { -gv })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::SqrtEps(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, &x)| gv * 0.5 / (x + 1e-12).sqrt())
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::SqrtGuard(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[node].value.data)
                    .map(|(gv, &s)| gv * 0.5 / s.max(1e-6))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[node].value.data)
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, &x)| gv * sigmoid32(x))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::StopGradient => {}
            Op::Reshape(a) => self.accumulate(*a, g),
            Op::SliceChannels { input, from, to } => {
                let c = *self.nodes[input.0].value.shape.last().unwrap();
                let rows = self.nodes[input.0].value.numel() / c;
                let span = to - from;
                let mut da = vec![0.0f32; rows * c];
                for r in 0..rows {
                    for k in 0..span {
                        da[r * c + from + k] = g[r * span + k];
                    }
                }
                self.accumulate(*input, &da);
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a.0].value.shape[2];
                let cb = self.nodes[b.0].value.shape[2];
                let rows = self.nodes[a.0].value.numel() / ca;
                let mut da = vec![0.0f32; rows * ca];
                let mut db = vec![0.0f32; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    db[r * cb..(r + 1) * cb]
                        .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Conv2d { input, weight, bias } => {
                let si = &self.nodes[input.0].value.shape;
                let sw = &self.nodes[weight.0].value.shape;
                let (h, w, cin) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sw[0], sw[1], sw[2]);
                let (ph, pw) = (kh / 2, kw / 2);
                let x = &self.nodes[input.0].value.data;
                let wt = &self.nodes[weight.0].value.data;
                let mut dx = vec![0.0f32; x.len()];
                let mut dwt = vec![0.0f32; wt.len()];
                let mut db = vec![0.0f32; cout];
                for oy in 0..h {
                    for ox in 0..w {
                        for co in 0..cout {
                            let gv = g[(oy * w + ox) * cout + co];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ky in 0..kh {
                                let iy = oy as isize + ky as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox as isize + kx as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xb = (iy as usize * w + ix as usize) * cin;
                                    let wb = ((co * kh + ky) * kw + kx) * cin;
                                    for ci in 0..cin {
                                        dx[xb + ci] += gv * wt[wb + ci];
                                        dwt[wb + ci] += gv * x[xb + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*input, &dx);
                self.accumulate(*weight, &dwt);
                self.accumulate(*bias, &db);
            }
            Op::BilinearResize(a) => {
                let s = &self.nodes[a.0].value.shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let os = &self.nodes[node].value.shape;
                let (oh, ow) = (os[0], os[1]);
                let mut da = vec![0.0f32; h * w * c];
                for oy in 0..oh {
                    let (iy0, iy1, fy) = bilinear_axis(oy, oh, h);
                    for ox in 0..ow {
                        let (ix0, ix1, fx) = bilinear_axis(ox, ow, w);
                        for ch in 0..c {
                            let gv = g[(oy * ow + ox) * c + ch];
                            da[(iy0 * w + ix0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                            da[(iy0 * w + ix1) * c + ch] += gv * (1.0 - fy) * fx;
                            da[(iy1 * w + ix0) * c + ch] += gv * fy * (1.0 - fx);
                            da[(iy1 * w + ix1) * c + ch] += gv * fy * fx;
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::AvgPool2(a) => {
                let s = &self.nodes[a.0].value.shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut da = vec![0.0f32; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let gv = g[(oy * ow + ox) * c + ch] * 0.25;
                            for dy in 0..2 {
                                for dx2 in 0..2 {
                                    da[((oy * 2 + dy) * w + ox * 2 + dx2) * c + ch] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Sobel(a) => {
                let s = &self.nodes[a.0].value.shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut da = vec![0.0f32; h * w * c];
                for y in 0..h as isize {
                    for xw in 0..w as isize {
                        for ch in 0..c {
                            let base = ((y as usize) * w + xw as usize) * 2 * c;
                            let ggx = g[base + ch];
                            let ggy = g[base + c + ch];
                            for (dy, dx, kx, ky) in sobel_taps() {
                                let iy = y + dy;
                                let ix = xw + dx;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                da[(iy as usize * w + ix as usize) * c + ch] +=
                                    ggx * kx + ggy * ky;
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Grad3d(a) => {
                let s = &self.nodes[a.0].value.shape;
                let (h, w) = (s[0], s[1]);
                let x = &self.nodes[a.0].value.data;
                let out = &self.nodes[node].value.data;
                let mut da = vec![0.0f32; h * w * 3];
                for y in 0..h - 1 {
                    for xw in 0..w - 1 {
                        let p = (y * w + xw) * 3;
                        let pr = ((y + 1) * w + xw) * 3;
                        let pc = (y * w + xw + 1) * 3;
                        let o = (y * (w - 1) + xw) * 2;
                        let dr = out[o];
                        let dc = out[o + 1];
                        if dr > 1e-12 {
                            let gv = g[o] / dr;
                            for k in 0..3 {
                                let diff = x[pr + k] - x[p + k];
                                da[pr + k] += gv * diff;
                                da[p + k] -= gv * diff;
                            }
                        }
                        if dc > 1e-12 {
                            let gv = g[o + 1] / dc;
                            for k in 0..3 {
                                let diff = x[pc + k] - x[p + k];
                                da[pc + k] += gv * diff;
                                da[p + k] -= gv * diff;
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Custom { inputs, op } => {
                let deltas = op.backward(g);
                assert_eq!(deltas.len(), inputs.len());
                for (v, d) in inputs.iter().zip(deltas.iter()) {
                    self.accumulate(*v, d);
                }
            }
        }
        self.nodes[node].op = op;
        Ok(())
    }
}

fn bilinear_axis(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let pos = (o as f32 + 0.5) * scale - 0.5;
    let p0 = pos.floor();
    let f = pos - p0;
    let i0 = (p0 as isize).clamp(0, in_len as isize - 1) as usize;
    let i1 = (p0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
    (i0, i1, f)
}

/// (dy, dx, x-kernel tap, y-kernel tap) for the 3x3 Sobel operators.
fn sobel_taps() -> [(isize, isize, f32, f32); 9] {
    [
        (-1, -1, -1.0, -1.0),
        (-1, 0, 0.0, -2.0),
        (-1, 1, 1.0, -1.0),
        (0, -1, -2.0, 0.0),
        (0, 0, 0.0, 0.0),
        (0, 1, 2.0, 0.0),
        (1, -1, -1.0, 1.0),
        (1, 0, 0.0, 2.0),
        (1, 1, 1.0, 1.0),
    ]
}
