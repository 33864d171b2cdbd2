//! Optimization loop: Adam, cosine schedule with linear warmup, frame-distance
//! curriculum, JSONL loss logs, and periodic checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Result, SplatError};
use crate::io::{save_checkpoint, JsonlWriter};
use crate::losses::{total_loss, AblationFlags, LossReport, LossWeights, SceneBatch};
use crate::models::{Extrapolator, ParamModel, StudentModel, TeacherOracle};
use crate::scenes::{render_ground_truth, sample_views, SyntheticScene};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: u64,
    pub lr_init: f64,
    pub warmup_iters: u64,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub seed: u64,
    pub deterministic: bool,
    /// Curriculum frame distance, linear from d_min to d_max over training.
    pub d_min: f64,
    pub d_max: f64,
    pub width: usize,
    pub height: usize,
    /// Target views per iteration drawn from the sampled view set.
    pub targets_inside: usize,
    pub targets_outside: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            lr_init: 2e-4,
            warmup_iters: 200,
            weights: LossWeights::default(),
            flags: AblationFlags::default(),
            seed: 0,
            deterministic: false,
            d_min: 0.3,
            d_max: 0.6,
            width: 32,
            height: 32,
            targets_inside: 1,
            targets_outside: 3,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters <= self.warmup_iters {
            return Err(SplatError::Config("iters must exceed warmup_iters".into()));
        }
        if !(self.lr_init > 0.0) {
            return Err(SplatError::Config("lr_init must be > 0".into()));
        }
        if self.d_min < 0.0 || self.d_max < self.d_min {
            return Err(SplatError::Config("need 0 <= d_min <= d_max".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(SplatError::Config("checkpoint_every must be >= 1".into()));
        }
        self.weights.validate()?;
        self.flags.validate()
    }

    /// Curriculum frame distance at a step, linear d_min -> d_max.
    pub fn frame_distance_at(&self, step: u64) -> f64 {
        if self.iters <= 1 {
            return self.d_min;
        }
        let t = step as f64 / (self.iters - 1) as f64;
        self.d_min + (self.d_max - self.d_min) * t
    }
}

/// Linear warmup 0 -> lr_init over warmup_iters, then cosine decay to 0 at
/// iters; continuous at the warmup boundary.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let w = config.warmup_iters;
    if step < w {
        return config.lr_init * step as f64 / w as f64;
    }
    let span = (config.iters - w) as f64;
    let t = (step - w) as f64 / span;
    config.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Single-scalar Adam update in f64 (bias-corrected); shared by the
/// vectorized step and the closed-form oracle test.
pub fn adam_update_scalar(
    p: f64,
    g: f64,
    m: f64,
    v: f64,
    step: u64,
    lr: f64,
) -> (f64, f64, f64) {
    let m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
    let v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
    let mhat = m / (1.0 - ADAM_BETA1.powi(step as i32));
    let vhat = v / (1.0 - ADAM_BETA2.powi(step as i32));
    (p - lr * mhat / (vhat.sqrt() + ADAM_EPS), m, v)
}

/// Adam state over a flat list of parameter tensors; moments kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One step over all parameters. Any non-finite gradient skips the whole
    /// step (moments and counter untouched) and returns false.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(SplatError::InvalidInput("optimizer state shape mismatch".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(SplatError::InvalidInput("gradient shape mismatch".into()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                eprintln!("warning: non-finite gradient, skipping optimizer step");
                return Ok(false);
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (pv, gv)) in p.data.iter_mut().zip(g.iter()).enumerate() {
                let (np, nm, nv) = adam_update_scalar(
                    *pv as f64,
                    *gv as f64,
                    self.m[i][j],
                    self.v[i][j],
                    self.step,
                    lr,
                );
                *pv = np as f32;
                self.m[i][j] = nm;
                self.v[i][j] = nv;
            }
        }
        Ok(true)
    }
}

/// Checkpoint state for the full model pair, with namespaced tensor names.
pub fn checkpoint_state(student: &StudentModel, extrap: &Extrapolator) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (name, t) in student.state() {
        out.push((format!("student.{name}"), t));
    }
    for (name, t) in extrap.state() {
        out.push((format!("extrap.{name}"), t));
    }
    out
}

pub fn load_checkpoint_state(
    state: &[(String, Tensor)],
    student: &mut StudentModel,
    extrap: &mut Extrapolator,
) -> Result<()> {
    let strip = |prefix: &str| -> Vec<(String, Tensor)> {
        state
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    };
    student.load_state(&strip("student."))?;
    extrap.load_state(&strip("extrap."))
}

/// Assemble one training batch: context view 0 of the sampled set, teacher
/// centers for it, and the configured inside/outside target mix.
pub fn make_batch(
    scene: &SyntheticScene,
    teacher: &TeacherOracle,
    config: &TrainConfig,
    step: u64,
) -> Result<SceneBatch> {
    let fd = config.frame_distance_at(step);
    let views = sample_views(
        scene,
        config.seed.wrapping_add(step),
        fd,
        config.width,
        config.height,
    )?;
    let cam = views.context[0].clone();
    let gt = render_ground_truth(scene, &cam);
    let (h, w) = (config.height, config.width);

    let teacher_mu = if config.flags.no_teacher {
        None
    } else {
        let centers = teacher.teacher_centers(scene, std::slice::from_ref(&cam))?;
        Some(Tensor::new(
            vec![h, w, 3],
            centers[0].iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        ))
    };

    let mut targets = Vec::new();
    for i in 0..config.targets_inside {
        let tcam = views.targets_inside[i % views.targets_inside.len()].clone();
        let tg = render_ground_truth(scene, &tcam);
        targets.push((tcam, Tensor::new(vec![h, w, 3], tg.image)));
    }
    for i in 0..config.targets_outside {
        let tcam = views.targets_outside[i % views.targets_outside.len()].clone();
        let tg = render_ground_truth(scene, &tcam);
        targets.push((tcam, Tensor::new(vec![h, w, 3], tg.image)));
    }

    Ok(SceneBatch {
        context_image: Tensor::new(vec![h, w, 3], gt.image),
        context_camera: cam,
        teacher_mu,
        targets,
    })
}

fn apply_grads(
    g: &Graph,
    bound: &[crate::autodiff::Var],
    model: &mut dyn ParamModel,
    out: &mut Vec<Vec<f32>>,
) {
    for (var, p) in bound.iter().zip(model.params()) {
        match g.grad(*var) {
            Some(gr) => out.push(gr.to_vec()),
            None => out.push(vec![0.0; p.value.numel()]),
        }
    }
}

/// Full training loop. Writes `loss.jsonl` and `ckpt_{iter}.bin` /
/// `ckpt_final.bin` under `out_dir`, returns the per-iteration loss reports.
pub fn train(
    config: &TrainConfig,
    scene: &SyntheticScene,
    teacher: &TeacherOracle,
    student: &mut StudentModel,
    extrap: &mut Extrapolator,
    out_dir: &Path,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut log = JsonlWriter::create(&out_dir.join("loss.jsonl"))?;

    let shapes: Vec<usize> = student
        .params()
        .iter()
        .chain(extrap.params())
        .map(|p| p.value.numel())
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut reports = Vec::with_capacity(config.iters as usize);

    for step in 0..config.iters {
        let batch = make_batch(scene, teacher, config, step)?;
        let mut g = Graph::new();
        let sb = student.bind(&mut g);
        let eb = extrap.bind(&mut g);
        let terms = total_loss(
            &mut g,
            &batch,
            student,
            &sb,
            extrap,
            &eb,
            &config.weights,
            &config.flags,
        )?;
        let report = terms.report(&g, step);
        if !report.total.is_finite() {
            log.flush()?;
            return Err(SplatError::Numeric(format!(
                "non-finite loss at iter {step}: geo={} grad={} l2={} perc={}",
                report.geo, report.grad, report.l2, report.perc
            )));
        }
        g.backward(terms.total)?;

        let mut grads: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
        apply_grads(&g, &sb, student, &mut grads);
        apply_grads(&g, &eb, extrap, &mut grads);
        let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
        let mut param_refs: Vec<&mut Tensor> = student
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.value)
            .collect();
        // extrapolator params borrowed in a second pass to satisfy the borrow
        // checker: split the step into the two model halves
        let n_student = param_refs.len();
        adam_step_split(&mut adam, &mut param_refs, extrap, &grad_refs, n_student, lr_at(step, config))?;

        log.write(&report)?;
        reports.push(report);

        if (step + 1) % config.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{:06}.bin", step + 1));
            save_checkpoint(&path, &checkpoint_state(student, extrap))?;
        }
    }
    log.flush()?;
    save_checkpoint(&out_dir.join("ckpt_final.bin"), &checkpoint_state(student, extrap))?;
    Ok(reports)
}

fn adam_step_split(
    adam: &mut Adam,
    student_params: &mut [&mut Tensor],
    extrap: &mut Extrapolator,
    grads: &[&[f32]],
    n_student: usize,
    lr: f64,
) -> Result<()> {
    let mut all: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
    for p in student_params.iter_mut() {
        all.push(p);
    }
    for p in extrap.params_mut() {
        all.push(&mut p.value);
    }
    debug_assert_eq!(all.len() - n_student, grads.len() - n_student);
    adam.step(&mut all, grads, lr)?;
    Ok(())
}
