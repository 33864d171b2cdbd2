//! Operator commands: scene generation, training, rendering, evaluation, and
//! teacher-refined depth. Every command writes a RunManifest before any other
//! output; exit codes are 0 success, 2 config error, 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Result, SplatError};
use crate::geometry::Camera;
use crate::io::{load_checkpoint, save_pfm, save_png_gray, save_png_rgb, JsonlWriter};
use crate::losses::compose;
use crate::metrics::{depth_metrics, ordinal_accuracy, psnr, ssim, OrdinalPair};
use crate::models::{
    student_cloud, refine_with_teacher, Extrapolator, ParamModel, StudentConvNet, StudentField,
    StudentModel, TeacherOracle, TeacherVariant,
};
use crate::rasterizer::{render, RenderMode};
use crate::scenes::{generate_scene, render_ground_truth, sample_views, SceneFile, SyntheticScene};
use crate::trainer::{load_checkpoint_state, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "splatlab", version, about = "Differentiable Gaussian splatting at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalProtocol {
    Extrapolation,
    Depth,
    Ordinal,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with ground-truth renders and depth.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0.5)]
        frame_distance: f64,
    },
    /// Train the student + extrapolator on one synthetic scene.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Scene JSON; generated from the config seed when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Student architecture: per-pixel field or conv net.
        #[arg(long, default_value = "field")]
        student: String,
        #[arg(long)]
        no_teacher: bool,
        #[arg(long)]
        no_grad_match: bool,
        #[arg(long = "no-extrapolator")]
        no_extrapolator: bool,
        #[arg(long)]
        no_composition: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Render one camera of a scene from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera_index: usize,
        #[arg(long, default_value = "render_out")]
        out: PathBuf,
        /// Also write a grayscale W preview PNG.
        #[arg(long)]
        show_weight: bool,
        /// Also write a normalized depth preview PNG.
        #[arg(long)]
        show_depth: bool,
    },
    /// Evaluate a checkpoint over a directory of scene JSON files.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_enum)]
        protocol: EvalProtocol,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
    },
    /// Plane-sweep depth refinement against a virtually shifted view.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        shift: f64,
        #[arg(long, default_value = "refine_out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub version: String,
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}

fn manifest(command: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config: config.map(|p| p.display().to_string()),
        seed,
        out_dir: out.display().to_string(),
        version: format!("splatlab-{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Cap rayon workers from SPLATLAB_THREADS; ignored once a pool exists.
pub fn init_threads() {
    if let Ok(v) = std::env::var("SPLATLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

pub fn exit_code(err: &SplatError) -> i32 {
    match err {
        SplatError::Numeric(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { seed, out, width, height, frame_distance } => {
            gen_scene(seed, &out, width, height, frame_distance)
        }
        Command::Train {
            config,
            out,
            scene,
            student,
            no_teacher,
            no_grad_match,
            no_extrapolator,
            no_composition,
            deterministic,
        } => {
            let raw = std::fs::read_to_string(&config)?;
            let mut cfg: TrainConfig =
                serde_json::from_str(&raw).map_err(|e| SplatError::Config(e.to_string()))?;
            cfg.flags.no_teacher |= no_teacher;
            cfg.flags.no_grad_match |= no_grad_match;
            cfg.flags.no_extrapolation |= no_extrapolator;
            cfg.flags.no_composition |= no_composition;
            cfg.deterministic |= deterministic;
            cmd_train(&cfg, &config, scene.as_deref(), &student, &out)
        }
        Command::Render { ckpt, scene, camera_index, out, show_weight, show_depth } => {
            cmd_render(&ckpt, &scene, camera_index, &out, show_weight, show_depth)
        }
        Command::Eval { ckpt, scenes, protocol, out } => cmd_eval(&ckpt, &scenes, protocol, &out),
        Command::Refine { ckpt, scene, shift, out } => cmd_refine(&ckpt, &scene, shift, &out),
    }
}

/// Parse args, honor SPLATLAB_THREADS, map errors to exit codes.
pub fn main_entry() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_scene_file(path: &Path) -> Result<SceneFile> {
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| SplatError::Config(format!("{}: {e}", path.display())))
}

fn gen_scene(seed: u64, out: &Path, width: usize, height: usize, frame_distance: f64) -> Result<()> {
    manifest("gen-scene", None, Some(seed), out).write(out)?;
    let scene = generate_scene(seed);
    let views = sample_views(&scene, seed, frame_distance, width, height)?;
    let mut cameras = views.context.clone();
    cameras.extend(views.targets_inside.iter().cloned());
    cameras.extend(views.targets_outside.iter().cloned());
    scene.validate(&views.context)?;

    let file = SceneFile::from_scene(&scene, &cameras);
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(out.join("scene.json"), json + "\n")?;

    for (i, cam) in cameras.iter().enumerate() {
        let gt = render_ground_truth(&scene, cam);
        save_png_rgb(&out.join(format!("view_{i:02}.png")), width, height, &gt.image)?;
        let depth: Vec<f32> = gt.depth.iter().map(|&d| d as f32).collect();
        save_pfm(&out.join(format!("depth_{i:02}.pfm")), width, height, &depth)?;
    }
    Ok(())
}

fn cmd_train(
    cfg: &TrainConfig,
    cfg_path: &Path,
    scene_path: Option<&Path>,
    student_kind: &str,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    manifest("train", Some(cfg_path), Some(cfg.seed), out).write(out)?;
    let scene = match scene_path {
        Some(p) => load_scene_file(p)?.scene(),
        None => generate_scene(cfg.seed),
    };
    let mut student = match student_kind {
        "field" => StudentModel::Field(StudentField::new(cfg.width, cfg.height)),
        "convnet" => StudentModel::ConvNet(StudentConvNet::new(cfg.seed, 8)),
        other => return Err(SplatError::Config(format!("unknown student '{other}'"))),
    };
    let mut extrap = Extrapolator::new(cfg.seed ^ 0xe77a, 8, true);
    let teacher = TeacherOracle::from_seed(TeacherVariant::ScaledGt, cfg.seed);
    train(cfg, &scene, &teacher, &mut student, &mut extrap, out)?;
    Ok(())
}

/// Rebuild the model pair from checkpoint tensor names and shapes.
pub fn models_from_checkpoint(path: &Path) -> Result<(StudentModel, Extrapolator)> {
    let state = load_checkpoint(path)?;
    let find = |name: &str| state.iter().find(|(n, _)| n == name).map(|(_, t)| t);

    let mut student = if let Some(raw) = find("student.field.raw") {
        if raw.shape.len() != 3 {
            return Err(SplatError::Config("malformed field checkpoint".into()));
        }
        StudentModel::Field(StudentField::new(raw.shape[1], raw.shape[0]))
    } else if let Some(w0) = find("student.backbone.0.w") {
        StudentModel::ConvNet(StudentConvNet::new(0, w0.shape[0]))
    } else {
        return Err(SplatError::Config("checkpoint holds no student parameters".into()));
    };
    let fill0 = find("extrap.fill.0.w")
        .ok_or_else(|| SplatError::Config("checkpoint holds no extrapolator".into()))?;
    let mut extrap = Extrapolator::new(0, fill0.shape[0], fill0.shape[3] == 4);
    load_checkpoint_state(&state, &mut student, &mut extrap)?;
    Ok((student, extrap))
}

/// Inference for one target view: raw render, confidence W, composed image.
pub struct ViewOutputs {
    pub raw: Vec<f32>,
    pub weight: Vec<f32>,
    pub composed: Vec<f32>,
    /// Opacity-normalized expected depth; 0 where nothing was hit.
    pub depth: Vec<f64>,
}

pub fn render_view(
    student: &StudentModel,
    extrap: &Extrapolator,
    context_image: &Tensor,
    context_camera: &Camera,
    target: &Camera,
) -> Result<ViewOutputs> {
    let cloud = student_cloud(student, context_image, context_camera)?;
    let color_out = render(&cloud, target, RenderMode::Color);
    let depth_out = render(&cloud, target, RenderMode::Depth);
    let (h, w) = (target.height(), target.width());
    let raw: Vec<f32> = color_out.color.as_ref().unwrap().iter().map(|&v| v as f32).collect();
    let weight: Vec<f32> = color_out.weight.iter().map(|&v| v as f32).collect();
    let depth: Vec<f64> = depth_out
        .depth
        .as_ref()
        .unwrap()
        .iter()
        .zip(&depth_out.weight)
        .map(|(&d, &a)| if a > 1e-6 { d / a } else { 0.0 })
        .collect();

    let mut g = Graph::new();
    let rendered = g.constant(Tensor::new(vec![h, w, 3], raw.clone()));
    let wvar = g.constant(Tensor::new(vec![h, w, 1], weight.clone()));
    let bound = extrap.bind(&mut g);
    let filled = extrap.forward(&mut g, &bound, rendered, wvar)?;
    let composed = compose(&mut g, rendered, filled, wvar)?;
    Ok(ViewOutputs { raw, weight, composed: g.value(composed).data.clone(), depth })
}

fn cmd_render(
    ckpt: &Path,
    scene_path: &Path,
    camera_index: usize,
    out: &Path,
    show_weight: bool,
    show_depth: bool,
) -> Result<()> {
    manifest("render", None, None, out).write(out)?;
    let file = load_scene_file(scene_path)?;
    let cameras = file.cameras()?;
    if cameras.is_empty() {
        return Err(SplatError::Config("scene file has no cameras".into()));
    }
    if camera_index >= cameras.len() {
        return Err(SplatError::Config(format!(
            "camera index {camera_index} out of range 0..{}",
            cameras.len()
        )));
    }
    let (student, extrap) = models_from_checkpoint(ckpt)?;
    let scene = file.scene();
    let context = &cameras[0];
    let gt = render_ground_truth(&scene, context);
    let (h, w) = (context.height(), context.width());
    let image = Tensor::new(vec![h, w, 3], gt.image);
    let target = &cameras[camera_index];
    let v = render_view(&student, &extrap, &image, context, target)?;

    let (tw, th) = (target.width(), target.height());
    save_png_rgb(&out.join("composed.png"), tw, th, &v.composed)?;
    save_png_rgb(&out.join("raw.png"), tw, th, &v.raw)?;
    save_pfm(&out.join("weight.pfm"), tw, th, &v.weight)?;
    let mask: Vec<f32> = v.weight.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
    save_png_gray(&out.join("weight_mask.png"), tw, th, &mask)?;
    let depth32: Vec<f32> = v.depth.iter().map(|&d| d as f32).collect();
    save_pfm(&out.join("depth.pfm"), tw, th, &depth32)?;

    if show_weight {
        save_png_gray(&out.join("weight.png"), tw, th, &v.weight)?;
    }
    if show_depth {
        let max = v.depth.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
        let norm: Vec<f32> = v.depth.iter().map(|&d| (d / max) as f32).collect();
        save_png_gray(&out.join("depth.png"), tw, th, &norm)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub view_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordinal_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub protocol: String,
    pub records: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordinal_acc: Option<f64>,
}

fn depth_eval(
    pred: &[f64],
    gt: &[f64],
) -> Result<crate::metrics::DepthEvalResult> {
    let mask: Vec<bool> = pred.iter().map(|&d| d > 0.0).collect();
    if !mask.iter().any(|&m| m) {
        return Err(SplatError::Numeric("prediction covers no pixels".into()));
    }
    depth_metrics(pred, gt, &mask, true)
}

fn eval_scene(
    file: &SceneFile,
    scene: &SyntheticScene,
    student: &StudentModel,
    extrap: &Extrapolator,
    protocol: EvalProtocol,
) -> Result<Vec<EvalRecord>> {
    let cameras = file.cameras()?;
    let context = cameras
        .first()
        .ok_or_else(|| SplatError::Config("scene file has no cameras".into()))?;
    let (h, w) = (context.height(), context.width());
    let gt_ctx = render_ground_truth(scene, context);
    let image = Tensor::new(vec![h, w, 3], gt_ctx.image.clone());
    let mut records = Vec::new();

    match protocol {
        EvalProtocol::Extrapolation => {
            // one inside + two outside targets per scene
            let views = sample_views(scene, file.seed, 0.5, w, h)?;
            let targets: Vec<(&str, &Camera)> = views
                .targets_inside
                .iter()
                .map(|c| ("inside", c))
                .chain(views.targets_outside.iter().map(|c| ("outside", c)))
                .collect();
            for (i, (kind, target)) in targets.iter().enumerate() {
                let gt = render_ground_truth(scene, target);
                let v = render_view(student, extrap, &image, context, target)?;
                let de = depth_eval(&v.depth, &gt.depth)?;
                records.push(EvalRecord {
                    view_id: format!("scene{}_{kind}_{i}", file.seed),
                    psnr: psnr(&v.composed, &gt.image)?,
                    ssim: ssim(&v.composed, &gt.image, w, h, 3)?,
                    abs_rel: de.abs_rel,
                    delta1: de.delta1,
                    ordinal_acc: None,
                });
            }
        }
        EvalProtocol::Depth => {
            let v = render_view(student, extrap, &image, context, context)?;
            let de = depth_eval(&v.depth, &gt_ctx.depth)?;
            records.push(EvalRecord {
                view_id: format!("scene{}_context", file.seed),
                psnr: psnr(&v.raw, &gt_ctx.image)?,
                ssim: ssim(&v.raw, &gt_ctx.image, w, h, 3)?,
                abs_rel: de.abs_rel,
                delta1: de.delta1,
                ordinal_acc: None,
            });
        }
        EvalProtocol::Ordinal => {
            let v = render_view(student, extrap, &image, context, context)?;
            let pairs = synth_ordinal_pairs(&gt_ctx.depth, w, h, file.seed, 100);
            let de = depth_eval(&v.depth, &gt_ctx.depth)?;
            records.push(EvalRecord {
                view_id: format!("scene{}_context", file.seed),
                psnr: psnr(&v.raw, &gt_ctx.image)?,
                ssim: ssim(&v.raw, &gt_ctx.image, w, h, 3)?,
                abs_rel: de.abs_rel,
                delta1: de.delta1,
                ordinal_acc: Some(ordinal_accuracy(&v.depth, w, &pairs)?),
            });
        }
    }
    Ok(records)
}

/// Deterministic ordinal pairs labeled from ground-truth depth; pixels with
/// near-equal depth are skipped so every label is strict.
pub fn synth_ordinal_pairs(
    gt_depth: &[f64],
    width: usize,
    height: usize,
    seed: u64,
    count: usize,
) -> Vec<OrdinalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dda);
    let mut pairs = Vec::with_capacity(count);
    let mut tries = 0;
    while pairs.len() < count && tries < count * 50 {
        tries += 1;
        let (ax, ay) = (rng.gen_range(0..width), rng.gen_range(0..height));
        let (bx, by) = (rng.gen_range(0..width), rng.gen_range(0..height));
        let da = gt_depth[ay * width + ax];
        let db = gt_depth[by * width + bx];
        if (da - db).abs() < 0.05 * da.min(db) {
            continue;
        }
        let closer = if da < db { "a" } else { "b" };
        pairs.push(OrdinalPair { ax, ay, bx, by, closer: closer.to_string() });
    }
    pairs
}

fn cmd_eval(ckpt: &Path, scenes: &Path, protocol: EvalProtocol, out: &Path) -> Result<()> {
    manifest("eval", None, None, out).write(out)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(scenes)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "json") == Some(true)
                && p.file_name().map(|n| n != "manifest.json") == Some(true)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SplatError::Config(format!("no scene JSON in {}", scenes.display())));
    }
    let (student, extrap) = models_from_checkpoint(ckpt)?;
    let mut log = JsonlWriter::create(&out.join("metrics.jsonl"))?;
    let mut all = Vec::new();
    for path in &paths {
        let file = load_scene_file(path)?;
        let scene = file.scene();
        for rec in eval_scene(&file, &scene, &student, &extrap, protocol)? {
            log.write(&rec)?;
            all.push(rec);
        }
    }
    log.flush()?;

    let n = all.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / n;
    let ord: Vec<f64> = all.iter().filter_map(|r| r.ordinal_acc).collect();
    let summary = EvalSummary {
        protocol: format!("{protocol:?}").to_lowercase(),
        records: all.len(),
        psnr: mean(&|r| r.psnr),
        ssim: mean(&|r| r.ssim),
        abs_rel: mean(&|r| r.abs_rel),
        delta1: mean(&|r| r.delta1),
        ordinal_acc: if ord.is_empty() {
            None
        } else {
            Some(ord.iter().sum::<f64>() / ord.len() as f64)
        },
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out.join("summary.json"), json + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineReport {
    pub shift: f64,
    pub before: crate::metrics::DepthEvalResult,
    pub after: crate::metrics::DepthEvalResult,
}

fn cmd_refine(ckpt: &Path, scene_path: &Path, shift: f64, out: &Path) -> Result<()> {
    if shift == 0.0 {
        return Err(SplatError::Config("refine needs a non-zero shift".into()));
    }
    manifest("refine", None, None, out).write(out)?;
    let file = load_scene_file(scene_path)?;
    let scene = file.scene();
    let cameras = file.cameras()?;
    let context = cameras
        .first()
        .ok_or_else(|| SplatError::Config("scene file has no cameras".into()))?;
    let (h, w) = (context.height(), context.width());
    let gt = render_ground_truth(&scene, context);
    let image = Tensor::new(vec![h, w, 3], gt.image.clone());
    let (student, extrap) = models_from_checkpoint(ckpt)?;

    let v = render_view(&student, &extrap, &image, context, context)?;
    let before = depth_eval(&v.depth, &gt.depth)?;

    let cloud = student_cloud(&student, &image, context)?;
    let d_lo = gt.depth.iter().cloned().fold(f64::INFINITY, f64::min) * 0.5;
    let d_hi = gt.depth.iter().cloned().fold(0.0f64, f64::max) * 1.5;
    let refined = refine_with_teacher(&cloud, &gt.image, context, shift, d_lo, d_hi, 96)?;
    let mask: Vec<bool> = refined.iter().map(|&d| d > 0.0).collect();
    let after = depth_metrics(&refined, &gt.depth, &mask, true)?;

    let before32: Vec<f32> = v.depth.iter().map(|&d| d as f32).collect();
    let after32: Vec<f32> = refined.iter().map(|&d| d as f32).collect();
    save_pfm(&out.join("depth_before.pfm"), w, h, &before32)?;
    save_pfm(&out.join("depth_after.pfm"), w, h, &after32)?;
    let report = RefineReport { shift, before, after };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out.join("refine.json"), json + "\n")?;
    Ok(())
}
