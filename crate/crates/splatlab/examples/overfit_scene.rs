//! Overfit the student on one synthetic scene with teacher supervision, then
//! report reconstruction quality on the context view.
//!
//! Usage: cargo run --release --example overfit_scene

use splatlab::autodiff::Tensor;
use splatlab::io::save_png_rgb;
use splatlab::metrics::psnr;
use splatlab::models::{
    student_cloud, Extrapolator, StudentField, StudentModel, TeacherOracle, TeacherVariant,
};
use splatlab::rasterizer::{render, RenderMode};
use splatlab::scenes::{generate_scene, render_ground_truth, sample_views};
use splatlab::trainer::{train, TrainConfig};

fn main() {
    let (w, h) = (24usize, 24usize);
    let scene = generate_scene(72);
    let teacher = TeacherOracle::from_seed(TeacherVariant::ScaledGt, 72);

    let config = TrainConfig {
        iters: 800,
        lr_init: 2e-2,
        warmup_iters: 50,
        width: w,
        height: h,
        checkpoint_every: 400,
        ..Default::default()
    };

    let mut student = StudentModel::Field(StudentField::new(w, h));
    let mut extrap = Extrapolator::new(7, 8, true);
    let out = std::path::Path::new("overfit_scene_out");
    let reports = train(&config, &scene, &teacher, &mut student, &mut extrap, out).unwrap();
    let last = reports.last().unwrap();
    println!("final losses: geo {:.4} grad {:.4} l2 {:.4} perc {:.4}", last.geo, last.grad, last.l2, last.perc);

    // render the context view back out and compare to ground truth
    let views = sample_views(&scene, config.seed, config.d_min, w, h).unwrap();
    let cam = views.context[0].clone();
    let gt = render_ground_truth(&scene, &cam);
    let image = Tensor::new(vec![h, w, 3], gt.image.clone());
    let cloud = student_cloud(&student, &image, &cam).unwrap();
    let rendered = render(&cloud, &cam, RenderMode::Color);
    let rgb: Vec<f32> = rendered.color.unwrap().iter().map(|&v| v as f32).collect();
    println!("context-view PSNR after {} iters: {:.2} dB", config.iters, psnr(&rgb, &gt.image).unwrap());

    save_png_rgb(&out.join("context_render.png"), w, h, &rgb).unwrap();
    println!("loss log, checkpoints, and context_render.png in {}", out.display());
}
