//! Plane-sweep depth refinement: render the student's cloud from a shifted
//! pose, match it against the input view, and compare depth error before and
//! after.
//!
//! Usage: cargo run --release --example refine_depth

use splatlab::autodiff::Tensor;
use splatlab::metrics::depth_metrics;
use splatlab::models::{
    refine_with_teacher, student_cloud, StudentField, StudentModel, TeacherOracle, TeacherVariant,
};
use splatlab::rasterizer::{render, RenderMode};
use splatlab::scenes::{generate_scene, render_ground_truth, sample_views};
use splatlab::trainer::{train, TrainConfig};

fn main() {
    let (w, h) = (48usize, 48usize);
    let scene = generate_scene(91);
    let teacher = TeacherOracle::from_seed(TeacherVariant::ScaledGt, 91);

    // photometric-only training leaves the depth readout noisy, which is the
    // regime where windowed plane-sweep matching helps
    let config = TrainConfig {
        iters: 600,
        lr_init: 2e-2,
        warmup_iters: 50,
        width: w,
        height: h,
        checkpoint_every: 600,
        flags: splatlab::losses::AblationFlags { no_teacher: true, ..Default::default() },
        ..Default::default()
    };
    let mut student = StudentModel::Field(StudentField::new(w, h));
    let mut extrap = splatlab::models::Extrapolator::new(9, 8, true);
    let out = std::path::Path::new("refine_depth_out");
    train(&config, &scene, &teacher, &mut student, &mut extrap, out).unwrap();

    let views = sample_views(&scene, config.seed, config.d_min, w, h).unwrap();
    let cam = views.context[0].clone();
    let gt = render_ground_truth(&scene, &cam);
    let image = Tensor::new(vec![h, w, 3], gt.image.clone());
    let cloud = student_cloud(&student, &image, &cam).unwrap();

    // unrefined: opacity-normalized expected depth from the student's cloud
    let depth_out = render(&cloud, &cam, RenderMode::Depth);
    let unrefined: Vec<f64> = depth_out
        .depth
        .as_ref()
        .unwrap()
        .iter()
        .zip(&depth_out.weight)
        .map(|(&d, &a)| if a > 1e-6 { d / a } else { 0.0 })
        .collect();

    let d_lo = gt.depth.iter().cloned().fold(f64::INFINITY, f64::min) * 0.8;
    let d_hi = gt.depth.iter().cloned().fold(0.0f64, f64::max) * 1.2;
    let refined = refine_with_teacher(&cloud, &gt.image, &cam, 0.5, d_lo, d_hi, 64).unwrap();

    let mask: Vec<bool> = unrefined.iter().map(|&d| d > 0.0).collect();
    let before = depth_metrics(&unrefined, &gt.depth, &mask, true).unwrap();
    let after = depth_metrics(&refined, &gt.depth, &mask, true).unwrap();
    println!("AbsRel unrefined {:.4} -> refined {:.4}", before.abs_rel, after.abs_rel);
    println!("delta1 unrefined {:.4} -> refined {:.4}", before.delta1, after.delta1);
}
