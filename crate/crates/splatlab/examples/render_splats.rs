//! Render a small hand-built Gaussian cloud in all three modes and check the
//! tiled rasterizer against the brute-force reference.
//!
//! Usage: cargo run --release --example render_splats

use nalgebra::{Vector3, Vector4};
use splatlab::geometry::{Camera, Pose};
use splatlab::scenes::default_intrinsics;
use splatlab::io::{save_pfm, save_png_gray, save_png_rgb};
use splatlab::rasterizer::{render, render_brute_force, RenderMode};
use splatlab::splat::Gaussian;

fn main() {
    let (w, h) = (128usize, 128usize);
    let camera = Camera::new(default_intrinsics(w, h), Pose::identity(), 0.5, 100.0).unwrap();

    let mut cloud = Vec::new();
    for i in 0..40 {
        let t = i as f64 / 40.0;
        let angle = t * std::f64::consts::TAU * 2.0;
        cloud.push(Gaussian {
            mu: Vector3::new(angle.cos() * (0.5 + t), angle.sin() * (0.5 + t), 4.0 + 3.0 * t),
            alpha: 0.85,
            scale: Vector3::new(0.12, 0.12, 0.12),
            rot: Vector4::new(1.0, 0.0, 0.0, 0.0),
            color: Vector3::new(t, 0.2 + 0.6 * (1.0 - t), 1.0 - t),
        });
    }

    let color = render(&cloud, &camera, RenderMode::Color);
    let weight = render(&cloud, &camera, RenderMode::Weight);
    let depth = render(&cloud, &camera, RenderMode::Depth);

    let reference = render_brute_force(&cloud, &camera, RenderMode::Color);
    let worst = color
        .color
        .as_ref()
        .unwrap()
        .iter()
        .zip(reference.color.as_ref().unwrap())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("tiled vs brute-force worst |diff|: {worst:.3e}");

    let rgb: Vec<f32> = color.color.unwrap().iter().map(|&v| v as f32).collect();
    let wgt: Vec<f32> = weight.weight.iter().map(|&v| v as f32).collect();
    // opacity-normalized expected depth
    let dep: Vec<f32> = depth
        .depth
        .unwrap()
        .iter()
        .zip(&depth.weight)
        .map(|(&d, &a)| if a > 1e-6 { (d / a) as f32 } else { 0.0 })
        .collect();

    let out = std::path::Path::new("render_splats_out");
    std::fs::create_dir_all(out).unwrap();
    save_png_rgb(&out.join("color.png"), w, h, &rgb).unwrap();
    save_png_gray(&out.join("weight.png"), w, h, &wgt).unwrap();
    save_pfm(&out.join("depth.pfm"), w, h, &dep).unwrap();
    println!("wrote color.png, weight.png, depth.pfm to {}", out.display());
}
