//! The whole pipeline on the toy scene, on disk: render a dataset with
//! priors, fit geometry, materials and compensation, then evaluate and relight.
//! Everything is written under the output directory.
//!
//! cargo run --release --example toy_pipeline [out_dir]

use std::path::PathBuf;

use surfel_pbr::cli::evaluate;
use surfel_pbr::config::Config;
use surfel_pbr::dataset::{load_dataset, write_dataset};
use surfel_pbr::image_io::save_png;
use surfel_pbr::math::V3;
use surfel_pbr::model::{save_checkpoint, Model, Shading};
use surfel_pbr::optim::{fit, relight};
use surfel_pbr::synth::{orbit_cameras, render_dataset, toy_scene, GroundTruth, ProceduralEnv};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_pipeline".into()));
    let mut cfg = Config::default();
    cfg.light.size = 16;
    cfg.init.surfels = 1500;
    cfg.init.radius = 0.6;
    cfg.stage1.iterations = 600;
    cfg.stage2.iterations = 150;
    cfg.stage2.n_rays = 1 << 13;
    cfg.stage2.n_r = 16;
    cfg.speccomp.iterations = 150;
    cfg.speccomp.grid_width = 64;
    cfg.speccomp.grid_height = 32;
    cfg.speccomp.grid_levels = 4;
    cfg.speccomp.pixels = 256;
    cfg.speccomp.n_r = 16;
    cfg.relight.n_d = 32;
    cfg.relight.n_s = 32;
    let shading = Shading::from_config(&cfg);

    let env = shading.environment(ProceduralEnv::Sky.equirect(64, 32).to_cubemap(cfg.light.size));
    let cams = orbit_cameras(8, V3::zeros(), 2.5, 0.3, 0.6, 48, 48);
    let ds = render_dataset(&toy_scene(2000), &env, &shading, &cams, GroundTruth::SplitSum, true).unwrap();
    write_dataset(&out.join("data"), &ds, "pfm").unwrap();
    let data = load_dataset(&out.join("data")).unwrap();

    let mut model = Model::initial(&cfg).unwrap();
    let reports = fit(&mut model, &data, &cfg, &shading, Some(&out)).unwrap();
    for (name, r) in ["stage I", "stage II", "compensation"].iter().zip(&reports) {
        println!("{name}: {} iterations, final loss {:.5}", r.log.len(), r.final_loss().unwrap_or(f64::NAN));
    }
    save_checkpoint(&model, &out.join("final.ckpt")).unwrap();
    let metrics = evaluate(&model, &data, &cfg, &shading).unwrap();
    println!("{}", serde_json::to_string_pretty(&metrics).unwrap());

    let studio = shading.environment(ProceduralEnv::Studio.equirect(64, 32).to_cubemap(cfg.light.size));
    for (k, img) in relight(&model, &studio, &shading, &cams[..2], &cfg).unwrap().iter().enumerate() {
        save_png(img, &out.join(format!("relight_{k}.png"))).unwrap();
    }
    println!("outputs in {}", out.display());
}
