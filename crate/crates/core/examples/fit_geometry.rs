//! Stage I on a synthetic disk: the surfels start jittered, half
//! transparent and gray, and are fitted back under split-sum shading with
//! exact normal and depth priors.
//!
//! cargo run --release --example fit_geometry [iterations]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfel_pbr::config::Config;
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::metrics::psnr;
use surfel_pbr::model::{render_splitsum, LearnedLight, Model, Shading};
use surfel_pbr::optim::run_stage1;
use surfel_pbr::surfel::{Camera, Scene, Surfel};
use surfel_pbr::synth::{render_dataset, GroundTruth, ProceduralEnv};

fn main() {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mut cfg = Config::default();
    cfg.light.size = 16;
    cfg.stage1.iterations = iterations;
    cfg.stage1.log_every = 250;
    let shading = Shading::from_config(&cfg);
    let cube = ProceduralEnv::Sky.equirect(64, 32).to_cubemap(cfg.light.size);
    let env = shading.environment(cube.clone());

    let n = 12;
    let mut surfels = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let y = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            if x * x + y * y <= 1.0 {
                let s = 1.2 / n as f64;
                surfels.push(
                    Surfel::facing(V3::new(x, y, 0.0), V3::z(), s, s)
                        .with_material(Rgb::new(0.5 + 0.4 * x, 0.5 + 0.4 * y, 0.3), 0.0, 0.5)
                        .with_opacity(1.0),
                );
            }
        }
    }
    let truth = Scene::new(surfels);
    let cams: Vec<Camera> = (0..8)
        .map(|k| {
            let a = k as f64 / 8.0 * std::f64::consts::TAU;
            Camera::look_at(V3::new(0.3 * a.cos(), 0.3 * a.sin(), 3.0), V3::zeros(), V3::y(), 0.8, 32, 32)
        })
        .collect();
    let data = render_dataset(&truth, &env, &shading, &cams, GroundTruth::SplitSum, true).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut start = truth.clone();
    for s in &mut start.surfels {
        s.center += V3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
        s.albedo = Rgb::repeat(0.5);
        s.opacity = 0.5;
    }
    // The light is known here so the fit isolates geometry and albedo.
    let mut model = Model { scene: start, light: LearnedLight::from_cube(&cube), speccomp: None };
    let mean_psnr = |m: &Model| {
        let e = shading.environment(m.light.radiance());
        data.views.iter().map(|v| psnr(&render_splitsum(&m.scene, &e, &shading, &v.camera).image, &v.image)).sum::<f64>()
            / data.views.len() as f64
    };
    println!("PSNR before: {:.2} dB", mean_psnr(&model));
    let report = run_stage1(&mut model, &data, &cfg, &shading, None).unwrap();
    println!("loss {:.5} -> {:.5}", report.log[0].total, report.final_loss().unwrap());
    println!("PSNR after:  {:.2} dB", mean_psnr(&model));
}
