//! Closed-loop Stage II: a glossy red metal sphere rendered with 2048
//! samples per pixel, materials perturbed by up to 0.3, then recovered with
//! the Monte Carlo estimator and relit under a different environment.
//!
//! cargo run --release --example fit_materials [iterations] [resolution]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfel_pbr::config::Config;
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::mc::Strategy;
use surfel_pbr::metrics::psnr;
use surfel_pbr::model::{attribute_maps, render_pbr, render_splitsum, LearnedLight, McSettings, Model, Shading};
use surfel_pbr::optim::{relight, run_stage2};
use surfel_pbr::synth::{material_sphere, orbit_cameras, render_dataset, GroundTruth, ProceduralEnv};

fn main() {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("integer argument"));
    let iterations = args.next().unwrap_or(400);
    let res = args.next().unwrap_or(40);
    let mut cfg = Config::default();
    cfg.light.size = 32;
    cfg.stage2.iterations = iterations;
    cfg.stage2.freeze_light = true;
    cfg.stage2.n_rays = 256 * 32;
    cfg.relight.n_d = 256;
    cfg.relight.n_s = 256;
    let shading = Shading::from_config(&cfg);
    let cube = ProceduralEnv::Sky.equirect(128, 64).to_cubemap(cfg.light.size);
    let env = shading.environment(cube.clone());
    let albedo = Rgb::new(0.8, 0.2, 0.2);
    let truth = material_sphere(2000, 0.5, albedo, 1.0, 0.3);
    let cams = orbit_cameras(6, V3::zeros(), 2.2, 0.35, 0.6, res, res);
    let gt = McSettings::even(2048, 7, Strategy::Mis).unwrap();
    let data = render_dataset(&truth, &env, &shading, &cams, GroundTruth::MonteCarlo(gt), false).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut start = truth.clone();
    for s in &mut start.surfels {
        for c in 0..3 {
            s.albedo[c] += rng.random_range(-0.3..0.3);
        }
        s.metallic += rng.random_range(-0.3..0.3);
        s.roughness += rng.random_range(-0.3..0.3);
        s.clamp_attributes();
    }
    let mut model = Model { scene: start, light: LearnedLight::from_cube(&cube), speccomp: None };
    let report = run_stage2(&mut model, &data, &cfg, &shading, None).unwrap();
    println!("loss {:.5} -> {:.5}", report.log[0].total, report.final_loss().unwrap());

    let (mut err, mut rough, mut n) = (0.0, 0.0, 0.0);
    for v in &data.views {
        let maps = attribute_maps(&render_splitsum(&model.scene, &env, &shading, &v.camera).gbuffer);
        for (i, _) in v.mask.iter().enumerate().filter(|(_, m)| **m) {
            err += (maps.albedo.data[i] - albedo).abs().mean();
            rough += maps.roughness.data[i].x;
            n += 1.0;
        }
    }
    println!("albedo MAE {:.4}, mean roughness {:.3} (truth 0.3)", err / n, rough / n);

    let held = shading.environment(ProceduralEnv::Studio.equirect(128, 64).to_cubemap(cfg.light.size));
    let relit = relight(&model, &held, &shading, &cams[..2], &cfg).unwrap();
    let reference = McSettings::even(512, cfg.seed, Strategy::Mis).unwrap();
    for (k, cam) in cams[..2].iter().enumerate() {
        let want = render_pbr(&truth, &held, &shading, cam, &reference, k as u64, None).image;
        println!("relight view {k}: {:.2} dB", psnr(&relit[k], &want));
    }
}
