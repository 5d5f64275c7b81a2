//! Specular compensation on a planted residual: the targets are the frozen
//! physically based render plus a view-dependent highlight that the BRDF
//! cannot produce. The network learns the highlight; relighting ignores it.
//!
//! cargo run --release --example speccomp_residual [iterations]

use surfel_pbr::config::Config;
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::model::{LearnedLight, Model, Shading};
use surfel_pbr::optim::{comp_cache, run_speccomp};
use surfel_pbr::envlight::reflect_dir;
use surfel_pbr::synth::{material_sphere, orbit_cameras, render_dataset, GroundTruth, ProceduralEnv};

fn residual(n: &V3, wo: &V3) -> Rgb {
    let r = reflect_dir(n, wo);
    Rgb::new(0.3, 0.25, 0.2) * (0.5 + 0.5 * r.z).powi(4)
}

fn main() {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let mut cfg = Config::default();
    cfg.light.size = 16;
    cfg.speccomp.iterations = iterations;
    cfg.speccomp.grid_width = 64;
    cfg.speccomp.grid_height = 32;
    cfg.speccomp.grid_levels = 4;
    cfg.speccomp.n_r = 16;
    cfg.speccomp.pixels = 512;
    cfg.speccomp.log_every = 250;
    let shading = Shading::from_config(&cfg);
    let cube = ProceduralEnv::Sky.equirect(64, 32).to_cubemap(cfg.light.size);
    let scene = material_sphere(1500, 0.5, Rgb::new(0.6, 0.6, 0.6), 0.5, 0.4);
    let cams = orbit_cameras(6, V3::zeros(), 2.2, 0.3, 0.6, 32, 32);
    let mut data = render_dataset(&scene, &shading.environment(cube.clone()), &shading, &cams, GroundTruth::SplitSum, false).unwrap();
    let mut model = Model { scene, light: LearnedLight::from_cube(&cube), speccomp: None };

    // Replace every foreground target by the cached render plus the residual.
    let cache = comp_cache(&model, &data, &cfg, &shading).unwrap();
    for (view, pixels) in data.views.iter_mut().zip(&cache) {
        for p in pixels {
            let l = p.pbr + residual(&p.normal, &p.view_dir);
            view.image.data[p.index] = l * p.opacity + shading.background * (1.0 - p.opacity);
        }
    }
    let report = run_speccomp(&mut model, &data, &cfg, &shading, None).unwrap();
    println!("loss {:.5} -> {:.5}", report.log[0].total, report.final_loss().unwrap());

    let sc = model.speccomp.as_ref().unwrap();
    let (mut err, mut n) = (0.0, 0.0);
    for p in cache.iter().flatten() {
        let (lc, _) = sc.forward(&p.feature, &p.normal, &p.view_dir, p.roughness);
        err += (lc - residual(&p.normal, &p.view_dir)).abs().mean();
        n += 1.0;
    }
    println!("compensation MAE against the planted residual: {:.4}", err / n);
}
