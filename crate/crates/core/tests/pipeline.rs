//! End-to-end behaviour of the staged optimizer on small synthetic scenes.

use surfel_pbr::config::Config;
use surfel_pbr::dataset::Dataset;
use surfel_pbr::envlight::{reflect_dir, CubeLevel};
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::metrics::psnr;
use surfel_pbr::model::{LearnedLight, Model, Shading};
use surfel_pbr::optim::{comp_cache, relight, render_reconstruction, run_speccomp, run_stage1};
use surfel_pbr::speccomp::SpecComp;
use surfel_pbr::surfel::Camera;
use surfel_pbr::synth::{material_sphere, orbit_cameras, render_dataset, toy_scene, GroundTruth, ProceduralEnv};

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.light.size = 8;
    cfg.light.lut_size = 32;
    cfg.light.lut_samples = 512;
    cfg.light.irradiance_size = 8;
    cfg.relight.n_d = 8;
    cfg.relight.n_s = 8;
    cfg.speccomp.grid_width = 32;
    cfg.speccomp.grid_height = 16;
    cfg.speccomp.grid_levels = 3;
    cfg.speccomp.n_r = 8;
    cfg.speccomp.pixels = 256;
    cfg
}

struct Fixture {
    cfg: Config,
    shading: Shading,
    cube: CubeLevel,
    cams: Vec<Camera>,
    data: Dataset,
    model: Model,
}

/// The toy scene rendered under the sky, and a model that already holds the
/// true surfels and light.
fn fixture() -> Fixture {
    let cfg = small_config();
    let shading = Shading::from_config(&cfg);
    let cube = ProceduralEnv::Sky.equirect(32, 16).to_cubemap(cfg.light.size);
    let cams = orbit_cameras(3, V3::zeros(), 2.5, 0.3, 0.6, 24, 24);
    let truth = toy_scene(800);
    let data = render_dataset(&truth, &shading.environment(cube.clone()), &shading, &cams, GroundTruth::SplitSum, true).unwrap();
    let model = Model { scene: truth, light: LearnedLight::from_cube(&cube), speccomp: None };
    Fixture { cfg, shading, cube, cams, data, model }
}

fn mean_psnr(model: &Model, f: &Fixture) -> f64 {
    let env = f.shading.environment(model.light.radiance());
    f.data
        .views
        .iter()
        .map(|v| psnr(&surfel_pbr::model::render_splitsum(&model.scene, &env, &f.shading, &v.camera).image, &v.image))
        .sum::<f64>()
        / f.data.views.len() as f64
}

#[test]
fn stage1_stays_near_the_true_scene() {
    let mut f = fixture();
    f.cfg.stage1.iterations = 30;
    f.cfg.stage1.prune_every = 0;
    let before = mean_psnr(&f.model, &f);
    let mut model = f.model.clone();
    let report = run_stage1(&mut model, &f.data, &f.cfg, &f.shading, None).unwrap();
    let after = mean_psnr(&model, &f);
    assert!(before > 60.0, "true scene reproduces its own render: {before}");
    assert!(after > 35.0, "PSNR drifted from {before} to {after}");
    assert!(report.log.iter().all(|r| r.terms.c < 0.01), "colour loss left the optimum");
}

#[test]
fn zero_iteration_speccomp_changes_nothing_else() {
    let mut f = fixture();
    f.cfg.speccomp.iterations = 0;
    let mut model = f.model.clone();
    let report = run_speccomp(&mut model, &f.data, &f.cfg, &f.shading, None).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(model.scene, f.model.scene);
    assert_eq!(model.light, f.model.light);
    let sc = model.speccomp.as_ref().expect("network created");
    // Output bias starts far down the softplus, so the term is nearly zero.
    for p in comp_cache(&model, &f.data, &f.cfg, &f.shading).unwrap().iter().flatten() {
        let (lc, _) = sc.forward(&p.feature, &p.normal, &p.view_dir, p.roughness);
        assert!(lc.max() < 1e-3, "{lc:?}");
    }
}

#[test]
fn speccomp_keeps_the_physical_render_frozen() {
    let mut f = fixture();
    f.cfg.speccomp.iterations = 15;
    let before = comp_cache(&f.model, &f.data, &f.cfg, &f.shading).unwrap();
    let mut model = f.model.clone();
    run_speccomp(&mut model, &f.data, &f.cfg, &f.shading, None).unwrap();
    assert_eq!(model.scene, f.model.scene);
    assert_eq!(model.light, f.model.light);
    let after = comp_cache(&model, &f.data, &f.cfg, &f.shading).unwrap();
    for (a, b) in before.iter().flatten().zip(after.iter().flatten()) {
        assert_eq!(a.index, b.index);
        assert_eq!(a.pbr, b.pbr);
    }
}

fn planted(n: &V3, wo: &V3) -> Rgb {
    let r = reflect_dir(n, wo);
    Rgb::new(0.3, 0.25, 0.2) * (0.5 + 0.5 * r.z).powi(4)
}

#[test]
fn speccomp_recovers_a_planted_residual() {
    let mut cfg = small_config();
    cfg.light.size = 16;
    cfg.speccomp.iterations = 800;
    cfg.speccomp.grid_width = 64;
    cfg.speccomp.grid_height = 32;
    cfg.speccomp.grid_levels = 4;
    cfg.speccomp.n_r = 16;
    cfg.speccomp.pixels = 512;
    let shading = Shading::from_config(&cfg);
    let cube = ProceduralEnv::Sky.equirect(64, 32).to_cubemap(cfg.light.size);
    let scene = material_sphere(1200, 0.5, Rgb::repeat(0.6), 0.5, 0.4);
    let cams = orbit_cameras(6, V3::zeros(), 2.2, 0.3, 0.6, 28, 28);
    let mut data = render_dataset(&scene, &shading.environment(cube.clone()), &shading, &cams, GroundTruth::SplitSum, false).unwrap();
    let mut model = Model { scene, light: LearnedLight::from_cube(&cube), speccomp: None };
    let cache = comp_cache(&model, &data, &cfg, &shading).unwrap();
    for (view, pixels) in data.views.iter_mut().zip(&cache) {
        for p in pixels {
            let l = p.pbr + planted(&p.normal, &p.view_dir);
            view.image.data[p.index] = l * p.opacity + shading.background * (1.0 - p.opacity);
        }
    }
    run_speccomp(&mut model, &data, &cfg, &shading, None).unwrap();
    let sc = model.speccomp.as_ref().unwrap();
    let (mut err, mut n) = (0.0, 0.0);
    for p in cache.iter().flatten() {
        err += (sc.forward(&p.feature, &p.normal, &p.view_dir, p.roughness).0 - planted(&p.normal, &p.view_dir)).abs().mean();
        n += 1.0;
    }
    assert!(err / n < 0.02, "residual MAE {}", err / n);
}

#[test]
fn relighting_under_a_black_environment_is_black() {
    let f = fixture();
    let black = f.shading.environment(CubeLevel { size: f.cube.size, texels: vec![Rgb::zeros(); f.cube.texels.len()] });
    let images = relight(&f.model, &black, &f.shading, &f.cams, &f.cfg).unwrap();
    for (img, cam) in images.iter().zip(&f.cams) {
        let gb = surfel_pbr::model::render_splitsum(&f.model.scene, &black, &f.shading, cam).gbuffer;
        let mask = gb.foreground_mask();
        assert!(mask.iter().any(|m| *m));
        for (i, px) in gb.pixels.iter().enumerate() {
            let expected = f.shading.background * (1.0 - px.opacity);
            assert!((img.data[i] - expected).abs().max() < 1e-12, "pixel {i}: {:?}", img.data[i]);
        }
    }
}

#[test]
fn relighting_with_the_learned_light_matches_reconstruction() {
    let mut f = fixture();
    // A compensation network is present but relighting must ignore it.
    f.model.speccomp = Some(SpecComp::new(32, 16, 3, 1));
    let env = f.shading.environment(f.model.light.radiance());
    let relit = relight(&f.model, &env, &f.shading, &f.cams, &f.cfg).unwrap();
    f.model.speccomp = None;
    let recon = render_reconstruction(&f.model, &f.shading, &f.cams, &f.cfg).unwrap();
    for (a, b) in relit.iter().zip(&recon) {
        assert_eq!(a.data, b.data);
    }
}
