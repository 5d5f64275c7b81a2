//! Split-sum rendering of a row of surfel spheres with increasing roughness
//! under a pre-filtered environment. Pass a `.hdr` path to use your own.
//!
//! cargo run --release --example split_sum_spheres [env.hdr] [out.png]

use std::path::Path;

use surfel_pbr::cli::environment_cube;
use surfel_pbr::config::Config;
use surfel_pbr::image_io::save_png;
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::model::{render_splitsum, Shading};
use surfel_pbr::surfel::{Camera, Scene};
use surfel_pbr::synth::material_sphere;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let env = args.get(1).map_or("studio", String::as_str);
    let out = args.get(2).map_or("split_sum_spheres.png", String::as_str);
    let mut cfg = Config::default();
    cfg.light.size = 64;
    cfg.background = [0.02; 3];
    let shading = Shading::from_config(&cfg);
    let light = shading.environment(environment_cube(env, cfg.light.size).expect("environment"));

    let mut surfels = Vec::new();
    for (k, r) in [0.05, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
        let mut s = material_sphere(3000, 0.4, Rgb::new(0.95, 0.7, 0.4), 1.0, *r);
        for p in &mut s.surfels {
            p.center += V3::new(-2.0 + k as f64, 0.0, 0.0);
        }
        surfels.extend(s.surfels);
    }
    let cam = Camera::look_at(V3::new(0.0, -5.0, 0.6), V3::zeros(), V3::z(), 0.95, 480, 120);
    let img = render_splitsum(&Scene::new(surfels), &light, &shading, &cam).image;
    save_png(&img, Path::new(out)).expect("write png");
    println!("wrote {out}");
}
