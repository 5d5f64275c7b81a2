//! Per-pixel estimator variance of each sampling strategy over a roughness
//! sweep, for a glossy metal lit by a procedural sky.

use surfel_pbr::brdf::Brdf;
use surfel_pbr::envlight::{BrdfLut, EnvironmentLight, PrefilterSettings};
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::mc::{estimate_radiance, SampleBudget, Strategy};
use surfel_pbr::splat::ShadingPoint;
use surfel_pbr::synth::ProceduralEnv;

fn main() {
    let cube = ProceduralEnv::Sky.equirect(256, 128).to_cubemap(32);
    let light = EnvironmentLight::from_base(cube, BrdfLut::bake(32, 512, 1), PrefilterSettings::default());
    let brdf = Brdf::default();
    let budget = SampleBudget::new(8, 8, 3).unwrap();
    let reps = 512;
    let strategies = [Strategy::Mis, Strategy::CosineOnly, Strategy::GgxOnly, Strategy::Uniform];
    println!("{:>5} {:>12} {:>12} {:>12} {:>12}", "R", "mis", "cosine", "ggx", "uniform");
    for r in [0.05, 0.1, 0.3, 0.6, 1.0] {
        let sp = ShadingPoint {
            albedo: Rgb::new(0.9, 0.6, 0.3),
            metallic: 0.5,
            roughness: r,
            normal: V3::new(0.2, -0.3, 1.0).normalize(),
            position: V3::zeros(),
            view_dir: V3::new(0.5, 0.1, 1.0).normalize(),
        };
        let vars: Vec<f64> = strategies
            .iter()
            .map(|&s| {
                let xs: Vec<f64> = (0..reps).map(|k| estimate_radiance(&sp, &brdf, &light, &budget, s, 0, k).pbr().mean()).collect();
                let mean = xs.iter().sum::<f64>() / reps as f64;
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
            })
            .collect();
        println!("{r:>5.2} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}", vars[0], vars[1], vars[2], vars[3]);
    }
}
