//! Directional albedo of the BRDF over a roughness/metallic sweep: diffuse
//! by cosine sampling, specular by GGX sampling. Specular energy stays at or
//! below one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfel_pbr::brdf::{Brdf, Material, ShadingFrame};
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::mc::{sample_cosine, sample_ggx};

fn main() {
    let brdf = Brdf::default();
    let n = V3::z();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("{:>6} {:>5} {:>9} {:>9} {:>9}", "cos_o", "R", "diffuse", "spec(M=0)", "spec(M=1)");
    for cos_o in [1.0f64, 0.5, 0.1] {
        let wo = V3::new((1.0 - cos_o * cos_o).sqrt(), 0.0, cos_o);
        let frame = ShadingFrame::new(n, wo);
        for r in [0.05, 0.3, 0.6, 1.0] {
            let dielectric = Material::new(Rgb::repeat(1.0), 0.0, r);
            let metal = Material::new(Rgb::repeat(1.0), 1.0, r);
            let (mut d, mut s0, mut s1) = (0.0, 0.0, 0.0);
            let count = 200_000;
            for _ in 0..count {
                let (wi, pdf) = sample_cosine(&n, rng.random(), rng.random());
                d += brdf.eval(&frame, &wi, &dielectric).diffuse.x * wi.z / pdf;
                let g = sample_ggx(&frame, dielectric.alpha(), rng.random(), rng.random());
                if g.valid {
                    let w = g.wi.z / g.pdf;
                    s0 += brdf.eval(&frame, &g.wi, &dielectric).specular.x * w;
                    s1 += brdf.eval(&frame, &g.wi, &metal).specular.x * w;
                }
            }
            let k = count as f64;
            println!("{cos_o:>6.2} {r:>5.2} {:>9.4} {:>9.4} {:>9.4}", d / k, s0 / k, s1 / k);
        }
    }
}
