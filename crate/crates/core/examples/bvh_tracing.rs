//! Ray tracing through surfels: the BVH against a brute-force scan, and a
//! visibility query through a half-transparent occluder.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::splat::{BruteForce, Footprint, SplatScene};
use surfel_pbr::surfel::{Ray, Scene, Surfel};
use surfel_pbr::trace::{SurfelBvh, Tracer};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scene = Scene::fibonacci_sphere(20_000, V3::zeros(), 1.0);
    let splat = SplatScene::new(&scene);
    let t = Instant::now();
    let bvh = SurfelBvh::build(&splat.frames);
    println!("bvh over {} surfels: {} leaves in {:?}", scene.len(), bvh.leaf_count(), t.elapsed());

    let rays: Vec<Ray> = (0..2000)
        .map(|_| {
            let o = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -3.0);
            Ray::new(o, (V3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0) - o).normalize())
        })
        .collect();
    let t = Instant::now();
    let fast: Vec<_> = rays.iter().map(|r| splat.gather(&bvh, r, Footprint::None, &[], None)).collect();
    let t_bvh = t.elapsed();
    let t = Instant::now();
    let slow: Vec<_> = rays.iter().map(|r| splat.gather(&BruteForce, r, Footprint::None, &[], None)).collect();
    let t_brute = t.elapsed();
    let same = fast.iter().zip(&slow).all(|(a, b)| a == b);
    println!("2000 rays: bvh {t_bvh:?}, brute force {t_brute:?}, identical: {same}");

    let occluder = Scene::new(vec![Surfel::facing(V3::new(0.0, 0.0, 1.0), V3::z(), 1.0, 1.0)
        .with_material(Rgb::repeat(0.5), 0.0, 0.5)
        .with_opacity(0.5)]);
    let os = SplatScene::new(&occluder);
    let ob = SurfelBvh::build(&os.frames);
    let tracer = Tracer::new(&os, &ob, occluder.scale());
    let v = tracer.trace_visibility(&Ray::new(V3::zeros(), V3::z()), &[]);
    println!("visibility through an opacity-0.5 disk: {v:.4}");
}
