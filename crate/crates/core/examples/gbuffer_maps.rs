//! Deferred attribute buffers of the toy scene: albedo, normal, depth and
//! opacity maps written as PNGs.

use std::path::Path;

use surfel_pbr::image_io::{save_normal_png, save_png, Image};
use surfel_pbr::math::{Rgb, V3};
use surfel_pbr::model::attribute_maps;
use surfel_pbr::splat::{render_view, RenderOptions, SplatScene};
use surfel_pbr::surfel::Camera;
use surfel_pbr::synth::toy_scene;
use surfel_pbr::trace::SurfelBvh;

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gbuffer".into());
    let out = Path::new(&out);
    std::fs::create_dir_all(out).unwrap();
    let scene = toy_scene(4000);
    let splat = SplatScene::new(&scene);
    let bvh = SurfelBvh::build(&splat.frames);
    let cam = Camera::look_at(V3::new(1.6, -1.6, 0.8), V3::zeros(), V3::z(), 0.7, 160, 160);
    let gb = render_view(&splat, &bvh, &cam, RenderOptions::default()).gbuffer;
    let maps = attribute_maps(&gb);
    let (w, h) = (cam.width, cam.height);
    save_png(&maps.albedo, &out.join("albedo.png")).unwrap();
    save_normal_png(w, h, &maps.normal, &out.join("normal.png")).unwrap();
    let far = maps.depth.iter().cloned().fold(0.0, f64::max).max(1e-9);
    let depth = Image::from_data(w, h, maps.depth.iter().map(|d| Rgb::repeat(d / far)).collect());
    save_png(&depth, &out.join("depth.png")).unwrap();
    save_png(&Image::from_data(w, h, maps.opacity.iter().map(|o| Rgb::repeat(*o)).collect()), &out.join("opacity.png")).unwrap();
    let fg = gb.foreground_mask().iter().filter(|m| **m).count();
    println!("{fg} foreground pixels of {}; maps in {}", w * h, out.display());
}
