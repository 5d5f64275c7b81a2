//! Finite-difference checks of every analytic adjoint.
//!
//! Each check draws random points and a random direction in parameter
//! space, then compares the analytic directional derivative with a central
//! difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::brdf::{Brdf, Material, ShadingFrame};
use crate::envlight::{BrdfLut, CubeLevel, EnvironmentLight, PrefilterSettings};
use crate::losses::{
    loss_color, loss_depth_scale_invariant, loss_distortion, loss_light_white, loss_normal_consistency, loss_normal_prior,
    loss_opacity_bce, loss_smooth,
};
use crate::math::{Rgb, V3};
use crate::mc::{estimate_backward, estimate_radiance, replay, SampleBudget, Strategy};
use crate::speccomp::{CompensationMlp, SphericalMipGrid};
use crate::splat::{backward_pixel, composite_pixel, Contribution, ContributionList, Footprint, GPixelGrad, ShadingPoint, SplatScene, BruteForce};
use crate::surfel::{Ray, Scene, Surfel, FEATURE_DIM};

/// Relative tolerance on directional derivatives.
pub const GRADCHECK_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Derivatives below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `grad . d` with the central difference of `f` along `d`.
fn directional(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let mut d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    d.iter_mut().for_each(|v| *v /= norm);
    let shifted = |s: f64| x.iter().zip(&d).map(|(a, b)| a + s * b).collect::<Vec<_>>();
    let numeric = (f(&shifted(STEP)) - f(&shifted(-STEP))) / (2.0 * STEP);
    let analytic: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn run(name: &str, points: usize, seed: u64, mut point: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errs: Vec<f64> = (0..points).map(|_| point(&mut rng)).collect();
    GradCheck {
        name: name.to_string(),
        points,
        max_rel_error: errs.iter().cloned().fold(0.0, f64::max),
        failures: errs.iter().filter(|e| !(**e <= GRADCHECK_TOL)).count(),
    }
}

fn unit(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

fn rgb_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    Rgb::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn material_of(x: &[f64]) -> Material {
    Material::new(Rgb::new(x[0], x[1], x[2]), x[3], x[4])
}

/// Random material in the interior of its box, as `[albedo, metallic, roughness]`.
fn material_point(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.15..0.95),
    ]
}

fn frame_and_wi(rng: &mut ChaCha8Rng) -> (ShadingFrame, V3) {
    let n = unit(rng);
    let mut wo = unit(rng);
    if wo.dot(&n) < 0.1 {
        wo = (wo + n * (0.3 - wo.dot(&n))).normalize();
    }
    let mut wi = unit(rng);
    if wi.dot(&n) < 0.1 {
        wi = (wi + n * (0.3 - wi.dot(&n))).normalize();
    }
    (ShadingFrame::new(n, wo), wi)
}

pub fn check_brdf(points: usize, seed: u64) -> GradCheck {
    let brdf = Brdf::default();
    run("brdf", points, seed, |rng| {
        let (frame, wi) = frame_and_wi(rng);
        let (ud, us) = (rgb_in(rng, -1.0, 1.0), rgb_in(rng, -1.0, 1.0));
        let x = material_point(rng);
        let f = |x: &[f64]| {
            let v = brdf.eval(&frame, &wi, &material_of(x));
            ud.dot(&v.diffuse) + us.dot(&v.specular)
        };
        let g = brdf.vjp(&frame, &wi, &material_of(&x), &ud, &us);
        directional(&f, &x, &[g.albedo.x, g.albedo.y, g.albedo.z, g.metallic, g.roughness], rng)
    })
}

fn test_light(rng: &mut ChaCha8Rng) -> EnvironmentLight {
    let phase = rng.random_range(0.0..6.0);
    let cube = CubeLevel::from_fn(8, |d| Rgb::new(1.0 + 0.5 * (3.0 * d.x + phase).sin(), 0.8 + 0.4 * d.z, 0.6 + 0.3 * d.y * d.x));
    EnvironmentLight::from_base(cube, BrdfLut::bake(16, 256, 1), PrefilterSettings::default())
}

pub fn check_splitsum(points: usize, seed: u64) -> GradCheck {
    let brdf = Brdf::default();
    let mut rng0 = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let light = test_light(&mut rng0);
    run("split-sum shading", points, seed, |rng| {
        let (frame, _) = frame_and_wi(rng);
        let up = rgb_in(rng, -1.0, 1.0);
        let mut x = material_point(rng);
        x.extend(frame.normal.iter());
        let sp = |x: &[f64]| ShadingPoint {
            albedo: Rgb::new(x[0], x[1], x[2]),
            metallic: x[3],
            roughness: x[4],
            normal: V3::new(x[5], x[6], x[7]),
            position: V3::zeros(),
            view_dir: frame.wo,
        };
        let f = |x: &[f64]| up.dot(&light.shade(&sp(x), &brdf).total());
        let g = light.shade_backward(&sp(&x), &brdf, &up, None);
        let grad = [g.albedo.x, g.albedo.y, g.albedo.z, g.metallic, g.roughness, g.normal.x, g.normal.y, g.normal.z];
        directional(&f, &x, &grad, rng)
    })
}

pub fn check_mc_estimator(points: usize, seed: u64) -> GradCheck {
    let brdf = Brdf::default();
    let mut rng0 = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
    let light = test_light(&mut rng0);
    run("mc estimator", points, seed, |rng| {
        let (frame, _) = frame_and_wi(rng);
        let up = rgb_in(rng, -1.0, 1.0);
        let x = material_point(rng);
        let sp = ShadingPoint {
            albedo: Rgb::new(x[0], x[1], x[2]),
            metallic: x[3],
            roughness: x[4],
            normal: frame.normal,
            position: V3::zeros(),
            view_dir: frame.wo,
        };
        let budget = SampleBudget::new(8, 8, rng.random()).expect("budget");
        let est = estimate_radiance(&sp, &brdf, &light, &budget, Strategy::Mis, 0, 0);
        // Material and one texel of the base level, records held fixed.
        let texel = rng.random_range(0..light.base().texels.len());
        let mut lg = light.grad_buffer();
        let mg = estimate_backward(&est, &sp, &brdf, &light, &up, Some(&mut lg));
        let mut full = x.clone();
        full.extend(light.base().texels[texel].iter());
        let f = |y: &[f64]| {
            let mut l = light.clone();
            l.mips[0].texels[texel] = Rgb::new(y[5], y[6], y[7]);
            up.dot(&replay(&est.records, &sp, &material_of(y), &brdf, &l))
        };
        let t = lg.mips[0][texel];
        let grad = [mg.albedo.x, mg.albedo.y, mg.albedo.z, mg.metallic, mg.roughness, t.x, t.y, t.z];
        directional(&f, &full, &grad, rng)
    })
}

pub fn check_mlp(points: usize, seed: u64) -> GradCheck {
    run("compensation mlp", points, seed, |rng| {
        let mut mlp = CompensationMlp::new(&[6, 8, 8, 3], rng.random());
        // Give the zero-initialized output layer random weights and move
        // the output into the curved part of the softplus.
        for w in mlp.layers.last_mut().unwrap().weights.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for b in mlp.layers.last_mut().unwrap().bias.iter_mut() {
            *b = 10.0 + rng.random_range(-1.0..1.0);
        }
        // Central differences are meaningless across a ReLU kink.
        let input: Vec<f64> = loop {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            if mlp.forward_traced(&x).1.kink_margin() > 1e-3 {
                break x;
            }
        };
        let up = rgb_in(rng, -1.0, 1.0);
        let shape: Vec<(usize, usize)> = mlp.layers.iter().map(|l| (l.weights.len(), l.bias.len())).collect();
        let pack = |m: &CompensationMlp| {
            let mut v = input.clone();
            for l in &m.layers {
                v.extend(&l.weights);
                v.extend(&l.bias);
            }
            v
        };
        let unpack = |v: &[f64]| {
            let mut m = mlp.clone();
            let mut k = 6;
            for (l, (nw, nb)) in m.layers.iter_mut().zip(&shape) {
                l.weights.copy_from_slice(&v[k..k + nw]);
                k += nw;
                l.bias.copy_from_slice(&v[k..k + nb]);
                k += nb;
            }
            (m, v[..6].to_vec())
        };
        let x = pack(&mlp);
        let f = |v: &[f64]| {
            let (m, i) = unpack(v);
            up.dot(&m.forward(&i))
        };
        let (_, trace) = mlp.forward_traced(&input);
        let mut g = mlp.zero_grad();
        let dx = mlp.backward(&trace, &up, &mut g);
        let mut grad = dx;
        for (w, b) in g.weights.iter().zip(&g.bias) {
            grad.extend(w);
            grad.extend(b);
        }
        directional(&f, &x, &grad, rng)
    })
}

pub fn check_grid(points: usize, seed: u64) -> GradCheck {
    run("mip-grid interpolation", points, seed, |rng| {
        let mut grid = SphericalMipGrid::zeros(16, 8, 3, 3);
        for v in grid.base_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        grid.rebuild_mips();
        let q = grid.query_angles(rng.random_range(0.05..3.1), rng.random_range(0.0..6.28), rng.random_range(0.0..2.0));
        let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = grid.base().to_vec();
        let f = |v: &[f64]| {
            let mut g = grid.clone();
            g.base_mut().copy_from_slice(v);
            g.rebuild_mips();
            g.lookup(&q).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let mut grads = grid.zero_gradient();
        grid.lookup_backward(&q, &up, &mut grads);
        grid.fold_gradient(&mut grads);
        directional(&f, &x, &grads[0], rng)
    })
}

pub fn check_composite(points: usize, seed: u64) -> GradCheck {
    run("splat compositing", points, seed, |rng| {
        // A few overlapping disks in front of a ray along +z.
        let surfels: Vec<Surfel> = (0..4)
            .map(|k| {
                let mut s = Surfel::facing(
                    V3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0 + 0.3 * k as f64),
                    (V3::z() + unit(rng) * 0.4).normalize(),
                    rng.random_range(0.3..0.6),
                    rng.random_range(0.3..0.6),
                )
                .with_material(rgb_in(rng, 0.1, 0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9))
                .with_opacity(rng.random_range(0.2..0.9));
                for f in s.feature.iter_mut() {
                    *f = rng.random_range(-1.0..1.0);
                }
                s
            })
            .collect();
        let ray = Ray::new(V3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0), V3::new(0.02, -0.01, 1.0).normalize());
        let mut up = GPixelGrad {
            albedo: rgb_in(rng, -1.0, 1.0),
            metallic: rng.random_range(-1.0..1.0),
            roughness: rng.random_range(-1.0..1.0),
            normal: unit(rng),
            position: unit(rng),
            opacity: rng.random_range(-1.0..1.0),
            depth: rng.random_range(-1.0..1.0),
            ..GPixelGrad::default()
        };
        for f in up.feature.iter_mut() {
            *f = rng.random_range(-1.0..1.0);
        }
        let per = 3 + 4 + 2 + 1 + 3 + 1 + 1 + FEATURE_DIM;
        let pack = |ss: &[Surfel]| {
            ss.iter()
                .flat_map(|s| {
                    let mut v: Vec<f64> = s.center.iter().cloned().collect();
                    v.extend(s.rotation);
                    v.extend(s.log_scale);
                    v.push(s.opacity);
                    v.extend(s.albedo.iter());
                    v.push(s.metallic);
                    v.push(s.roughness);
                    v.extend(s.feature);
                    v
                })
                .collect::<Vec<f64>>()
        };
        let unpack = |v: &[f64]| -> Vec<Surfel> {
            v.chunks(per)
                .map(|c| {
                    let mut feature = [0.0; FEATURE_DIM];
                    feature.copy_from_slice(&c[15..]);
                    Surfel {
                        center: V3::new(c[0], c[1], c[2]),
                        rotation: [c[3], c[4], c[5], c[6]],
                        log_scale: [c[7], c[8]],
                        opacity: c[9],
                        albedo: Rgb::new(c[10], c[11], c[12]),
                        metallic: c[13],
                        roughness: c[14],
                        feature,
                    }
                })
                .collect()
        };
        let objective = |ss: &[Surfel]| {
            let scene = Scene::new(ss.to_vec());
            let splat = SplatScene::new(&scene);
            let c = splat.gather(&BruteForce, &ray, Footprint::None, &[], None);
            let px = composite_pixel(&c, &splat, &ray);
            let mut v = up.albedo.dot(&px.albedo)
                + up.metallic * px.metallic
                + up.roughness * px.roughness
                + up.normal.dot(&px.normal)
                + up.position.dot(&px.position)
                + up.opacity * px.opacity
                + up.depth * px.depth;
            for (a, b) in up.feature.iter().zip(&px.feature) {
                v += a * b;
            }
            v
        };
        let x = pack(&surfels);
        let f = |v: &[f64]| objective(&unpack(v));
        let scene = Scene::new(surfels.clone());
        let splat = SplatScene::new(&scene);
        let c = splat.gather(&BruteForce, &ray, Footprint::None, &[], None);
        let mut grad = vec![0.0; x.len()];
        for (i, g) in backward_pixel(&ray, &c, &splat, &up, None, true) {
            let b = i * per;
            let mut v: Vec<f64> = g.center.iter().cloned().collect();
            v.extend(g.rotation);
            v.extend(g.log_scale);
            v.push(g.opacity);
            v.extend(g.albedo.iter());
            v.push(g.metallic);
            v.push(g.roughness);
            v.extend(g.feature);
            for (k, gv) in v.into_iter().enumerate() {
                grad[b + k] += gv;
            }
        }
        directional(&f, &x, &grad, rng)
    })
}

fn rand_rgbs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rgb> {
    (0..n).map(|_| rgb_in(rng, 0.0, 1.0)).collect()
}

fn flat3(v: &[V3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat3(v: &[f64]) -> Vec<V3> {
    v.chunks_exact(3).map(|c| V3::new(c[0], c[1], c[2])).collect()
}

pub fn check_losses(points: usize, seed: u64) -> Vec<GradCheck> {
    let mut out = Vec::new();
    out.push(run("loss: colour L1", points, seed, |rng| {
        let gt = rand_rgbs(rng, 12);
        let x = flat3(&rand_rgbs(rng, 12));
        let mask: Vec<bool> = (0..12).map(|_| rng.random_bool(0.7)).collect();
        let f = |v: &[f64]| loss_color(&unflat3(v), &gt, Some(&mask)).value;
        let g = flat3(&loss_color(&unflat3(&x), &gt, Some(&mask)).grad);
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: prior normal", points, seed + 1, |rng| {
        let prior: Vec<Option<V3>> = (0..10).map(|_| rng.random_bool(0.8).then(|| unit(rng))).collect();
        let x = flat3(&(0..10).map(|_| unit(rng) * rng.random_range(0.5..1.5)).collect::<Vec<_>>());
        let f = |v: &[f64]| loss_normal_prior(&unflat3(v), &prior, 1.0).value;
        let g = flat3(&loss_normal_prior(&unflat3(&x), &prior, 1.0).grad);
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: scale-invariant depth", points, seed + 2, |rng| {
        let prior: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..3.0)).collect();
        let mask: Vec<bool> = (0..12).map(|k| k < 3 || rng.random_bool(0.7)).collect();
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..4.0)).collect();
        let f = |v: &[f64]| loss_depth_scale_invariant(v, &prior, &mask).loss.value;
        let g = loss_depth_scale_invariant(&x, &prior, &mask).loss.grad;
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: opacity BCE", points, seed + 3, |rng| {
        let mask: Vec<bool> = (0..10).map(|_| rng.random_bool(0.5)).collect();
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..0.95)).collect();
        let f = |v: &[f64]| loss_opacity_bce(v, &mask).value;
        let g = loss_opacity_bce(&x, &mask).grad;
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: edge-aware smoothness", points, seed + 4, |rng| {
        let (w, h, c) = (5, 4, 2);
        let guide = rand_rgbs(rng, w * h);
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.85)).collect();
        let x: Vec<f64> = (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |v: &[f64]| loss_smooth(v, c, w, h, &guide, Some(&mask)).value;
        let g = loss_smooth(&x, c, w, h, &guide, Some(&mask)).grad;
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: neutral light", points, seed + 5, |rng| {
        let x: Vec<f64> = rgb_in(rng, 0.0, 2.0).iter().cloned().collect();
        let f = |v: &[f64]| loss_light_white(&Rgb::new(v[0], v[1], v[2])).0;
        let g = loss_light_white(&Rgb::new(x[0], x[1], x[2])).1;
        directional(&f, &x, g.as_slice(), rng)
    }));
    out.push(run("loss: depth distortion", points, seed + 6, |rng| {
        let n = 5;
        let x: Vec<f64> = (0..2 * n).map(|k| if k % 2 == 0 { rng.random_range(0.05..0.5) } else { rng.random_range(0.5..3.0) }).collect();
        let list = |v: &[f64]| ContributionList {
            items: v
                .chunks(2)
                .enumerate()
                .map(|(i, c)| Contribution { index: i, weight: c[0], alpha: c[0], gauss: 1.0, t: c[1], u: 0.0, v: 0.0, footprint: 0.0 })
                .collect(),
            transmittance: 0.0,
        };
        let f = |v: &[f64]| loss_distortion(&list(v)).0;
        let g: Vec<f64> = loss_distortion(&list(&x)).1.iter().flat_map(|c| [c.weight, c.t]).collect();
        directional(&f, &x, &g, rng)
    }));
    out.push(run("loss: depth-normal consistency", points, seed + 7, |rng| {
        let (w, h) = (4, 4);
        let view = vec![V3::new(0.0, 0.0, 1.0); w * h];
        let mask = vec![true; w * h];
        let normals = flat3(&(0..w * h).map(|_| unit(rng)).collect::<Vec<_>>());
        let pts = flat3(
            &(0..w * h)
                .map(|i| V3::new((i % w) as f64 * 0.1, (i / w) as f64 * 0.1, rng.random_range(-0.03..0.03)))
                .collect::<Vec<_>>(),
        );
        let mut x = normals.clone();
        x.extend(&pts);
        let split = |v: &[f64]| (unflat3(&v[..3 * w * h]), unflat3(&v[3 * w * h..]));
        let f = |v: &[f64]| {
            let (n, p) = split(v);
            loss_normal_consistency(&n, &p, &view, w, h, &mask).0.value
        };
        let (n, p) = split(&x);
        let (l, gp) = loss_normal_consistency(&n, &p, &view, w, h, &mask);
        let mut g = flat3(&l.grad);
        g.extend(flat3(&gp));
        directional(&f, &x, &g, rng)
    }));
    out
}

/// Every check at `points` random points each.
pub fn run_all(points: usize, seed: u64) -> Vec<GradCheck> {
    let mut out = vec![
        check_brdf(points, seed),
        check_splitsum(points, seed + 10),
        check_mc_estimator(points, seed + 20),
        check_mlp(points, seed + 30),
        check_grid(points, seed + 40),
        check_composite(points, seed + 50),
    ];
    out.extend(check_losses(points, seed + 60));
    out
}
