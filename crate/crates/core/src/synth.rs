//! Synthetic scenes, environments and datasets rendered by the engine's own
//! forward model. Used for closed-loop checks, the examples and `render`.

use crate::dataset::{Dataset, PriorMaps, View};
use crate::envlight::Equirect;
use crate::error::Result;
use crate::math::{Rgb, V3};
use crate::model::{attribute_maps, render_pbr, render_splitsum, McSettings, Shading};
use crate::envlight::EnvironmentLight;
use crate::surfel::{Camera, Scene};

/// Named procedural environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProceduralEnv {
    /// Blue sky over a brown ground with a warm sun.
    Sky,
    /// Dark room with a large soft key light and a cool rim light.
    Studio,
    /// Uniform unit radiance.
    White,
}

impl ProceduralEnv {
    pub fn parse(name: &str) -> Option<ProceduralEnv> {
        match name {
            "sky" => Some(ProceduralEnv::Sky),
            "studio" => Some(ProceduralEnv::Studio),
            "white" => Some(ProceduralEnv::White),
            _ => None,
        }
    }

    pub fn radiance(&self, d: &V3) -> Rgb {
        let d = d.normalize();
        match self {
            ProceduralEnv::Sky => {
                let sun = V3::new(0.5, -0.3, 0.81).normalize();
                let sky = if d.z > 0.0 {
                    Rgb::new(0.35, 0.55, 0.9) * (0.6 + 0.6 * d.z)
                } else {
                    Rgb::new(0.3, 0.22, 0.15) * (0.7 + 0.3 * d.z)
                };
                let s = d.dot(&sun);
                let glow = if s > 0.0 { (50.0 * (s - 1.0)).exp() * 6.0 } else { 0.0 };
                sky + Rgb::new(1.0, 0.85, 0.6) * glow
            }
            ProceduralEnv::Studio => {
                let key = V3::new(-0.6, -0.5, 0.62).normalize();
                let rim = V3::new(0.7, 0.6, 0.2).normalize();
                let k = (12.0 * (d.dot(&key) - 1.0)).exp() * 4.0;
                let r = (20.0 * (d.dot(&rim) - 1.0)).exp() * 2.0;
                Rgb::repeat(0.05) + Rgb::new(1.0, 0.95, 0.9) * k + Rgb::new(0.5, 0.7, 1.0) * r
            }
            ProceduralEnv::White => Rgb::repeat(1.0),
        }
    }

    pub fn equirect(&self, width: usize, height: usize) -> Equirect {
        Equirect::from_fn(width, height, |d| self.radiance(d))
    }
}

/// `count` cameras on a circle around `target` at the given elevation
/// (radians above the xy plane), all looking at `target` with `+z` up.
pub fn orbit_cameras(count: usize, target: V3, distance: f64, elevation: f64, fov_x: f64, width: usize, height: usize) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / count as f64;
            let dir = V3::new(elevation.cos() * phi.cos(), elevation.cos() * phi.sin(), elevation.sin());
            Camera::look_at(target + dir * distance, target, V3::z(), fov_x, width, height)
        })
        .collect()
}

/// A uniform-material surfel sphere.
pub fn material_sphere(count: usize, radius: f64, albedo: Rgb, metallic: f64, roughness: f64) -> Scene {
    let mut scene = Scene::fibonacci_sphere(count, V3::zeros(), radius);
    for s in &mut scene.surfels {
        s.albedo = albedo;
        s.metallic = metallic;
        s.roughness = roughness;
        s.opacity = 1.0;
    }
    scene
}

/// Small scene used by the examples and end-to-end checks: a sphere whose
/// hemispheres carry two different glossy materials.
pub fn toy_scene(count: usize) -> Scene {
    let mut scene = Scene::fibonacci_sphere(count, V3::zeros(), 0.5);
    for s in &mut scene.surfels {
        s.opacity = 1.0;
        if s.center.z >= 0.0 {
            s.albedo = Rgb::new(0.8, 0.3, 0.2);
            s.metallic = 0.0;
            s.roughness = 0.35;
        } else {
            s.albedo = Rgb::new(0.9, 0.8, 0.5);
            s.metallic = 1.0;
            s.roughness = 0.25;
        }
    }
    scene
}

/// How ground-truth images are formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroundTruth {
    SplitSum,
    MonteCarlo(McSettings),
}

/// Renders a dataset of `scene` under `env`. Masks are the rendered
/// foreground; prior maps (when requested) are the exact normals and depths.
pub fn render_dataset(
    scene: &Scene,
    env: &EnvironmentLight,
    shading: &Shading,
    cameras: &[Camera],
    truth: GroundTruth,
    priors: bool,
) -> Result<Dataset> {
    let views = cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let r = match truth {
                GroundTruth::SplitSum => render_splitsum(scene, env, shading, cam),
                GroundTruth::MonteCarlo(mc) => render_pbr(scene, env, shading, cam, &mc, k as u64, None),
            };
            let maps = attribute_maps(&r.gbuffer);
            let mask: Vec<bool> = r.gbuffer.foreground_mask();
            let priors = priors.then(|| PriorMaps {
                normals: maps.normal.iter().zip(&mask).map(|(n, &m)| if m { *n } else { None }).collect(),
                depth: maps.depth.iter().zip(&mask).map(|(&d, &m)| (m && d > 0.0).then_some(d)).collect(),
            });
            View { name: format!("view{k:03}"), camera: cam.clone(), image: r.image, mask, priors }
        })
        .collect();
    Ok(Dataset { views, background: Some([shading.background.x, shading.background.y, shading.background.z]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn orbit_cameras_look_at_target() {
        for cam in orbit_cameras(6, V3::new(0.1, 0.0, 0.2), 3.0, 0.3, 0.7, 16, 12) {
            assert!((cam.center() - V3::new(0.1, 0.0, 0.2)).norm() - 3.0 < 1e-9);
            let to_target = (V3::new(0.1, 0.0, 0.2) - cam.center()).normalize();
            assert!((cam.forward() - to_target).norm() < 1e-9);
        }
    }

    #[test]
    fn toy_dataset_has_foreground_and_priors() {
        let mut cfg = Config::default();
        cfg.light.size = 8;
        cfg.light.lut_size = 16;
        cfg.light.lut_samples = 64;
        let shading = Shading::from_config(&cfg);
        let env = shading.environment(ProceduralEnv::Sky.equirect(32, 16).to_cubemap(8));
        let cams = orbit_cameras(2, V3::zeros(), 2.5, 0.2, 0.6, 20, 20);
        let ds = render_dataset(&toy_scene(300), &env, &shading, &cams, GroundTruth::SplitSum, true).unwrap();
        for v in &ds.views {
            let fg = v.mask.iter().filter(|m| **m).count();
            assert!(fg > 40 && fg < 400, "{fg}");
            assert!(v.priors.as_ref().unwrap().normals.iter().flatten().count() == fg);
        }
    }
}
