//! The trainable model (surfels, learned environment, optional compensation
//! network), forward image formation and the binary checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::brdf::Brdf;
use crate::config::Config;
use crate::envlight::{BrdfLut, CubeLevel, EnvironmentLight, PrefilterSettings};
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::math::{sigmoid, softplus, softplus_inverse, Rgb, V3};
use crate::mc::{estimate_radiance, IncidentLight, MCEstimate, SampleBudget, Strategy, TracedLight};
use crate::speccomp::{read_f64s, read_u32, write_f64s, RenderMode, SpecComp};
use crate::splat::{render_view, GBuffer, GPixel, RenderOptions, RenderedView, SplatScene};
use crate::surfel::{Camera, Scene, Surfel, FEATURE_DIM};
use crate::trace::{SurfelBvh, Tracer};

/// Seed of the split-sum lookup table; fixed so every run shares one table.
pub const LUT_SEED: u64 = 0x5eed_1075;

/// Environment radiance stored as per-texel latents, `L = softplus(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedLight {
    pub size: usize,
    pub latent: Vec<Rgb>,
}

impl LearnedLight {
    pub fn constant(size: usize, value: f64) -> Self {
        let z = softplus_inverse(value.max(1e-6));
        LearnedLight { size, latent: vec![Rgb::repeat(z); 6 * size * size] }
    }

    /// Latents reproducing `cube` (radiance floored at 1e-6).
    pub fn from_cube(cube: &CubeLevel) -> Self {
        LearnedLight { size: cube.size, latent: cube.texels.iter().map(|t| t.map(|v| softplus_inverse(v.max(1e-6)))).collect() }
    }

    pub fn radiance(&self) -> CubeLevel {
        CubeLevel { size: self.size, texels: self.latent.iter().map(|z| z.map(softplus)).collect() }
    }

    /// Chains a gradient on the radiance texels to the latents.
    pub fn latent_gradient(&self, radiance_grad: &[Rgb]) -> Vec<Rgb> {
        self.latent.iter().zip(radiance_grad).map(|(z, g)| g.component_mul(&z.map(sigmoid))).collect()
    }
}

/// Everything that is optimized.
#[derive(Clone, Debug)]
pub struct Model {
    pub scene: Scene,
    pub light: LearnedLight,
    pub speccomp: Option<SpecComp>,
}

impl Model {
    /// Initial model from the config: a scene file or a Fibonacci sphere,
    /// and a constant gray environment.
    pub fn initial(cfg: &Config) -> Result<Model> {
        let init = &cfg.init;
        let mut scene = match &init.scene {
            Some(p) => crate::surfel::load_scene(Path::new(p))?,
            None => Scene::fibonacci_sphere(init.surfels, V3::from(init.center), init.radius),
        };
        for s in &mut scene.surfels {
            s.opacity = init.opacity;
            s.albedo = Rgb::repeat(init.albedo);
            s.metallic = init.metallic;
            s.roughness = init.roughness;
            s.clamp_attributes();
        }
        Ok(Model { scene, light: LearnedLight::constant(cfg.light.size, cfg.light.init_gray), speccomp: None })
    }
}

/// Fixed rendering context: BRDF flags, split-sum tables and background.
#[derive(Clone, Debug)]
pub struct Shading {
    pub brdf: Brdf,
    pub lut: BrdfLut,
    pub settings: PrefilterSettings,
    pub options: RenderOptions,
    pub background: Rgb,
}

impl Shading {
    pub fn from_config(cfg: &Config) -> Shading {
        Shading {
            brdf: Brdf { diffuse_fresnel: cfg.render.diffuse_fresnel },
            lut: BrdfLut::bake(cfg.light.lut_size, cfg.light.lut_samples, LUT_SEED),
            settings: PrefilterSettings { tail: cfg.light.prefilter_tail, irradiance_size: cfg.light.irradiance_size },
            options: RenderOptions { lowpass: cfg.render.lowpass },
            background: Rgb::from(cfg.background),
        }
    }

    pub fn environment(&self, base: CubeLevel) -> EnvironmentLight {
        EnvironmentLight::from_base(base, self.lut.clone(), self.settings)
    }
}

/// Composites shaded radiance over the background: `O L + (1 - O) bg`.
/// Pixels with no usable shading point show the background.
pub fn over_background(px: &GPixel, radiance: Option<Rgb>, background: &Rgb) -> Rgb {
    match radiance {
        Some(l) if px.opacity > 1e-8 => l * px.opacity + background * (1.0 - px.opacity),
        _ => *background,
    }
}

/// Per-view Monte Carlo settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McSettings {
    pub budget: SampleBudget,
    pub strategy: Strategy,
    /// Trace secondary rays for occlusion (and indirect light if enabled).
    pub visibility: bool,
    pub indirect: bool,
}

impl McSettings {
    /// `n` samples per pixel split evenly between the two strategies.
    pub fn even(n: usize, seed: u64, strategy: Strategy) -> Result<McSettings> {
        let n_d = (n / 2).max(1);
        let n_s = n.saturating_sub(n_d).max(1);
        Ok(McSettings { budget: SampleBudget::new(n_d, n_s, seed)?, strategy, visibility: true, indirect: true })
    }
}

/// Geometry of one view that stays valid while the surfel geometry is frozen.
pub struct FrozenView {
    pub rendered: RenderedView,
    /// Surfels on each pixel's primary ray, excluded from its secondaries.
    pub exclude: Vec<Vec<usize>>,
}

impl FrozenView {
    pub fn new(scene: &SplatScene<'_>, bvh: &SurfelBvh, camera: &Camera, options: RenderOptions) -> FrozenView {
        let rendered = render_view(scene, bvh, camera, options);
        let exclude = rendered.contributions.iter().map(|c| c.items.iter().map(|i| i.index).collect()).collect();
        FrozenView { rendered, exclude }
    }
}

/// Shades one G-buffer pixel with the Monte Carlo estimator.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pixel(
    px: &GPixel,
    exclude: &[usize],
    tracer: &Tracer<'_, SurfelBvh>,
    light: &EnvironmentLight,
    brdf: &Brdf,
    mc: &McSettings,
    key: u64,
    counter: u64,
) -> Option<MCEstimate> {
    let sp = px.shading()?;
    let est = if mc.visibility {
        let source = TracedLight { tracer, light, brdf: *brdf, exclude, indirect: mc.indirect };
        estimate_radiance(&sp, brdf, &source as &dyn IncidentLight, &mc.budget, mc.strategy, key, counter)
    } else {
        estimate_radiance(&sp, brdf, light as &dyn IncidentLight, &mc.budget, mc.strategy, key, counter)
    };
    Some(est)
}

/// Normalized surfel feature of a pixel.
pub fn pixel_feature(px: &GPixel) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    if px.opacity > 1e-8 {
        for (o, v) in f.iter_mut().zip(&px.feature) {
            *o = v / px.opacity;
        }
    }
    f
}

/// Images produced for one view.
pub struct ViewRender {
    pub image: Image,
    pub gbuffer: GBuffer,
}

/// Split-sum rendering of a view.
pub fn render_splitsum(scene: &Scene, light: &EnvironmentLight, shading: &Shading, camera: &Camera) -> ViewRender {
    let splat = SplatScene::new(scene);
    let bvh = SurfelBvh::build(&splat.frames);
    let gbuffer = render_view(&splat, &bvh, camera, shading.options).gbuffer;
    let data = gbuffer
        .pixels
        .par_iter()
        .map(|px| over_background(px, px.shading().map(|sp| light.shade(&sp, &shading.brdf).total()), &shading.background))
        .collect();
    ViewRender { image: Image::from_data(camera.width, camera.height, data), gbuffer }
}

/// Monte Carlo rendering of a view. Pixel `i` draws from the stream
/// `(seed, i, counter)`. The compensation term is added in reconstruction
/// mode only.
pub fn render_pbr(
    scene: &Scene,
    light: &EnvironmentLight,
    shading: &Shading,
    camera: &Camera,
    mc: &McSettings,
    counter: u64,
    speccomp: Option<(&SpecComp, RenderMode)>,
) -> ViewRender {
    let splat = SplatScene::new(scene);
    let bvh = SurfelBvh::build(&splat.frames);
    let frozen = FrozenView::new(&splat, &bvh, camera, shading.options);
    let tracer = Tracer::new(&splat, &bvh, scene.scale());
    let gb = &frozen.rendered.gbuffer;
    let data = (0..gb.pixels.len())
        .into_par_iter()
        .map(|i| {
            let px = &gb.pixels[i];
            let est = estimate_pixel(px, &frozen.exclude[i], &tracer, light, &shading.brdf, mc, i as u64, counter);
            let radiance = est.map(|e| {
                let pbr = e.pbr();
                match speccomp {
                    Some((sc, RenderMode::Reconstruction)) => {
                        let sp = px.shading().expect("shaded pixel");
                        let (lc, _) = sc.forward(&pixel_feature(px), &sp.normal, &sp.view_dir, sp.roughness);
                        pbr + lc
                    }
                    _ => pbr,
                }
            });
            over_background(px, radiance, &shading.background)
        })
        .collect();
    ViewRender { image: Image::from_data(camera.width, camera.height, data), gbuffer: frozen.rendered.gbuffer }
}

/// Per-pixel attribute maps of a G-buffer, for inspection and evaluation.
pub struct AttributeMaps {
    pub albedo: Image,
    pub roughness: Image,
    pub metallic: Image,
    pub normal: Vec<Option<V3>>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

pub fn attribute_maps(gb: &GBuffer) -> AttributeMaps {
    let (w, h) = (gb.width, gb.height);
    let sps: Vec<_> = gb.pixels.iter().map(|p| p.shading()).collect();
    let pick = |f: &dyn Fn(&crate::splat::ShadingPoint) -> Rgb| {
        Image::from_data(w, h, sps.iter().map(|s| s.as_ref().map_or(Rgb::zeros(), f)).collect())
    };
    AttributeMaps {
        albedo: pick(&|s| s.albedo),
        roughness: pick(&|s| Rgb::repeat(s.roughness)),
        metallic: pick(&|s| Rgb::repeat(s.metallic)),
        normal: sps.iter().map(|s| s.as_ref().map(|s| s.normal)).collect(),
        depth: gb.pixels.iter().map(|p| if p.opacity > 1e-8 { p.depth / p.opacity } else { 0.0 }).collect(),
        opacity: gb.pixels.iter().map(|p| p.opacity).collect(),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// f64 values per surfel record.
pub const SURFEL_VALUES: usize = 3 + 4 + 2 + 1 + 3 + 1 + 1 + FEATURE_DIM;

fn surfel_values(s: &Surfel) -> Vec<f64> {
    let mut v = Vec::with_capacity(SURFEL_VALUES);
    v.extend(s.center.iter());
    v.extend(s.rotation);
    v.extend(s.log_scale);
    v.push(s.opacity);
    v.extend(s.albedo.iter());
    v.push(s.metallic);
    v.push(s.roughness);
    v.extend(s.feature);
    v
}

fn surfel_from_values(v: &[f64]) -> Surfel {
    let mut feature = [0.0; FEATURE_DIM];
    feature.copy_from_slice(&v[15..15 + FEATURE_DIM]);
    Surfel {
        center: V3::new(v[0], v[1], v[2]),
        rotation: [v[3], v[4], v[5], v[6]],
        log_scale: [v[7], v[8]],
        opacity: v[9],
        albedo: Rgb::new(v[10], v[11], v[12]),
        metallic: v[13],
        roughness: v[14],
        feature,
    }
}

fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

/// Writes the model. Layout in `docs/formats.md`.
pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.scene.len() as u64).to_le_bytes())?;
    for s in &model.scene.surfels {
        write_f64s(&mut w, &surfel_values(s))?;
    }
    w.write_all(&(model.light.size as u32).to_le_bytes())?;
    let flat: Vec<f64> = model.light.latent.iter().flat_map(|z| [z.x, z.y, z.z]).collect();
    write_f64s(&mut w, &flat)?;
    match &model.speccomp {
        Some(sc) => {
            w.write_all(&[1])?;
            sc.write(&mut w)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> std::io::Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("not a checkpoint"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid("unsupported checkpoint version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    if count > 1 << 28 {
        return Err(invalid("implausible surfel count"));
    }
    let mut surfels = Vec::with_capacity(count);
    let mut buf = vec![0.0; SURFEL_VALUES];
    for _ in 0..count {
        read_f64s(&mut r, &mut buf)?;
        surfels.push(surfel_from_values(&buf));
    }
    let size = read_u32(&mut r)? as usize;
    if size == 0 || size > 1 << 12 {
        return Err(invalid("bad light size"));
    }
    let mut flat = vec![0.0; 6 * size * size * 3];
    read_f64s(&mut r, &mut flat)?;
    let latent = flat.chunks_exact(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect();
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let speccomp = match flag[0] {
        0 => None,
        1 => Some(SpecComp::read(&mut r)?),
        _ => return Err(invalid("bad spec-comp flag")),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(invalid("trailing bytes after checkpoint"));
    }
    Ok(Model { scene: Scene::new(surfels), light: LearnedLight { size, latent }, speccomp })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(with_comp: bool) -> Model {
        let mut scene = Scene::fibonacci_sphere(40, V3::new(0.1, 0.0, 0.2), 0.7);
        for (k, s) in scene.surfels.iter_mut().enumerate() {
            s.albedo = Rgb::new(0.1 * (k % 7) as f64, 0.3, 0.9);
            s.feature[3] = k as f64 * 0.01;
        }
        let mut light = LearnedLight::constant(4, 0.5);
        light.latent[7] = Rgb::new(-1.0, 2.0, 0.25);
        Model { scene, light, speccomp: with_comp.then(|| SpecComp::new(8, 4, 2, 3)) }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        for with_comp in [false, true] {
            let m = model(with_comp);
            let mut a = Vec::new();
            write_checkpoint(&m, &mut a).unwrap();
            let back = read_checkpoint(a.as_slice()).unwrap();
            let mut b = Vec::new();
            write_checkpoint(&back, &mut b).unwrap();
            assert_eq!(a, b);
            assert_eq!(back.scene, m.scene);
            assert_eq!(back.light, m.light);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut a = Vec::new();
        write_checkpoint(&model(false), &mut a).unwrap();
        assert!(read_checkpoint(&a[..a.len() - 9]).is_err());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = a.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }

    #[test]
    fn learned_light_round_trips_radiance() {
        let cube = CubeLevel::from_fn(4, |d| Rgb::new(0.2 + d.x.abs(), 1.5, 0.01));
        let l = LearnedLight::from_cube(&cube);
        for (a, b) in l.radiance().texels.iter().zip(&cube.texels) {
            assert!((a - b).norm() < 1e-9);
        }
        // d softplus / dz = sigmoid(z).
        let g = l.latent_gradient(&vec![Rgb::repeat(1.0); l.latent.len()]);
        let z = l.latent[5].x;
        let h = 1e-6;
        assert!((g[5].x - (softplus(z + h) - softplus(z - h)) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn background_composite() {
        let mut px = GPixel::background(V3::z());
        let bg = Rgb::new(1.0, 0.5, 0.0);
        assert_eq!(over_background(&px, Some(Rgb::zeros()), &bg), bg);
        px.opacity = 0.25;
        let c = over_background(&px, Some(Rgb::repeat(2.0)), &bg);
        assert!((c - Rgb::new(1.25, 0.875, 0.5)).norm() < 1e-12);
    }
}
