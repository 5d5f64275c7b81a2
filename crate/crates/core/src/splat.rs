//! Depth-sorted front-to-back compositing of surfel contributions along a
//! ray, the deferred G-buffer, and the adjoint of both.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::math::{Rgb, V3};
use crate::surfel::{
    filtered_weight_grad, ray_splat_intersect, rotation_matrix_backward, Camera, Ray, Scene, SplatFrame, Surfel,
    FEATURE_DIM,
};

/// Early-exit threshold on residual transmittance.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Pixels with accumulated opacity at or below this are background.
pub const OPACITY_FLOOR: f64 = 0.5;

/// Raw intersection record produced by a hit collector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawHit {
    pub index: usize,
    pub u: f64,
    pub v: f64,
    pub t: f64,
}

/// Anything that can enumerate the surfels hit by a ray.
pub trait HitCollector: Sync {
    /// Appends every hit along `ray` (in any order), skipping `exclude`.
    fn collect_hits(&self, ray: &Ray, frames: &[SplatFrame], exclude: &[usize], out: &mut Vec<RawHit>);
}

/// Linear scan over all surfels; the reference for the accelerated paths.
#[derive(Clone, Copy, Debug, Default)]
pub struct BruteForce;

impl HitCollector for BruteForce {
    fn collect_hits(&self, ray: &Ray, frames: &[SplatFrame], exclude: &[usize], out: &mut Vec<RawHit>) {
        for (index, frame) in frames.iter().enumerate() {
            if exclude.contains(&index) {
                continue;
            }
            if let Some(h) = ray_splat_intersect(ray, frame) {
                out.push(RawHit { index, u: h.u, v: h.v, t: h.t });
            }
        }
    }
}

/// Sorts hits by ascending `t`, ties broken by surfel index.
pub fn sort_hits(hits: &mut [RawHit]) {
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.index.cmp(&b.index)));
}

/// Optional screen-space low-pass filter applied to camera rays.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Footprint {
    None,
    /// World-space filter radius per unit ray distance.
    LowPass { radius_per_t: f64 },
}

impl Footprint {
    #[inline]
    fn in_uv(&self, t: f64, frame: &SplatFrame) -> f64 {
        match *self {
            Footprint::None => 0.0,
            Footprint::LowPass { radius_per_t } => radius_per_t * t / frame.scale_u.min(frame.scale_v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub index: usize,
    /// Transmittance-weighted blend weight `a_i * prod_{j<i} (1 - a_j)`.
    pub weight: f64,
    /// Local alpha `a_i = opacity_i * G_i`.
    pub alpha: f64,
    pub gauss: f64,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// Low-pass footprint used for `gauss`, frozen for the adjoint.
    pub footprint: f64,
}

/// Depth-ordered contributions along one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContributionList {
    pub items: Vec<Contribution>,
    /// Transmittance left after the last accepted contribution.
    pub transmittance: f64,
}

impl ContributionList {
    pub fn empty() -> Self {
        ContributionList { items: Vec::new(), transmittance: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|c| c.weight).collect()
    }

    pub fn opacity(&self) -> f64 {
        self.items.iter().map(|c| c.weight).sum()
    }
}

/// Composites sorted hits front to back, stopping once the residual
/// transmittance drops below [`TRANSMITTANCE_FLOOR`] or after `max_hits`.
pub fn composite_hits(
    hits: &[RawHit],
    surfels: &[Surfel],
    frames: &[SplatFrame],
    footprint: Footprint,
    max_hits: Option<usize>,
) -> ContributionList {
    let mut items = Vec::with_capacity(hits.len().min(32));
    let mut transmittance = 1.0;
    for h in hits {
        if max_hits.is_some_and(|m| items.len() >= m) {
            break;
        }
        let frame = &frames[h.index];
        let fp = footprint.in_uv(h.t, frame);
        let (gauss, _, _) = filtered_weight_grad(h.u, h.v, fp);
        let alpha = surfels[h.index].opacity * gauss;
        if alpha <= 0.0 {
            continue;
        }
        items.push(Contribution {
            index: h.index,
            weight: alpha * transmittance,
            alpha,
            gauss,
            t: h.t,
            u: h.u,
            v: h.v,
            footprint: fp,
        });
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_FLOOR {
            break;
        }
    }
    ContributionList { items, transmittance }
}

/// Geometry cache of a scene for one render pass.
pub struct SplatScene<'a> {
    pub surfels: &'a [Surfel],
    pub frames: Vec<SplatFrame>,
}

impl<'a> SplatScene<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        SplatScene { surfels: &scene.surfels, frames: scene.frames() }
    }

    pub fn from_slice(surfels: &'a [Surfel]) -> Self {
        SplatScene { surfels, frames: surfels.iter().map(Surfel::frame).collect() }
    }

    /// Collects, sorts and composites the hits of `ray`.
    pub fn gather<C: HitCollector + ?Sized>(
        &self,
        collector: &C,
        ray: &Ray,
        footprint: Footprint,
        exclude: &[usize],
        max_hits: Option<usize>,
    ) -> ContributionList {
        let mut hits = Vec::new();
        collector.collect_hits(ray, &self.frames, exclude, &mut hits);
        sort_hits(&mut hits);
        composite_hits(&hits, self.surfels, &self.frames, footprint, max_hits)
    }
}

/// Brute-force gather of all contributions along `ray`.
pub fn gather_contributions(ray: &Ray, scene: &Scene) -> ContributionList {
    SplatScene::new(scene).gather(&BruteForce, ray, Footprint::None, &[], None)
}

/// `sum_i c_i w_i` over the contribution list.
pub fn composite_color(contribs: &ContributionList, colors: &[Rgb]) -> Rgb {
    contribs
        .items
        .iter()
        .fold(Rgb::zeros(), |acc, c| acc + colors[c.index] * c.weight)
}

/// Per-pixel alpha-composited attributes. Values are raw blended sums (not
/// divided by opacity); see [`GPixel::shading`].
#[derive(Clone, Debug, PartialEq)]
pub struct GPixel {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: V3,
    pub position: V3,
    pub feature: [f64; FEATURE_DIM],
    pub opacity: f64,
    /// Blended ray distance `sum_i w_i t_i`.
    pub depth: f64,
    /// Unit direction towards the viewer.
    pub view_dir: V3,
}

impl GPixel {
    pub fn background(view_dir: V3) -> Self {
        GPixel {
            albedo: Rgb::zeros(),
            metallic: 0.0,
            roughness: 0.0,
            normal: V3::zeros(),
            position: V3::zeros(),
            feature: [0.0; FEATURE_DIM],
            opacity: 0.0,
            depth: 0.0,
            view_dir,
        }
    }

    pub fn is_foreground(&self) -> bool {
        self.opacity > OPACITY_FLOOR
    }

    /// Unit shading normal, if the blended normal is non-degenerate.
    pub fn unit_normal(&self) -> Option<V3> {
        let len = self.normal.norm();
        (len > 1e-12).then(|| self.normal / len)
    }

    /// Opacity-normalized attributes used by the shading passes.
    pub fn shading(&self) -> Option<ShadingPoint> {
        if self.opacity <= 1e-8 {
            return None;
        }
        let inv = 1.0 / self.opacity;
        let normal = self.unit_normal()?;
        Some(ShadingPoint {
            albedo: (self.albedo * inv).map(|c| c.clamp(0.0, 1.0)),
            metallic: (self.metallic * inv).clamp(0.0, 1.0),
            roughness: (self.roughness * inv).clamp(0.0, 1.0),
            normal,
            position: self.position * inv,
            view_dir: self.view_dir,
        })
    }
}

/// Gradient with respect to the opacity-normalized shading attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadingPointGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    /// With respect to the unit normal.
    pub normal: V3,
    pub position: V3,
}

impl GPixel {
    /// Adjoint of [`GPixel::shading`]: maps gradients on the normalized
    /// attributes back to the raw blended sums, including the opacity they
    /// were divided by. Clamped attributes pass no gradient.
    pub fn shading_backward(&self, g: &ShadingPointGrad) -> GPixelGrad {
        let mut out = GPixelGrad::default();
        if self.opacity <= 1e-8 || self.unit_normal().is_none() {
            return out;
        }
        let inv = 1.0 / self.opacity;
        let mut d_op = 0.0;
        for c in 0..3 {
            let a = self.albedo[c] * inv;
            if a > 0.0 && a < 1.0 {
                out.albedo[c] = g.albedo[c] * inv;
                d_op -= g.albedo[c] * a * inv;
            }
        }
        let m = self.metallic * inv;
        if m > 0.0 && m < 1.0 {
            out.metallic = g.metallic * inv;
            d_op -= g.metallic * m * inv;
        }
        let r = self.roughness * inv;
        if r > 0.0 && r < 1.0 {
            out.roughness = g.roughness * inv;
            d_op -= g.roughness * r * inv;
        }
        out.position = g.position * inv;
        d_op -= g.position.dot(&(self.position * inv)) * inv;
        out.normal = crate::math::normalize_backward(&self.normal, &g.normal);
        out.opacity = d_op;
        out
    }
}

/// Material and geometry at a shading point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingPoint {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: V3,
    pub position: V3,
    pub view_dir: V3,
}

impl ShadingPoint {
    pub fn material(&self) -> crate::brdf::Material {
        crate::brdf::Material::new(self.albedo, self.metallic, self.roughness)
    }
}

/// Surfel normal flipped to face the incoming ray.
#[inline]
pub fn facing_normal(frame: &SplatFrame, ray_dir: &V3) -> (V3, f64) {
    if frame.normal.dot(ray_dir) > 0.0 {
        (-frame.normal, -1.0)
    } else {
        (frame.normal, 1.0)
    }
}

/// Applies the compositing weights of `contribs` to the surfel attributes.
pub fn composite_pixel(contribs: &ContributionList, scene: &SplatScene<'_>, ray: &Ray) -> GPixel {
    let mut px = GPixel::background(-ray.direction);
    for c in &contribs.items {
        let s = &scene.surfels[c.index];
        let frame = &scene.frames[c.index];
        let w = c.weight;
        px.albedo += s.albedo * w;
        px.metallic += s.metallic * w;
        px.roughness += s.roughness * w;
        px.normal += facing_normal(frame, &ray.direction).0 * w;
        px.position += ray.at(c.t) * w;
        for (k, f) in px.feature.iter_mut().zip(&s.feature) {
            *k += f * w;
        }
        px.opacity += w;
        px.depth += c.t * w;
    }
    px
}

/// Row-major per-pixel G-buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<GPixel>,
}

impl GBuffer {
    pub fn pixel(&self, x: usize, y: usize) -> &GPixel {
        &self.pixels[y * self.width + x]
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(GPixel::is_foreground).collect()
    }

    /// Unit normals (zero where undefined) for every pixel.
    pub fn unit_normals(&self) -> Vec<V3> {
        self.pixels.iter().map(|p| p.unit_normal().unwrap_or_else(V3::zeros)).collect()
    }
}

/// Options for primary-ray rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Enables the screen-space low-pass floor on the Gaussian weight.
    pub lowpass: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { lowpass: true }
    }
}

impl RenderOptions {
    pub fn footprint(&self, camera: &Camera) -> Footprint {
        if self.lowpass {
            Footprint::LowPass { radius_per_t: camera.lowpass_radius_per_t() }
        } else {
            Footprint::None
        }
    }
}

/// G-buffer together with the per-pixel contribution lists that produced it.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub gbuffer: GBuffer,
    pub contributions: Vec<ContributionList>,
}

/// Renders the deferred attribute buffers of `scene` seen from `camera`.
pub fn render_view<C: HitCollector + ?Sized>(
    scene: &SplatScene<'_>,
    collector: &C,
    camera: &Camera,
    options: RenderOptions,
) -> RenderedView {
    let footprint = options.footprint(camera);
    let (pixels, contributions): (Vec<GPixel>, Vec<ContributionList>) = (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray(i % camera.width, i / camera.width);
            let contribs = scene.gather(collector, &ray, footprint, &[], None);
            (composite_pixel(&contribs, scene, &ray), contribs)
        })
        .unzip();
    RenderedView {
        gbuffer: GBuffer { width: camera.width, height: camera.height, pixels },
        contributions,
    }
}

pub fn render_gbuffer<C: HitCollector + ?Sized>(
    scene: &Scene,
    collector: &C,
    camera: &Camera,
    options: RenderOptions,
) -> GBuffer {
    render_view(&SplatScene::new(scene), collector, camera, options).gbuffer
}

/// Re-composites a G-buffer from cached contribution lists; valid while the
/// geometry that produced the lists is unchanged.
pub fn recomposite(scene: &SplatScene<'_>, camera: &Camera, contributions: &[ContributionList]) -> GBuffer {
    let pixels = contributions
        .par_iter()
        .enumerate()
        .map(|(i, c)| composite_pixel(c, scene, &camera.pixel_ray(i % camera.width, i / camera.width)))
        .collect();
    GBuffer { width: camera.width, height: camera.height, pixels }
}

/// Gradient of a loss with respect to one raw G-buffer pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GPixelGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: V3,
    pub position: V3,
    pub feature: [f64; FEATURE_DIM],
    pub opacity: f64,
    pub depth: f64,
}

impl Default for GPixelGrad {
    fn default() -> Self {
        GPixelGrad {
            albedo: Rgb::zeros(),
            metallic: 0.0,
            roughness: 0.0,
            normal: V3::zeros(),
            position: V3::zeros(),
            feature: [0.0; FEATURE_DIM],
            opacity: 0.0,
            depth: 0.0,
        }
    }
}

impl GPixelGrad {
    pub fn add_assign(&mut self, o: &GPixelGrad) {
        self.albedo += o.albedo;
        self.metallic += o.metallic;
        self.roughness += o.roughness;
        self.normal += o.normal;
        self.position += o.position;
        for k in 0..FEATURE_DIM {
            self.feature[k] += o.feature[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }

    pub fn is_zero(&self) -> bool {
        self.albedo == Rgb::zeros()
            && self.metallic == 0.0
            && self.roughness == 0.0
            && self.normal == V3::zeros()
            && self.position == V3::zeros()
            && self.feature.iter().all(|&f| f == 0.0)
            && self.opacity == 0.0
            && self.depth == 0.0
    }
}

/// Gradient with respect to every parameter of one surfel.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelGrad {
    pub center: V3,
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity: f64,
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub feature: [f64; FEATURE_DIM],
}

impl Default for SurfelGrad {
    fn default() -> Self {
        SurfelGrad {
            center: V3::zeros(),
            rotation: [0.0; 4],
            log_scale: [0.0; 2],
            opacity: 0.0,
            albedo: Rgb::zeros(),
            metallic: 0.0,
            roughness: 0.0,
            feature: [0.0; FEATURE_DIM],
        }
    }
}

impl SurfelGrad {
    pub fn accumulate(&mut self, o: &SurfelGrad) {
        self.center += o.center;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        for k in 0..2 {
            self.log_scale[k] += o.log_scale[k];
        }
        self.opacity += o.opacity;
        self.albedo += o.albedo;
        self.metallic += o.metallic;
        self.roughness += o.roughness;
        for k in 0..FEATURE_DIM {
            self.feature[k] += o.feature[k];
        }
    }
}

/// Extra per-contribution gradients that do not pass through the G-buffer
/// (e.g. the depth-distortion regularizer).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContributionGrad {
    pub weight: f64,
    pub t: f64,
}

/// Adjoint of [`composite_pixel`] for one ray. Returns one gradient per
/// contribution, in list order. Geometry gradients are skipped unless
/// `geometry` is set.
pub fn backward_pixel(
    ray: &Ray,
    contribs: &ContributionList,
    scene: &SplatScene<'_>,
    grad: &GPixelGrad,
    extra: Option<&[ContributionGrad]>,
    geometry: bool,
) -> Vec<(usize, SurfelGrad)> {
    let n = contribs.items.len();
    let d = ray.direction;
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }

    // dL/dw_i for every contribution.
    let mut g_w = Vec::with_capacity(n);
    for (k, c) in contribs.items.iter().enumerate() {
        let s = &scene.surfels[c.index];
        let frame = &scene.frames[c.index];
        let (nf, _) = facing_normal(frame, &d);
        let mut g = grad.albedo.dot(&s.albedo)
            + grad.metallic * s.metallic
            + grad.roughness * s.roughness
            + grad.normal.dot(&nf)
            + grad.position.dot(&ray.at(c.t))
            + grad.opacity
            + grad.depth * c.t;
        for (gk, fk) in grad.feature.iter().zip(&s.feature) {
            g += gk * fk;
        }
        if let Some(e) = extra {
            g += e[k].weight;
        }
        g_w.push(g);
    }

    // dL/da_k = T_k (g_k - S_k) with S_k accumulated back to front.
    let mut suffix = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let next = &contribs.items[k + 1];
        suffix[k] = g_w[k + 1] * next.alpha + (1.0 - next.alpha) * suffix[k + 1];
    }
    let mut trans = 1.0;
    for (k, c) in contribs.items.iter().enumerate() {
        let s = &scene.surfels[c.index];
        let frame = &scene.frames[c.index];
        let g_alpha_local = trans * (g_w[k] - suffix[k]);
        trans *= 1.0 - c.alpha;

        let w = c.weight;
        let mut sg = SurfelGrad {
            albedo: grad.albedo * w,
            metallic: grad.metallic * w,
            roughness: grad.roughness * w,
            opacity: g_alpha_local * c.gauss,
            ..SurfelGrad::default()
        };
        for (o, gk) in sg.feature.iter_mut().zip(&grad.feature) {
            *o = gk * w;
        }

        if geometry {
            let g_gauss = g_alpha_local * s.opacity;
            let (_, dg_du, dg_dv) = filtered_weight_grad(c.u, c.v, c.footprint);
            let gu = g_gauss * dg_du;
            let gv = g_gauss * dg_dv;
            let mut gt = w * (grad.position.dot(&d) + grad.depth);
            if let Some(e) = extra {
                gt += e[k].t;
            }
            let (_, sign) = facing_normal(frame, &d);
            let tu = frame.tangent_u;
            let tv = frame.tangent_v;
            let nrm = frame.normal;
            let dn = d.dot(&nrm);
            let p = ray.at(c.t) - frame.center;
            let (su, sv) = (frame.scale_u, frame.scale_v);
            let du_dc = nrm * (tu.dot(&d) / (dn * su)) - tu / su;
            let dv_dc = nrm * (tv.dot(&d) / (dn * sv)) - tv / sv;
            let dt_dc = nrm / dn;
            sg.center = du_dc * gu + dv_dc * gv + dt_dc * gt;
            let g_tu = p * (gu / su);
            let g_tv = p * (gv / sv);
            let g_n = -p * (gu * tu.dot(&d) / (su * dn) + gv * tv.dot(&d) / (sv * dn) + gt / dn)
                + grad.normal * (w * sign);
            let d_r = Matrix3::from_columns(&[g_tu, g_tv, g_n]);
            sg.rotation = rotation_matrix_backward(&s.rotation, &d_r);
            sg.log_scale = [-gu * c.u, -gv * c.v];
        }
        out.push((c.index, sg));
    }
    out
}
