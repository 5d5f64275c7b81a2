//! Adam updates and the training stages: geometry under split-sum shading,
//! materials and light under Monte Carlo shading, and the compensation
//! network with everything else frozen.
//!
//! Gradients are gathered over a fixed number of pixel chunks and merged in
//! chunk order, so results do not depend on the worker count.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{AdamConfig, Config, DivergenceConfig};
use crate::dataset::{Dataset, View};
use crate::envlight::{EnvironmentLight, LightGrad};
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::losses::{
    loss_color, loss_depth_scale_invariant, loss_distortion, loss_light_white, loss_normal_consistency,
    loss_normal_prior, loss_opacity_bce, loss_smooth, stage1_total, stage2_total, LossTerms,
};
use crate::math::{mix64, Rgb, V3};
use crate::mc::{estimate_backward, SampleBudget};
use crate::model::{estimate_pixel, over_background, pixel_feature, render_pbr, save_checkpoint, FrozenView, McSettings, Model, Shading};
use crate::speccomp::{GridQuery, MlpGrad, RenderMode, SpecComp};
use crate::splat::{backward_pixel, recomposite, render_view, ContributionGrad, GPixelGrad, ShadingPointGrad, SplatScene, SurfelGrad};
use crate::surfel::{Camera, Scene, Surfel};
use crate::trace::{SurfelBvh, Tracer};

/// Pixel chunks per gradient pass.
pub const GRAD_CHUNKS: usize = 8;

fn chunks(n: usize) -> Vec<Range<usize>> {
    let size = n.div_ceil(GRAD_CHUNKS).max(1);
    (0..GRAD_CHUNKS).map(|c| (c * size).min(n)..((c + 1) * size).min(n)).collect()
}

// ---------------------------------------------------------------------------
// Adam.

/// Bias-corrected Adam over one flat parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Non-finite gradient entries replaced by zero so far.
    pub nonfinite: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, cfg: &AdamConfig) -> Adam {
        Adam { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, m: vec![0.0; len], v: vec![0.0; len], step: 0, nonfinite: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert!(params.len() == self.m.len() && grads.len() == self.m.len(), "parameter group size changed");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let mut g = grads[i];
            if !g.is_finite() {
                self.nonfinite += 1;
                g = 0.0;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Keeps the moments of the elements whose owner survives; `stride`
    /// values per owner.
    pub fn retain(&mut self, stride: usize, keep: &[bool]) {
        let filter = |v: &[f64]| v.chunks(stride).zip(keep).filter(|(_, &k)| k).flat_map(|(c, _)| c.to_vec()).collect();
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}

/// Per-surfel parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfelGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Albedo,
    Metallic,
    Roughness,
}

impl SurfelGroup {
    pub fn stride(self) -> usize {
        match self {
            SurfelGroup::Position | SurfelGroup::Albedo => 3,
            SurfelGroup::Rotation => 4,
            SurfelGroup::Scale => 2,
            _ => 1,
        }
    }

    fn params(self, s: &Surfel, out: &mut Vec<f64>) {
        match self {
            SurfelGroup::Position => out.extend(s.center.iter()),
            SurfelGroup::Rotation => out.extend(s.rotation),
            SurfelGroup::Scale => out.extend(s.log_scale),
            SurfelGroup::Opacity => out.push(s.opacity),
            SurfelGroup::Albedo => out.extend(s.albedo.iter()),
            SurfelGroup::Metallic => out.push(s.metallic),
            SurfelGroup::Roughness => out.push(s.roughness),
        }
    }

    fn grads(self, g: &SurfelGrad, out: &mut Vec<f64>) {
        match self {
            SurfelGroup::Position => out.extend(g.center.iter()),
            SurfelGroup::Rotation => out.extend(g.rotation),
            SurfelGroup::Scale => out.extend(g.log_scale),
            SurfelGroup::Opacity => out.push(g.opacity),
            SurfelGroup::Albedo => out.extend(g.albedo.iter()),
            SurfelGroup::Metallic => out.push(g.metallic),
            SurfelGroup::Roughness => out.push(g.roughness),
        }
    }

    fn store(self, s: &mut Surfel, v: &[f64]) {
        match self {
            SurfelGroup::Position => s.center = V3::new(v[0], v[1], v[2]),
            SurfelGroup::Rotation => s.rotation = [v[0], v[1], v[2], v[3]],
            SurfelGroup::Scale => s.log_scale = [v[0], v[1]],
            SurfelGroup::Opacity => s.opacity = v[0],
            SurfelGroup::Albedo => s.albedo = Rgb::new(v[0], v[1], v[2]),
            SurfelGroup::Metallic => s.metallic = v[0],
            SurfelGroup::Roughness => s.roughness = v[0],
        }
    }
}

/// Adam states for a set of unfrozen surfel groups.
#[derive(Clone, Debug)]
pub struct SurfelOptimizer {
    pub groups: Vec<(SurfelGroup, Adam)>,
}

impl SurfelOptimizer {
    pub fn new(count: usize, rates: &[(SurfelGroup, f64)], cfg: &AdamConfig) -> Self {
        SurfelOptimizer { groups: rates.iter().map(|&(g, lr)| (g, Adam::new(count * g.stride(), lr, cfg))).collect() }
    }

    /// Updates the unfrozen groups, then renormalizes rotations (if trained)
    /// and clamps every attribute into range. Frozen groups are untouched.
    pub fn step(&mut self, scene: &mut Scene, grads: &[SurfelGrad]) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for (group, adam) in &mut self.groups {
            p.clear();
            g.clear();
            for s in &scene.surfels {
                group.params(s, &mut p);
            }
            for sg in grads {
                group.grads(sg, &mut g);
            }
            adam.update(&mut p, &g);
            let stride = group.stride();
            for (s, v) in scene.surfels.iter_mut().zip(p.chunks(stride)) {
                group.store(s, v);
            }
        }
        let rotation = self.groups.iter().any(|(g, _)| *g == SurfelGroup::Rotation);
        for s in &mut scene.surfels {
            if rotation {
                let n = s.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
                if n > 1e-12 {
                    s.rotation = s.rotation.map(|q| q / n);
                } else {
                    s.rotation = [1.0, 0.0, 0.0, 0.0];
                }
            }
            s.clamp_attributes();
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        for (group, adam) in &mut self.groups {
            adam.retain(group.stride(), keep);
        }
    }

    pub fn nonfinite(&self) -> u64 {
        self.groups.iter().map(|(_, a)| a.nonfinite).sum()
    }
}

fn flatten(v: &[Rgb]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Rgb> {
    v.chunks_exact(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect()
}

/// Adam over the environment latents.
fn step_light(model: &mut Model, adam: &mut Adam, radiance_grad: &[Rgb]) {
    let g = flatten(&model.light.latent_gradient(radiance_grad));
    let mut p = flatten(&model.light.latent);
    adam.update(&mut p, &g);
    model.light.latent = unflatten(&p);
}

// ---------------------------------------------------------------------------
// Bookkeeping shared by the stages.

/// Aborts when the loss stays above `factor` times its first value for
/// `patience` consecutive iterations.
#[derive(Clone, Debug)]
pub struct DivergenceGuard {
    pub cfg: DivergenceConfig,
    pub initial: Option<f64>,
    pub streak: usize,
}

impl DivergenceGuard {
    pub fn new(cfg: DivergenceConfig) -> Self {
        DivergenceGuard { cfg, initial: None, streak: 0 }
    }

    pub fn observe(&mut self, iteration: usize, total: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(total);
        if !total.is_finite() || total > self.cfg.factor * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.cfg.patience.max(1) {
            return Err(Error::Diverged(format!(
                "loss {total:.6e} at iteration {iteration} exceeded {}x the initial {initial:.6e} for {} iterations",
                self.cfg.factor, self.streak
            )));
        }
        Ok(())
    }
}

/// One line of a loss curve.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub terms: LossTerms,
}

pub fn write_loss_csv<W: Write>(rows: &[LogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,view,total,c,n,o,d,smooth,geo_n,geo_d,light")?;
    for r in rows {
        let t = &r.terms;
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.view, r.total, t.c, t.n, t.o, t.d, t.smooth, t.geo_n, t.geo_d, t.light
        )?;
    }
    Ok(())
}

/// Result of one stage.
#[derive(Clone, Debug, Default)]
pub struct StageReport {
    /// Every iteration's losses.
    pub log: Vec<LogRow>,
    pub nonfinite_grads: u64,
    pub pruned: usize,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.total)
    }
}

/// Where a stage writes its loss curve and periodic checkpoints.
#[derive(Clone, Copy, Debug)]
pub struct Outputs<'a> {
    pub dir: &'a Path,
    pub stage: &'a str,
}

impl Outputs<'_> {
    fn checkpoint(&self, model: &Model, iteration: usize) -> Result<()> {
        save_checkpoint(model, &self.dir.join(format!("{}_{iteration:06}.ckpt", self.stage)))
    }

    fn losses(&self, rows: &[LogRow]) -> Result<()> {
        let path = self.dir.join(format!("{}_loss.csv", self.stage));
        let mut buf = Vec::new();
        write_loss_csv(rows, &mut buf).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    }
}

/// Visits views in a fresh seeded permutation every epoch.
#[derive(Clone, Debug)]
pub struct ViewSchedule {
    count: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: u64,
    pos: usize,
}

impl ViewSchedule {
    pub fn new(count: usize, seed: u64) -> Self {
        ViewSchedule { count, seed, order: Vec::new(), epoch: 0, pos: 0 }
    }

    pub fn next_view(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.count).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(self.epoch)));
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn iteration_rng(seed: u64, stage: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(stage.wrapping_mul(0x9e37_79b9) ^ iteration as u64)))
}

/// Up to `count` distinct elements of `pool`, uniformly.
pub fn sample_pixels(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count >= pool.len() {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), count).into_iter().map(|k| pool[k]).collect()
}

/// Pixels shaded per Stage II iteration.
pub fn pixel_budget(n_rays: usize, n_r: usize) -> usize {
    n_rays / n_r.max(1)
}

fn merge_surfel_grads(count: usize, parts: impl IntoIterator<Item = Vec<(usize, SurfelGrad)>>) -> Vec<SurfelGrad> {
    let mut out = vec![SurfelGrad::default(); count];
    for part in parts {
        for (i, g) in part {
            out[i].accumulate(&g);
        }
    }
    out
}

fn check_views(data: &Dataset) -> Result<()> {
    if data.views.is_empty() {
        return Err(Error::Dataset("no views".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage I.

/// Losses and per-pixel gradients of one Stage I forward pass.
struct Stage1Pass {
    terms: LossTerms,
    g_color: Vec<Rgb>,
    g_normal: Vec<V3>,
    g_point: Vec<V3>,
    g_opacity: Vec<f64>,
    g_depth: Vec<f64>,
    distortion_scale: f64,
    radiance: Vec<Option<Rgb>>,
}

fn stage1_losses(
    view: &View,
    rendered: &crate::splat::RenderedView,
    env: &EnvironmentLight,
    shading: &Shading,
    cfg: &Config,
    priors: bool,
) -> Stage1Pass {
    let w = &cfg.stage1.weights;
    let gb = &rendered.gbuffer;
    let (width, height) = (gb.width, gb.height);
    let n = gb.pixels.len();
    let sps: Vec<_> = gb.pixels.iter().map(|p| p.shading()).collect();
    let radiance: Vec<Option<Rgb>> = sps.par_iter().map(|s| s.as_ref().map(|s| env.shade(s, &shading.brdf).total())).collect();
    let colors: Vec<Rgb> = gb.pixels.iter().zip(&radiance).map(|(p, l)| over_background(p, *l, &shading.background)).collect();
    let mut terms = LossTerms::default();

    let lc = loss_color(&colors, &view.image.data, None);
    terms.c = lc.value;

    let normals: Vec<V3> = sps.iter().map(|s| s.as_ref().map_or(V3::zeros(), |s| s.normal)).collect();
    let points: Vec<V3> = sps.iter().map(|s| s.as_ref().map_or(V3::zeros(), |s| s.position)).collect();
    let views: Vec<V3> = gb.pixels.iter().map(|p| p.view_dir).collect();
    let fg: Vec<bool> = (0..n).map(|i| view.mask[i] && gb.pixels[i].is_foreground()).collect();

    let mut g_normal = vec![V3::zeros(); n];
    let mut g_point = vec![V3::zeros(); n];
    if w.n > 0.0 {
        let (ln, gp) = loss_normal_consistency(&normals, &points, &views, width, height, &fg);
        terms.n = ln.value;
        for i in 0..n {
            g_normal[i] += ln.grad[i] * w.n;
            g_point[i] += gp[i] * w.n;
        }
    }
    let opacity: Vec<f64> = gb.pixels.iter().map(|p| p.opacity).collect();
    let lo = loss_opacity_bce(&opacity, &view.mask);
    terms.o = lo.value;
    let g_opacity: Vec<f64> = lo.grad.iter().map(|g| g * w.o).collect();

    if w.smooth > 0.0 {
        let field: Vec<f64> = normals.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let ls = loss_smooth(&field, 3, width, height, &view.image.data, Some(&fg));
        terms.smooth = ls.value;
        for i in 0..n {
            g_normal[i] += V3::new(ls.grad[3 * i], ls.grad[3 * i + 1], ls.grad[3 * i + 2]) * w.smooth;
        }
    }

    let mut g_depth = vec![0.0; n];
    if let (true, Some(p)) = (priors, &view.priors) {
        if w.geo_n > 0.0 {
            let prior: Vec<Option<V3>> = (0..n).map(|i| if fg[i] { p.normals[i] } else { None }).collect();
            let lg = loss_normal_prior(&normals, &prior, w.geo_n_lambda);
            terms.geo_n = lg.value;
            for i in 0..n {
                g_normal[i] += lg.grad[i] * w.geo_n;
            }
        }
        if w.geo_d > 0.0 {
            let depth: Vec<f64> = gb.pixels.iter().map(|p| if p.opacity > 1e-8 { p.depth / p.opacity } else { 0.0 }).collect();
            let valid: Vec<bool> = (0..n).map(|i| fg[i] && p.depth[i].is_some()).collect();
            let prior: Vec<f64> = p.depth.iter().map(|d| d.unwrap_or(0.0)).collect();
            let ld = loss_depth_scale_invariant(&depth, &prior, &valid);
            terms.geo_d = ld.loss.value;
            for i in 0..n {
                g_depth[i] = ld.loss.grad[i] * w.geo_d;
            }
        }
    }

    let mut distortion_scale = 0.0;
    if cfg.stage1.depth_distortion && w.d > 0.0 {
        let idx: Vec<usize> = (0..n).filter(|&i| view.mask[i]).collect();
        if !idx.is_empty() {
            let sum: f64 = idx.iter().map(|&i| loss_distortion(&rendered.contributions[i]).0).sum();
            terms.d = sum / idx.len() as f64;
            distortion_scale = w.d / idx.len() as f64;
        }
    }

    Stage1Pass { terms, g_color: lc.grad, g_normal, g_point, g_opacity, g_depth, distortion_scale, radiance }
}

/// Fits geometry, provisional materials and the light under split-sum
/// shading.
pub fn run_stage1(model: &mut Model, data: &Dataset, cfg: &Config, shading: &Shading, out: Option<Outputs<'_>>) -> Result<StageReport> {
    check_views(data)?;
    let s1 = &cfg.stage1;
    let priors = s1.priors && data.has_priors();
    if s1.priors && !data.has_priors() {
        warn!("stage I: prior maps unavailable, geometry priors off");
    }
    let extent = model.scene.scale().max(1e-6);
    let rates = [
        (SurfelGroup::Position, s1.lr.position * extent),
        (SurfelGroup::Rotation, s1.lr.rotation),
        (SurfelGroup::Scale, s1.lr.scale),
        (SurfelGroup::Opacity, s1.lr.opacity),
        (SurfelGroup::Albedo, s1.lr.albedo),
        (SurfelGroup::Metallic, s1.lr.metallic),
        (SurfelGroup::Roughness, s1.lr.roughness),
    ];
    let mut opt = SurfelOptimizer::new(model.scene.len(), &rates, &cfg.adam);
    let mut light_adam = Adam::new(model.light.latent.len() * 3, s1.lr.light, &cfg.adam);
    let mut env = shading.environment(model.light.radiance());
    let mut guard = DivergenceGuard::new(cfg.divergence);
    let mut schedule = ViewSchedule::new(data.views.len(), cfg.seed);
    let mut report = StageReport::default();

    for it in 0..s1.iterations {
        let v = schedule.next_view();
        let view = &data.views[v];
        let cam = &view.camera;
        let splat = SplatScene::new(&model.scene);
        let bvh = SurfelBvh::build(&splat.frames);
        let rendered = render_view(&splat, &bvh, cam, shading.options);
        let pass = stage1_losses(view, &rendered, &env, shading, cfg, priors);
        let total = stage1_total(&pass.terms, &cfg.stage1.weights).total;
        report.log.push(LogRow { iteration: it, view: v, total, terms: pass.terms });
        guard.observe(it, total)?;

        let gb = &rendered.gbuffer;
        let bg = shading.background;
        let parts: Vec<(Vec<(usize, SurfelGrad)>, LightGrad)> = chunks(gb.pixels.len())
            .into_par_iter()
            .map(|range| {
                let mut lg = env.grad_buffer();
                let mut grads = Vec::new();
                for i in range {
                    let px = &gb.pixels[i];
                    let mut gp = GPixelGrad::default();
                    if let (Some(sp), Some(l)) = (px.shading(), pass.radiance[i]) {
                        let gc = pass.g_color[i];
                        let mut spg = ShadingPointGrad { normal: pass.g_normal[i], position: pass.g_point[i], ..Default::default() };
                        if gc != Rgb::zeros() {
                            let sg = env.shade_backward(&sp, &shading.brdf, &(gc * px.opacity), Some(&mut lg));
                            spg.albedo = sg.albedo;
                            spg.metallic = sg.metallic;
                            spg.roughness = sg.roughness;
                            spg.normal += sg.normal;
                        }
                        gp = px.shading_backward(&spg);
                        gp.opacity += gc.dot(&(l - bg));
                    }
                    gp.opacity += pass.g_opacity[i];
                    let gd = pass.g_depth[i];
                    if gd != 0.0 && px.opacity > 1e-8 {
                        gp.depth += gd / px.opacity;
                        gp.opacity -= gd * px.depth / (px.opacity * px.opacity);
                    }
                    let contribs = &rendered.contributions[i];
                    let extra = (pass.distortion_scale > 0.0 && view.mask[i] && contribs.len() > 1).then(|| {
                        let (_, g) = loss_distortion(contribs);
                        g.into_iter()
                            .map(|c| ContributionGrad { weight: c.weight * pass.distortion_scale, t: c.t * pass.distortion_scale })
                            .collect::<Vec<_>>()
                    });
                    if gp.is_zero() && extra.is_none() {
                        continue;
                    }
                    let ray = cam.pixel_ray(i % cam.width, i / cam.width);
                    grads.extend(backward_pixel(&ray, contribs, &splat, &gp, extra.as_deref(), true));
                }
                (grads, lg)
            })
            .collect();
        let mut light_grad = env.grad_buffer();
        let mut surfel_parts = Vec::with_capacity(parts.len());
        for (g, lg) in parts {
            light_grad.accumulate(&lg);
            surfel_parts.push(g);
        }
        let grads = merge_surfel_grads(model.scene.len(), surfel_parts);
        drop(splat);
        opt.step(&mut model.scene, &grads);
        step_light(model, &mut light_adam, &env.base_gradient(&light_grad));

        if (it + 1) % s1.refilter_every.max(1) == 0 {
            env.rebuild(model.light.radiance());
        } else {
            env.update_base(model.light.radiance());
        }
        if s1.prune_every > 0 && (it + 1) % s1.prune_every == 0 {
            let keep: Vec<bool> = model.scene.surfels.iter().map(|s| s.opacity >= s1.prune_threshold).collect();
            let removed = keep.iter().filter(|k| !**k).count();
            if removed > 0 && removed < keep.len() {
                let mut k = keep.iter();
                model.scene.surfels.retain(|_| *k.next().unwrap());
                opt.retain(&keep);
                report.pruned += removed;
                info!("stage I: pruned {removed} surfels at iteration {}", it + 1);
            }
        }
        if s1.log_every > 0 && (it + 1) % s1.log_every == 0 {
            info!("stage I {:>6}: loss {:.5} (c {:.5})", it + 1, total, pass.terms.c);
        }
        if let Some(o) = &out {
            if s1.checkpoint_every > 0 && (it + 1) % s1.checkpoint_every == 0 {
                o.checkpoint(model, it + 1)?;
            }
        }
    }
    report.nonfinite_grads = opt.nonfinite() + light_adam.nonfinite;
    if let Some(o) = &out {
        o.losses(&report.log)?;
    }
    Ok(report)
}

/// Stage I loss terms of the current model, averaged over every view.
pub fn geometry_terms(model: &Model, data: &Dataset, cfg: &Config, shading: &Shading) -> Result<LossTerms> {
    check_views(data)?;
    let priors = cfg.stage1.priors && data.has_priors();
    let env = shading.environment(model.light.radiance());
    let splat = SplatScene::new(&model.scene);
    let bvh = SurfelBvh::build(&splat.frames);
    let mut sum = LossTerms::default();
    for view in &data.views {
        let rendered = render_view(&splat, &bvh, &view.camera, shading.options);
        let t = stage1_losses(view, &rendered, &env, shading, cfg, priors).terms;
        sum.c += t.c;
        sum.n += t.n;
        sum.o += t.o;
        sum.d += t.d;
        sum.smooth += t.smooth;
        sum.geo_n += t.geo_n;
        sum.geo_d += t.geo_d;
    }
    let k = data.views.len() as f64;
    Ok(LossTerms {
        c: sum.c / k,
        n: sum.n / k,
        o: sum.o / k,
        d: sum.d / k,
        smooth: sum.smooth / k,
        geo_n: sum.geo_n / k,
        geo_d: sum.geo_d / k,
        light: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Stage II.

/// Monte Carlo settings of Stage II.
pub fn stage2_mc(cfg: &Config) -> Result<McSettings> {
    let s2 = &cfg.stage2;
    let mut mc = McSettings::even(s2.n_r, cfg.seed, s2.strategy)?;
    mc.visibility = s2.visibility;
    mc.indirect = s2.indirect && s2.visibility;
    Ok(mc)
}

fn material_field(gb: &crate::splat::GBuffer) -> Vec<f64> {
    gb.pixels
        .iter()
        .flat_map(|p| match p.shading() {
            Some(s) => [s.albedo.x, s.albedo.y, s.albedo.z, s.roughness, s.metallic],
            None => [0.0; 5],
        })
        .collect()
}

/// Fits materials and light with geometry frozen. Each iteration shades
/// `floor(n_rays / n_r)` foreground pixels of one view.
pub fn run_stage2(model: &mut Model, data: &Dataset, cfg: &Config, shading: &Shading, out: Option<Outputs<'_>>) -> Result<StageReport> {
    check_views(data)?;
    let s2 = &cfg.stage2;
    let w = &s2.weights;
    let mc = stage2_mc(cfg)?;
    let budget_pixels = pixel_budget(s2.n_rays, s2.n_r);
    let rates =
        [(SurfelGroup::Albedo, s2.lr.albedo), (SurfelGroup::Metallic, s2.lr.metallic), (SurfelGroup::Roughness, s2.lr.roughness)];
    let mut opt = SurfelOptimizer::new(model.scene.len(), &rates, &cfg.adam);
    let mut light_adam = Adam::new(model.light.latent.len() * 3, s2.lr.light, &cfg.adam);
    let mut env = shading.environment(model.light.radiance());
    let mut guard = DivergenceGuard::new(cfg.divergence);
    let mut schedule = ViewSchedule::new(data.views.len(), cfg.seed ^ 0x2);
    let mut report = StageReport::default();

    let (bvh, frozen) = {
        let splat = SplatScene::new(&model.scene);
        let bvh = SurfelBvh::build(&splat.frames);
        let frozen: Vec<FrozenView> = data.views.iter().map(|v| FrozenView::new(&splat, &bvh, &v.camera, shading.options)).collect();
        (bvh, frozen)
    };
    let scale = model.scene.scale();
    let train_light = !s2.freeze_light;

    for it in 0..s2.iterations {
        let v = schedule.next_view();
        let view = &data.views[v];
        let cam = &view.camera;
        let fv = &frozen[v];
        let splat = SplatScene::new(&model.scene);
        let tracer = Tracer::new(&splat, &bvh, scale);
        let gb = recomposite(&splat, cam, &fv.rendered.contributions);
        let fg_mask: Vec<bool> = gb.pixels.iter().zip(&view.mask).map(|(p, &m)| m && p.is_foreground()).collect();
        let pool: Vec<usize> = (0..gb.pixels.len()).filter(|&i| fg_mask[i]).collect();
        let mut rng = iteration_rng(cfg.seed, 2, it);
        let picked = sample_pixels(&pool, budget_pixels, &mut rng);
        let p = picked.len();
        let mut terms = LossTerms::default();

        // Monte Carlo shading and per-pixel losses.
        let key_base = (v as u64) << 32;
        let shaded: Vec<_> = picked
            .par_iter()
            .map(|&i| {
                let px = &gb.pixels[i];
                let est = estimate_pixel(px, &fv.exclude[i], &tracer, &env, &shading.brdf, &mc, key_base | i as u64, it as u64);
                let color = over_background(px, est.as_ref().map(|e| e.pbr()), &shading.background);
                (est, color)
            })
            .collect();
        let scale_c = if p > 0 { 1.0 / (3 * p) as f64 } else { 0.0 };
        let mut light_terms = 0usize;
        let mut ups = Vec::with_capacity(p);
        let mut light_ups = Vec::with_capacity(p);
        for (k, &i) in picked.iter().enumerate() {
            let d = shaded[k].1 - view.image.data[i];
            terms.c += (d.x.abs() + d.y.abs() + d.z.abs()) * scale_c;
            ups.push(d.map(|x| if x > 0.0 { scale_c } else if x < 0.0 { -scale_c } else { 0.0 }));
            let lw = shaded[k].0.as_ref().and_then(|e| e.diffuse_incident());
            light_ups.push(lw.map(|l| {
                let (val, g) = loss_light_white(&l);
                terms.light += val;
                light_terms += 1;
                g
            }));
        }
        if light_terms > 0 {
            terms.light /= light_terms as f64;
        }
        let light_scale = if light_terms > 0 { w.light / light_terms as f64 } else { 0.0 };

        // Edge-aware smoothness of the material maps over the whole view.
        let field = material_field(&gb);
        let ls = loss_smooth(&field, 5, gb.width, gb.height, &view.image.data, Some(&fg_mask));
        terms.smooth = ls.value;
        let total = stage2_total(&terms, w).total;
        report.log.push(LogRow { iteration: it, view: v, total, terms });
        guard.observe(it, total)?;

        // Per-pixel G-buffer gradients: colour and light prior on the
        // sampled pixels, smoothness everywhere.
        let mut gpix: Vec<Option<GPixelGrad>> = vec![None; gb.pixels.len()];
        let parts: Vec<(Vec<(usize, ShadingPointGrad)>, Option<LightGrad>)> = chunks(p)
            .into_par_iter()
            .map(|range| {
                let mut lg = train_light.then(|| env.grad_buffer());
                let mut res = Vec::with_capacity(range.len());
                for k in range {
                    let i = picked[k];
                    let px = &gb.pixels[i];
                    let (Some(est), Some(sp)) = (shaded[k].0.as_ref(), px.shading()) else { continue };
                    let mg = estimate_backward(est, &sp, &shading.brdf, &env, &(ups[k] * px.opacity), lg.as_mut());
                    if let (Some(g), Some(lg)) = (light_ups[k], lg.as_mut()) {
                        let recs: Vec<_> = est.diffuse_incident_records().collect();
                        let s = light_scale / recs.len() as f64;
                        for r in recs {
                            env.radiance_backward(&r.direction, &(g * (s * r.incident.visibility)), lg);
                        }
                    }
                    res.push((i, ShadingPointGrad { albedo: mg.albedo, metallic: mg.metallic, roughness: mg.roughness, ..Default::default() }));
                }
                (res, lg)
            })
            .collect();
        let mut light_grad = env.grad_buffer();
        let mut sp_grads: Vec<ShadingPointGrad> = vec![ShadingPointGrad::default(); gb.pixels.len()];
        for (res, lg) in parts {
            for (i, g) in res {
                let t = &mut sp_grads[i];
                t.albedo += g.albedo;
                t.metallic += g.metallic;
                t.roughness += g.roughness;
            }
            if let Some(lg) = lg {
                light_grad.accumulate(&lg);
            }
        }
        if w.smooth > 0.0 && ls.count > 0 {
            for (i, t) in sp_grads.iter_mut().enumerate() {
                let g = &ls.grad[5 * i..5 * i + 5];
                t.albedo += Rgb::new(g[0], g[1], g[2]) * w.smooth;
                t.roughness += g[3] * w.smooth;
                t.metallic += g[4] * w.smooth;
            }
        }
        for (i, t) in sp_grads.iter().enumerate() {
            if t.albedo != Rgb::zeros() || t.metallic != 0.0 || t.roughness != 0.0 {
                gpix[i] = Some(gb.pixels[i].shading_backward(t));
            }
        }
        let surfel_parts: Vec<Vec<(usize, SurfelGrad)>> = chunks(gpix.len())
            .into_par_iter()
            .map(|range| {
                let mut out = Vec::new();
                for i in range {
                    if let Some(g) = &gpix[i] {
                        let ray = cam.pixel_ray(i % cam.width, i / cam.width);
                        out.extend(backward_pixel(&ray, &fv.rendered.contributions[i], &splat, g, None, false));
                    }
                }
                out
            })
            .collect();
        let grads = merge_surfel_grads(model.scene.len(), surfel_parts);
        drop(tracer);
        drop(splat);
        opt.step(&mut model.scene, &grads);
        if train_light {
            step_light(model, &mut light_adam, &env.base_gradient(&light_grad));
            if (it + 1) % s2.refilter_every.max(1) == 0 {
                env.rebuild(model.light.radiance());
            } else {
                env.update_base(model.light.radiance());
            }
        }
        if s2.log_every > 0 && (it + 1) % s2.log_every == 0 {
            info!("stage II {:>6}: loss {:.5} (c {:.5}, {p} px)", it + 1, total, terms.c);
        }
        if let Some(o) = &out {
            if s2.checkpoint_every > 0 && (it + 1) % s2.checkpoint_every == 0 {
                o.checkpoint(model, it + 1)?;
            }
        }
    }
    report.nonfinite_grads = opt.nonfinite() + light_adam.nonfinite;
    if let Some(o) = &out {
        o.losses(&report.log)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Compensation stage.

/// Frozen inputs of one foreground pixel.
#[derive(Clone, Debug)]
pub struct CompPixel {
    pub index: usize,
    pub pbr: Rgb,
    pub feature: [f64; crate::surfel::FEATURE_DIM],
    pub normal: V3,
    pub view_dir: V3,
    pub roughness: f64,
    pub opacity: f64,
}

/// Physically based radiance of every foreground pixel of each view,
/// computed once with the frozen model.
pub fn comp_cache(model: &Model, data: &Dataset, cfg: &Config, shading: &Shading) -> Result<Vec<Vec<CompPixel>>> {
    let mc = McSettings::even(cfg.speccomp.n_r, cfg.seed, cfg.stage2.strategy)?;
    let env = shading.environment(model.light.radiance());
    let splat = SplatScene::new(&model.scene);
    let bvh = SurfelBvh::build(&splat.frames);
    let tracer = Tracer::new(&splat, &bvh, model.scene.scale());
    Ok(data
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let fv = FrozenView::new(&splat, &bvh, &view.camera, shading.options);
            let gb = &fv.rendered.gbuffer;
            (0..gb.pixels.len())
                .into_par_iter()
                .filter(|&i| view.mask[i] && gb.pixels[i].is_foreground())
                .filter_map(|i| {
                    let px = &gb.pixels[i];
                    let sp = px.shading()?;
                    let est = estimate_pixel(px, &fv.exclude[i], &tracer, &env, &shading.brdf, &mc, ((v as u64) << 32) | i as u64, 0)?;
                    Some(CompPixel {
                        index: i,
                        pbr: est.pbr(),
                        feature: pixel_feature(px),
                        normal: sp.normal,
                        view_dir: sp.view_dir,
                        roughness: sp.roughness,
                        opacity: px.opacity,
                    })
                })
                .collect()
        })
        .collect())
}

/// Adam states of the compensation network.
struct CompOptimizer {
    grid: Adam,
    layers: Vec<(Adam, Adam)>,
}

/// Fits the spherical grid and MLP on top of the frozen physically based
/// render; nothing else changes.
pub fn run_speccomp(model: &mut Model, data: &Dataset, cfg: &Config, shading: &Shading, out: Option<Outputs<'_>>) -> Result<StageReport> {
    check_views(data)?;
    let sc_cfg = &cfg.speccomp;
    let mut report = StageReport::default();
    if model.speccomp.is_none() {
        model.speccomp = Some(SpecComp::new(sc_cfg.grid_width, sc_cfg.grid_height, sc_cfg.grid_levels, cfg.seed));
    }
    if sc_cfg.iterations == 0 {
        return Ok(report);
    }
    let cache = comp_cache(model, data, cfg, shading)?;
    let comp = model.speccomp.as_mut().expect("spec-comp present");
    let mut opt = CompOptimizer {
        grid: Adam::new(comp.grid.base().len(), sc_cfg.lr_grid, &cfg.adam),
        layers: comp
            .mlp
            .layers
            .iter()
            .map(|l| (Adam::new(l.weights.len(), sc_cfg.lr_mlp, &cfg.adam), Adam::new(l.bias.len(), sc_cfg.lr_mlp, &cfg.adam)))
            .collect(),
    };
    let mut guard = DivergenceGuard::new(cfg.divergence);
    let mut schedule = ViewSchedule::new(data.views.len(), cfg.seed ^ 0x3);
    let bg = shading.background;

    for it in 0..sc_cfg.iterations {
        let v = schedule.next_view();
        let view = &data.views[v];
        let pool: Vec<usize> = (0..cache[v].len()).collect();
        let mut rng = iteration_rng(cfg.seed, 3, it);
        let picked = sample_pixels(&pool, sc_cfg.pixels, &mut rng);
        let scale = if picked.is_empty() { 0.0 } else { 1.0 / (3 * picked.len()) as f64 };
        let comp_ref: &SpecComp = comp;
        let parts: Vec<(f64, MlpGrad, Vec<(GridQuery, Vec<f64>)>)> = chunks(picked.len())
            .into_par_iter()
            .map(|range| {
                let mut mg = comp_ref.mlp.zero_grad();
                let mut grid = Vec::with_capacity(range.len());
                let mut value = 0.0;
                for k in range {
                    let cp = &cache[v][picked[k]];
                    let (lc, trace) = comp_ref.forward(&cp.feature, &cp.normal, &cp.view_dir, cp.roughness);
                    let color = (cp.pbr + lc) * cp.opacity + bg * (1.0 - cp.opacity);
                    let d = color - view.image.data[cp.index];
                    value += (d.x.abs() + d.y.abs() + d.z.abs()) * scale;
                    let up = d.map(|x| if x > 0.0 { scale } else if x < 0.0 { -scale } else { 0.0 }) * cp.opacity;
                    grid.push(comp_ref.backward_split(&trace, &up, &mut mg));
                }
                (value, mg, grid)
            })
            .collect();
        let mut mlp_grad = comp.mlp.zero_grad();
        let mut grid_grad = comp.grid.zero_gradient();
        let mut value = 0.0;
        for (val, mg, grid) in parts {
            value += val;
            mlp_grad.accumulate(&mg);
            for (q, dh) in grid {
                comp.grid.lookup_backward(&q, &dh, &mut grid_grad);
            }
        }
        comp.grid.fold_gradient(&mut grid_grad);
        let terms = LossTerms { c: value, ..LossTerms::default() };
        report.log.push(LogRow { iteration: it, view: v, total: value, terms });
        guard.observe(it, value)?;

        opt.grid.update(comp.grid.base_mut(), &grid_grad[0]);
        comp.grid.rebuild_mips();
        for ((l, (aw, ab)), (gw, gb)) in comp.mlp.layers.iter_mut().zip(&mut opt.layers).zip(mlp_grad.weights.iter().zip(&mlp_grad.bias)) {
            aw.update(&mut l.weights, gw);
            ab.update(&mut l.bias, gb);
        }
        if sc_cfg.log_every > 0 && (it + 1) % sc_cfg.log_every == 0 {
            info!("spec-comp {:>6}: L1 {:.5}", it + 1, value);
        }
    }
    report.nonfinite_grads = opt.grid.nonfinite + opt.layers.iter().map(|(a, b)| a.nonfinite + b.nonfinite).sum::<u64>();
    if let Some(o) = &out {
        o.losses(&report.log)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Rendering a fitted model.

/// Relighting: Monte Carlo shading under `env` with `n_d + n_s` samples per
/// pixel and the compensation term off. View `k` uses sample counter `k`.
pub fn relight(model: &Model, env: &EnvironmentLight, shading: &Shading, cameras: &[Camera], cfg: &Config) -> Result<Vec<Image>> {
    let mc = McSettings {
        budget: SampleBudget::new(cfg.relight.n_d, cfg.relight.n_s, cfg.seed)?,
        strategy: crate::mc::Strategy::Mis,
        visibility: true,
        indirect: true,
    };
    Ok(cameras.iter().enumerate().map(|(k, cam)| render_pbr(&model.scene, env, shading, cam, &mc, k as u64, None).image).collect())
}

/// Reconstruction-mode rendering under the learned light (compensation on
/// when present).
pub fn render_reconstruction(model: &Model, shading: &Shading, cameras: &[Camera], cfg: &Config) -> Result<Vec<Image>> {
    let env = shading.environment(model.light.radiance());
    let mc = McSettings {
        budget: SampleBudget::new(cfg.relight.n_d, cfg.relight.n_s, cfg.seed)?,
        strategy: crate::mc::Strategy::Mis,
        visibility: true,
        indirect: true,
    };
    let comp = model.speccomp.as_ref().map(|s| (s, RenderMode::Reconstruction));
    Ok(cameras.iter().enumerate().map(|(k, cam)| render_pbr(&model.scene, &env, shading, cam, &mc, k as u64, comp).image).collect())
}

/// Runs every enabled stage in order.
pub fn fit(model: &mut Model, data: &Dataset, cfg: &Config, shading: &Shading, dir: Option<&Path>) -> Result<Vec<StageReport>> {
    let out = |stage| dir.map(|d| Outputs { dir: d, stage });
    let mut reports = vec![run_stage1(model, data, cfg, shading, out("stage1"))?, run_stage2(model, data, cfg, shading, out("stage2"))?];
    if cfg.speccomp.enabled {
        reports.push(run_speccomp(model, data, cfg, shading, out("speccomp"))?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LearnedLight;

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut a = Adam::new(2, 0.01, &cfg);
        let mut p = [0.5, 0.5];
        a.update(&mut p, &[1.0, 0.0]);
        // Step one: m_hat = g, v_hat = g^2, so the update is lr g / (|g| + eps).
        assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[1], 0.5);
    }

    #[test]
    fn adam_zeroes_nonfinite_gradients() {
        let mut a = Adam::new(2, 0.1, &AdamConfig::default());
        let mut p = [1.0, 2.0];
        a.update(&mut p, &[f64::NAN, f64::INFINITY]);
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(a.nonfinite, 2);
    }

    #[test]
    fn clamped_metallic_stays_at_one() {
        let mut scene = Scene::fibonacci_sphere(3, V3::zeros(), 1.0);
        for s in &mut scene.surfels {
            s.metallic = 1.0;
        }
        let mut opt = SurfelOptimizer::new(3, &[(SurfelGroup::Metallic, 0.1)], &AdamConfig::default());
        let grads = vec![SurfelGrad { metallic: -5.0, ..SurfelGrad::default() }; 3];
        for _ in 0..3 {
            opt.step(&mut scene, &grads);
        }
        assert!(scene.surfels.iter().all(|s| s.metallic == 1.0));
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let mut scene = Scene::fibonacci_sphere(20, V3::new(0.1, 0.2, 0.3), 0.9);
        let before = scene.clone();
        let mut opt = SurfelOptimizer::new(20, &[(SurfelGroup::Albedo, 0.1)], &AdamConfig::default());
        let grads: Vec<SurfelGrad> = (0..20)
            .map(|k| SurfelGrad { center: V3::repeat(1.0), rotation: [1.0; 4], albedo: Rgb::repeat(k as f64 - 10.0), ..SurfelGrad::default() })
            .collect();
        opt.step(&mut scene, &grads);
        for (a, b) in scene.surfels.iter().zip(&before.surfels) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.log_scale, b.log_scale);
            assert_eq!(a.opacity, b.opacity);
        }
        assert!(scene.surfels.iter().zip(&before.surfels).any(|(a, b)| a.albedo != b.albedo));
    }

    #[test]
    fn adam_retain_keeps_surviving_moments() {
        let mut a = Adam::new(6, 0.1, &AdamConfig::default());
        let mut p = [0.0; 6];
        a.update(&mut p, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        a.retain(2, &[true, false, true]);
        assert_eq!(a.m.len(), 4);
        assert!((a.m[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pixel_budget_is_floor() {
        assert_eq!(pixel_budget(1 << 18, 32), 8192);
        assert_eq!(pixel_budget(100, 32), 3);
        assert_eq!(pixel_budget(31, 32), 0);
        let pool: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_pixels(&pool, pixel_budget(640, 32), &mut rng);
        assert_eq!(s.len(), 20);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 20);
    }

    #[test]
    fn divergence_guard_trips_after_patience() {
        let mut g = DivergenceGuard::new(DivergenceConfig { factor: 10.0, patience: 3 });
        g.observe(0, 1.0).unwrap();
        g.observe(1, 11.0).unwrap();
        g.observe(2, 5.0).unwrap();
        g.observe(3, 11.0).unwrap();
        g.observe(4, 11.0).unwrap();
        assert!(matches!(g.observe(5, f64::NAN), Err(Error::Diverged(_))));
    }

    #[test]
    fn view_schedule_covers_every_view_each_epoch() {
        let mut s = ViewSchedule::new(5, 9);
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..5).map(|_| s.next_view()).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn light_step_moves_latents_against_gradient() {
        let mut m = Model { scene: Scene::new(vec![]), light: LearnedLight::constant(2, 0.5), speccomp: None };
        let mut a = Adam::new(m.light.latent.len() * 3, 0.01, &AdamConfig::default());
        let before = m.light.latent[0].x;
        let mut g = vec![Rgb::zeros(); m.light.latent.len()];
        g[0] = Rgb::new(1.0, 0.0, 0.0);
        step_light(&mut m, &mut a, &g);
        assert!(m.light.latent[0].x < before);
        assert_eq!(m.light.latent[1], Rgb::repeat(before));
    }
}
