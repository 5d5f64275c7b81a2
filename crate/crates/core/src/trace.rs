//! Secondary-ray tracing through the surfel set: a median-split BVH over the
//! 3-sigma disk bounds, transmittance visibility and one-bounce indirect
//! radiance.
//!
//! The BVH only enumerates candidate hits. Intersection, sorting and
//! compositing are shared with the brute-force path in [`crate::splat`], so
//! both produce bit-identical results.

use crate::brdf::Brdf;
use crate::envlight::EnvironmentLight;
use crate::math::{Rgb, V3};
use crate::splat::{
    facing_normal, ContributionList, Footprint, HitCollector, RawHit, ShadingPoint, SplatScene,
};
use crate::surfel::{ray_splat_intersect, Ray, SplatFrame};

/// Hit cap per secondary ray.
pub const MAX_HITS: usize = 32;
/// Secondary-ray origin offset as a fraction of the scene scale.
pub const RAY_BIAS_FRACTION: f64 = 1e-3;
const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: V3,
    pub max: V3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb { min: V3::repeat(f64::INFINITY), max: V3::repeat(f64::NEG_INFINITY) }
    }

    /// Bounds of the 3-sigma disk, padded by a relative epsilon so that
    /// rounding in the slab test never rejects a true hit.
    pub fn of_frame(frame: &SplatFrame) -> Self {
        let e = frame.half_extent();
        let pad = 1e-9 * (e.norm() + frame.center.norm()) + 1e-12;
        Aabb { min: frame.center - e - V3::repeat(pad), max: frame.center + e + V3::repeat(pad) }
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&o.min), max: self.max.sup(&o.max) }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= o.min[k] && self.max[k] >= o.max[k])
    }

    /// Slab test over `[ray.t_min, ray.t_max]`.
    pub fn hit(&self, ray: &Ray) -> bool {
        let mut t0 = ray.t_min;
        let mut t1 = ray.t_max;
        for k in 0..3 {
            let d = ray.direction[k];
            let o = ray.origin[k];
            if d == 0.0 {
                if o < self.min[k] || o > self.max[k] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[k] - o) * inv, (self.max[k] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

/// Binary BVH; children are always stored after their parent.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SurfelBvh {
    pub nodes: Vec<Node>,
    /// Surfel indices referenced by leaves.
    pub indices: Vec<usize>,
}

impl SurfelBvh {
    /// Median split on the axis of largest centroid extent. Deterministic:
    /// ties in the split coordinate are broken by surfel index.
    pub fn build(frames: &[SplatFrame]) -> Self {
        let mut bvh = SurfelBvh { nodes: Vec::new(), indices: (0..frames.len()).collect() };
        if frames.is_empty() {
            return bvh;
        }
        let boxes: Vec<Aabb> = frames.iter().map(Aabb::of_frame).collect();
        bvh.build_node(frames, &boxes, 0, frames.len());
        bvh
    }

    fn build_node(&mut self, frames: &[SplatFrame], boxes: &[Aabb], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        let bounds = self.indices[start..end].iter().fold(Aabb::empty(), |b, &i| b.union(&boxes[i]));
        self.nodes.push(Node { bounds, kind: NodeKind::Leaf { start, count: end - start } });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let (lo, hi) = self.indices[start..end].iter().fold(
            (V3::repeat(f64::INFINITY), V3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), &i| (lo.inf(&frames[i].center), hi.sup(&frames[i].center)),
        );
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        self.indices[start..end]
            .sort_by(|&a, &b| frames[a].center[axis].total_cmp(&frames[b].center[axis]).then(a.cmp(&b)));
        let mid = start + (end - start) / 2;
        let left = self.build_node(frames, boxes, start, mid);
        let right = self.build_node(frames, boxes, mid, end);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    /// Recomputes node bounds for moved surfels without changing topology.
    pub fn refit(&mut self, frames: &[SplatFrame]) {
        for id in (0..self.nodes.len()).rev() {
            let bounds = match self.nodes[id].kind {
                NodeKind::Leaf { start, count } => self.indices[start..start + count]
                    .iter()
                    .fold(Aabb::empty(), |b, &i| b.union(&Aabb::of_frame(&frames[i]))),
                NodeKind::Inner { left, right } => self.nodes[left].bounds.union(&self.nodes[right].bounds),
            };
            self.nodes[id].bounds = bounds;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf { .. })).count()
    }
}

impl HitCollector for SurfelBvh {
    fn collect_hits(&self, ray: &Ray, frames: &[SplatFrame], exclude: &[usize], out: &mut Vec<RawHit>) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !node.bounds.hit(ray) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &index in &self.indices[start..start + count] {
                        if exclude.contains(&index) {
                            continue;
                        }
                        if let Some(h) = ray_splat_intersect(ray, &frames[index]) {
                            out.push(RawHit { index, u: h.u, v: h.v, t: h.t });
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
    }
}

/// Visibility and indirect radiance along one secondary ray.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceResult {
    pub transmittance: f64,
    pub radiance: Rgb,
    pub contributions: ContributionList,
}

/// Bundles a scene, its hit collector and the tracing constants.
pub struct Tracer<'s, C: HitCollector + ?Sized> {
    pub scene: &'s SplatScene<'s>,
    pub collector: &'s C,
    pub ray_bias: f64,
    pub max_hits: usize,
}

impl<'s, C: HitCollector + ?Sized> Tracer<'s, C> {
    pub fn new(scene: &'s SplatScene<'s>, collector: &'s C, scene_scale: f64) -> Self {
        Tracer { scene, collector, ray_bias: RAY_BIAS_FRACTION * scene_scale, max_hits: MAX_HITS }
    }

    /// Secondary ray leaving `x` along `dir`, offset by the bias along the
    /// side of `normal` that `dir` points into.
    pub fn secondary_ray(&self, x: &V3, normal: &V3, dir: &V3) -> Ray {
        let side = if normal.dot(dir) >= 0.0 { 1.0 } else { -1.0 };
        Ray::new(x + normal * (side * self.ray_bias), *dir)
    }

    pub fn gather(&self, ray: &Ray, exclude: &[usize]) -> ContributionList {
        self.scene.gather(self.collector, ray, Footprint::None, exclude, Some(self.max_hits))
    }

    /// `T = prod (1 - a_i G_i)` over the first `max_hits` hits.
    pub fn trace_visibility(&self, ray: &Ray, exclude: &[usize]) -> f64 {
        self.gather(ray, exclude).transmittance
    }

    /// Visibility plus the composited split-sum radiance of the hit surfels.
    pub fn trace(&self, ray: &Ray, exclude: &[usize], light: &EnvironmentLight, brdf: &Brdf) -> TraceResult {
        let contributions = self.gather(ray, exclude);
        let mut radiance = Rgb::zeros();
        for c in &contributions.items {
            radiance += self.surfel_radiance(c.index, &ray.at(c.t), &ray.direction, light, brdf) * c.weight;
        }
        TraceResult { transmittance: contributions.transmittance, radiance, contributions }
    }

    pub fn trace_indirect(&self, ray: &Ray, exclude: &[usize], light: &EnvironmentLight, brdf: &Brdf) -> Rgb {
        self.trace(ray, exclude, light, brdf).radiance
    }

    /// Outgoing split-sum radiance of one surfel towards `-ray_dir`.
    pub fn surfel_radiance(&self, index: usize, x: &V3, ray_dir: &V3, light: &EnvironmentLight, brdf: &Brdf) -> Rgb {
        let s = &self.scene.surfels[index];
        let (normal, _) = facing_normal(&self.scene.frames[index], ray_dir);
        let sp = ShadingPoint {
            albedo: s.albedo,
            metallic: s.metallic,
            roughness: s.roughness,
            normal,
            position: *x,
            view_dir: -ray_dir,
        };
        light.shade(&sp, brdf).total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlight::{BrdfLut, PrefilterSettings};
    use crate::math::gray;
    use crate::splat::BruteForce;
    use crate::surfel::{Scene, Surfel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(rng: &mut ChaCha8Rng, count: usize) -> Scene {
        Scene::new(
            (0..count)
                .map(|_| {
                    let c = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let n = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    Surfel::facing(c, n.normalize(), rng.random_range(0.02..0.2), rng.random_range(0.02..0.2))
                        .with_opacity(rng.random_range(0.05..1.0))
                })
                .collect(),
        )
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let o = V3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let target = V3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        Ray::new(o, target - o)
    }

    fn disk(z: f64, opacity: f64) -> Surfel {
        Surfel::facing(V3::new(0.0, 0.0, z), V3::z(), 1.0, 1.0).with_opacity(opacity)
    }

    #[test]
    fn single_surfel_is_one_leaf() {
        let scene = Scene::new(vec![disk(0.0, 1.0)]);
        let bvh = SurfelBvh::build(&scene.frames());
        assert_eq!(bvh.nodes.len(), 1);
        assert_eq!(bvh.leaf_count(), 1);
        assert!(SurfelBvh::build(&[]).is_empty());
    }

    #[test]
    fn structure_invariants_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 200);
        let frames = scene.frames();
        let bvh = SurfelBvh::build(&frames);
        assert_eq!(bvh, SurfelBvh::build(&frames));
        let mut seen = vec![0; frames.len()];
        for node in &bvh.nodes {
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    assert!(count <= LEAF_SIZE);
                    for &i in &bvh.indices[start..start + count] {
                        seen[i] += 1;
                        assert!(node.bounds.contains(&Aabb::of_frame(&frames[i])));
                    }
                }
                NodeKind::Inner { left, right } => {
                    assert!(left > 0 && right > 0);
                    assert!(node.bounds.contains(&bvh.nodes[left].bounds));
                    assert!(node.bounds.contains(&bvh.nodes[right].bounds));
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn bvh_matches_brute_force_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 256);
        let splat = SplatScene::new(&scene);
        let bvh = SurfelBvh::build(&splat.frames);
        for _ in 0..1000 {
            let ray = random_ray(&mut rng);
            let a = splat.gather(&bvh, &ray, Footprint::None, &[], None);
            let b = splat.gather(&BruteForce, &ray, Footprint::None, &[], None);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn refit_tracks_moved_surfels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = random_scene(&mut rng, 64);
        let mut bvh = SurfelBvh::build(&scene.frames());
        for s in &mut scene.surfels {
            s.center += V3::new(0.3, -0.2, 0.1);
        }
        bvh.refit(&scene.frames());
        let splat = SplatScene::new(&scene);
        for _ in 0..300 {
            let ray = random_ray(&mut rng);
            assert_eq!(
                splat.gather(&bvh, &ray, Footprint::None, &[], None),
                splat.gather(&BruteForce, &ray, Footprint::None, &[], None)
            );
        }
    }

    #[test]
    fn visibility_examples() {
        let down = Ray::new(V3::new(0.0, 0.0, 5.0), -V3::z());
        let empty = Scene::new(vec![]);
        let splat = SplatScene::new(&empty);
        let bvh = SurfelBvh::build(&splat.frames);
        assert_eq!(Tracer::new(&splat, &bvh, 1.0).trace_visibility(&down, &[]), 1.0);

        let opaque = Scene::new(vec![disk(0.0, 1.0)]);
        let splat = SplatScene::new(&opaque);
        let bvh = SurfelBvh::build(&splat.frames);
        assert_eq!(Tracer::new(&splat, &bvh, 1.0).trace_visibility(&down, &[]), 0.0);

        let two = Scene::new(vec![disk(0.0, 0.5), disk(1.0, 0.5)]);
        let splat = SplatScene::new(&two);
        let bvh = SurfelBvh::build(&splat.frames);
        assert_eq!(Tracer::new(&splat, &bvh, 1.0).trace_visibility(&down, &[]), 0.25);
    }

    #[test]
    fn hit_cap_leaves_residual_transmittance() {
        let scene = Scene::new((0..40).map(|i| disk(i as f64 * 0.01, 0.1)).collect());
        let splat = SplatScene::new(&scene);
        let bvh = SurfelBvh::build(&splat.frames);
        let tracer = Tracer::new(&splat, &bvh, 1.0);
        let list = tracer.gather(&Ray::new(V3::new(0.0, 0.0, 5.0), -V3::z()), &[]);
        assert_eq!(list.len(), MAX_HITS);
        assert!((list.transmittance - 0.9f64.powi(MAX_HITS as i32)).abs() < 1e-12);
    }

    #[test]
    fn indirect_matches_direct_shading_of_hit() {
        let light = EnvironmentLight::constant(gray(1.0), 8, BrdfLut::bake(16, 256, 2), PrefilterSettings::default());
        let brdf = Brdf::default();
        let scene = Scene::new(vec![disk(0.0, 1.0).with_material(gray(1.0), 0.0, 1.0)]);
        let splat = SplatScene::new(&scene);
        let bvh = SurfelBvh::build(&splat.frames);
        let tracer = Tracer::new(&splat, &bvh, 1.0);
        let ray = Ray::new(V3::new(0.0, 0.0, 2.0), -V3::z());
        let got = tracer.trace_indirect(&ray, &[], &light, &brdf);
        let sp = ShadingPoint {
            albedo: gray(1.0),
            metallic: 0.0,
            roughness: 1.0,
            normal: V3::z(),
            position: V3::zeros(),
            view_dir: V3::z(),
        };
        let expect = light.shade(&sp, &brdf).total();
        assert!((got - expect).norm() < 1e-6);
        let miss = Ray::new(V3::new(0.0, 0.0, 2.0), V3::z());
        assert_eq!(tracer.trace_indirect(&miss, &[], &light, &brdf), Rgb::zeros());
    }

    #[test]
    fn biased_secondary_rays_do_not_self_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 64);
        let splat = SplatScene::new(&scene);
        let bvh = SurfelBvh::build(&splat.frames);
        let tracer = Tracer::new(&splat, &bvh, scene.scale());
        for (i, frame) in splat.frames.iter().enumerate() {
            for _ in 0..20 {
                let mut d = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if d.norm() < 1e-3 {
                    continue;
                }
                d = d.normalize();
                let x = frame.point(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let ray = tracer.secondary_ray(&x, &frame.normal, &d);
                let list = tracer.gather(&ray, &[]);
                assert!(list.items.iter().all(|c| c.index != i));
            }
        }
    }
}
