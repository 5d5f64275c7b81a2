//! The 2D Gaussian surfel primitive, rays, pinhole cameras and exact
//! ray-splat intersection.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{is_finite_v3, Rgb, V3};

/// Number of per-surfel feature channels blended into the feature map.
pub const FEATURE_DIM: usize = 16;
/// Contributions beyond `u^2 + v^2 > CUTOFF^2` are exactly zero.
pub const GAUSSIAN_CUTOFF: f64 = 3.0;
pub const PARALLEL_EPS: f64 = 1e-8;
pub const SCALE_FLOOR: f64 = 1e-6;
/// Screen-space low-pass standard deviation in pixels.
pub const LOWPASS_SIGMA_PX: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[inline]
pub fn log_scale_floor() -> f64 {
    SCALE_FLOOR.ln()
}

/// Oriented planar Gaussian disk with its material and feature attributes.
///
/// The tangent frame is stored as a (not necessarily normalized) quaternion
/// `[w, x, y, z]`, so the frame stays orthonormal under arbitrary updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub center: V3,
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity: f64,
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub feature: [f64; FEATURE_DIM],
}

impl Surfel {
    /// Builds a surfel from an explicit tangent frame. `tangent_v` is
    /// re-orthogonalized against `tangent_u`.
    pub fn from_frame(center: V3, tangent_u: V3, tangent_v: V3, scale_u: f64, scale_v: f64) -> Self {
        let tu = tangent_u.normalize();
        let tv = (tangent_v - tu * tu.dot(&tangent_v)).normalize();
        let n = tu.cross(&tv);
        let m = Matrix3::from_columns(&[tu, tv, n]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Surfel {
            center,
            rotation: [q.w, q.i, q.j, q.k],
            log_scale: [scale_u.max(SCALE_FLOOR).ln(), scale_v.max(SCALE_FLOOR).ln()],
            opacity: 1.0,
            albedo: Rgb::new(0.5, 0.5, 0.5),
            metallic: 0.0,
            roughness: 0.5,
            feature: [0.0; FEATURE_DIM],
        }
    }

    /// Disk centred at `center` whose normal is `normal`.
    pub fn facing(center: V3, normal: V3, scale_u: f64, scale_v: f64) -> Self {
        let n = normal.normalize();
        let (tu, tv) = crate::math::orthonormal_basis(&n);
        Self::from_frame(center, tu, tv, scale_u, scale_v)
    }

    pub fn with_material(mut self, albedo: Rgb, metallic: f64, roughness: f64) -> Self {
        self.albedo = albedo;
        self.metallic = metallic;
        self.roughness = roughness;
        self
    }

    pub fn with_opacity(mut self, opacity: f64) -> Self {
        self.opacity = opacity;
        self
    }

    pub fn scale_u(&self) -> f64 {
        self.log_scale[0].exp()
    }

    pub fn scale_v(&self) -> f64 {
        self.log_scale[1].exp()
    }

    pub fn frame(&self) -> SplatFrame {
        let r = rotation_matrix(&self.rotation);
        SplatFrame {
            center: self.center,
            tangent_u: r.column(0).into_owned(),
            tangent_v: r.column(1).into_owned(),
            normal: r.column(2).into_owned(),
            scale_u: self.scale_u(),
            scale_v: self.scale_v(),
        }
    }

    pub fn normal(&self) -> V3 {
        rotation_matrix(&self.rotation).column(2).into_owned()
    }

    /// Projects every attribute back into its admissible range.
    pub fn clamp_attributes(&mut self) {
        self.opacity = self.opacity.clamp(0.0, 1.0);
        for c in self.albedo.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        self.metallic = self.metallic.clamp(0.0, 1.0);
        self.roughness = self.roughness.clamp(0.0, 1.0);
        let floor = log_scale_floor();
        for s in self.log_scale.iter_mut() {
            *s = s.max(floor);
        }
    }
}

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`; its columns
/// are `(tangent_u, tangent_v, normal)`.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let len = Vector4::from(*q).norm();
    let (w, x, y, z) = (q[0] / len, q[1] / len, q[2] / len, q[3] / len);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the raw quaternion,
/// including the normalization step.
pub fn rotation_matrix_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let len = Vector4::from(*q).norm();
    let (w, x, y, z) = (q[0] / len, q[1] / len, q[2] / len, q[3] / len);
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gn = Vector4::new(dw, dx, dy, dz);
    let qn = Vector4::new(w, x, y, z);
    let proj = (gn - qn * qn.dot(&gn)) / len;
    [proj[0], proj[1], proj[2], proj[3]]
}

/// World-space geometry of one surfel, precomputed for intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatFrame {
    pub center: V3,
    pub tangent_u: V3,
    pub tangent_v: V3,
    pub normal: V3,
    pub scale_u: f64,
    pub scale_v: f64,
}

impl SplatFrame {
    /// World point at scaled local coordinates `(u, v)`.
    pub fn point(&self, u: f64, v: f64) -> V3 {
        self.center + self.tangent_u * (u * self.scale_u) + self.tangent_v * (v * self.scale_v)
    }

    /// Axis-aligned half extent of the `GAUSSIAN_CUTOFF`-sigma disk.
    pub fn half_extent(&self) -> V3 {
        let su = self.tangent_u * (self.scale_u * GAUSSIAN_CUTOFF);
        let sv = self.tangent_v * (self.scale_v * GAUSSIAN_CUTOFF);
        V3::new(
            su.x.hypot(sv.x),
            su.y.hypot(sv.y),
            su.z.hypot(sv.z),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: V3,
    pub direction: V3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    /// Ray over `(0, inf)`; the direction is normalized.
    pub fn new(origin: V3, direction: V3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
            t_min: 0.0,
            t_max: f64::INFINITY,
        }
    }

    pub fn with_bounds(mut self, t_min: f64, t_max: f64) -> Self {
        debug_assert!(t_min < t_max);
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn at(&self, t: f64) -> V3 {
        self.origin + self.direction * t
    }
}

/// Intersection of a ray with a surfel plane in scaled local coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatHit {
    pub u: f64,
    pub v: f64,
    pub t: f64,
}

/// Exact ray/plane intersection without the radial cutoff.
#[inline]
pub fn plane_hit(ray: &Ray, frame: &SplatFrame) -> Option<SplatHit> {
    let denom = ray.direction.dot(&frame.normal);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (frame.center - ray.origin).dot(&frame.normal) / denom;
    if !(t > ray.t_min && t < ray.t_max) {
        return None;
    }
    let p = ray.origin + ray.direction * t - frame.center;
    Some(SplatHit {
        u: p.dot(&frame.tangent_u) / frame.scale_u,
        v: p.dot(&frame.tangent_v) / frame.scale_v,
        t,
    })
}

/// Ray-splat intersection; `None` for parallel rays, out-of-range `t`, or
/// points beyond the 3-sigma cutoff.
#[inline]
pub fn ray_splat_intersect(ray: &Ray, frame: &SplatFrame) -> Option<SplatHit> {
    let hit = plane_hit(ray, frame)?;
    if hit.u * hit.u + hit.v * hit.v > GAUSSIAN_CUTOFF * GAUSSIAN_CUTOFF {
        return None;
    }
    Some(hit)
}

#[inline]
pub fn gaussian_weight(u: f64, v: f64) -> f64 {
    (-0.5 * (u * u + v * v)).exp()
}

/// Gaussian weight with the screen-space low-pass floor: the larger of the
/// surfel Gaussian and a Gaussian of standard deviation `footprint` (in the
/// surfel's UV units). Returns `(weight, d_weight/du, d_weight/dv)`.
#[inline]
pub fn filtered_weight_grad(u: f64, v: f64, footprint: f64) -> (f64, f64, f64) {
    let rho2 = u * u + v * v;
    let g = (-0.5 * rho2).exp();
    if footprint > 1.0 {
        let inv = 1.0 / (footprint * footprint);
        let lp = (-0.5 * rho2 * inv).exp();
        if lp > g {
            return (lp, -u * inv * lp, -v * inv * lp);
        }
    }
    (g, -u * g, -v * g)
}

#[inline]
pub fn filtered_weight(u: f64, v: f64, footprint: f64) -> f64 {
    filtered_weight_grad(u, v, footprint).0
}

/// Pinhole camera. Camera space looks down `+z` with `+x` right and `+y`
/// down; `rotation`/`translation` map world points into camera space.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: V3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, horizontal field of view `fov_x`.
    pub fn look_at(eye: V3, target: V3, up: V3, fov_x: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera {
            translation: -(rotation * eye),
            rotation,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Camera from a 4x4 row-major world-from-camera matrix in the OpenGL /
    /// Blender convention (camera looks down `-z`, `+y` up).
    pub fn from_world_from_camera_gl(m: &[[f64; 4]; 4], fov_x: f64, width: usize, height: usize) -> Self {
        let r_wc_gl = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let eye = V3::new(m[0][3], m[1][3], m[2][3]);
        // GL camera axes to ours: flip y and z.
        let flip = Matrix3::from_diagonal(&V3::new(1.0, -1.0, -1.0));
        let r_wc = r_wc_gl * flip;
        let rotation = r_wc.transpose();
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera {
            translation: -(rotation * eye),
            rotation,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn center(&self) -> V3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Horizontal field of view.
    pub fn fov_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.fx).atan()
    }

    /// Inverse of [`from_world_from_camera_gl`](Self::from_world_from_camera_gl).
    pub fn world_from_camera_gl(&self) -> [[f64; 4]; 4] {
        let flip = Matrix3::from_diagonal(&V3::new(1.0, -1.0, -1.0));
        let r = self.rotation.transpose() * flip;
        let eye = self.center();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = eye[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn forward(&self) -> V3 {
        self.rotation.row(2).transpose()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through continuous pixel coordinates `(px, py)`.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let d_cam = V3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        Ray::new(self.center(), self.rotation.transpose() * d_cam)
    }

    /// Ray through the centre of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Pixel coordinates and camera depth of a world point.
    pub fn project(&self, p: &V3) -> (f64, f64, f64) {
        let c = self.rotation * p + self.translation;
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> V3 {
        let c = V3::new((px - self.cx) / self.fx * depth, (py - self.cy) / self.fy * depth, depth);
        self.rotation.transpose() * (c - self.translation)
    }

    /// World-space low-pass radius per unit ray distance.
    pub fn lowpass_radius_per_t(&self) -> f64 {
        LOWPASS_SIGMA_PX / self.fx.min(self.fy)
    }
}

/// An ordered collection of surfels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub surfels: Vec<Surfel>,
}

impl Scene {
    pub fn new(surfels: Vec<Surfel>) -> Self {
        Scene { surfels }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn frames(&self) -> Vec<SplatFrame> {
        self.surfels.iter().map(Surfel::frame).collect()
    }

    /// Axis-aligned bounds of the surfel centres.
    pub fn bounds(&self) -> Option<(V3, V3)> {
        let first = self.surfels.first()?.center;
        Some(self.surfels.iter().fold((first, first), |(lo, hi), s| {
            (lo.inf(&s.center), hi.sup(&s.center))
        }))
    }

    /// Bounding-box diagonal; 1 for empty or degenerate scenes.
    pub fn scale(&self) -> f64 {
        match self.bounds() {
            Some((lo, hi)) if (hi - lo).norm() > 0.0 => (hi - lo).norm(),
            _ => 1.0,
        }
    }

    /// Surfels tiling a sphere on a Fibonacci lattice, oriented outward.
    pub fn fibonacci_sphere(count: usize, center: V3, radius: f64) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        // Disk sigma chosen so neighbouring disks overlap at roughly 1 sigma.
        let spacing = radius * (4.0 * std::f64::consts::PI / count.max(1) as f64).sqrt();
        let sigma = 0.75 * spacing;
        let surfels = (0..count)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                let n = V3::new(r * phi.cos(), r * phi.sin(), z);
                Surfel::facing(center + n * radius, n, sigma, sigma)
            })
            .collect();
        Scene { surfels }
    }
}

/// On-disk surfel record of the JSON scene file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurfelRecord {
    pub center: [f64; 3],
    pub quaternion: [f64; 4],
    pub log_scales: [f64; 2],
    pub opacity: f64,
    pub albedo: [f64; 3],
    pub metallic: f64,
    pub roughness: f64,
    pub feature: Vec<f64>,
}

impl From<&Surfel> for SurfelRecord {
    fn from(s: &Surfel) -> Self {
        SurfelRecord {
            center: [s.center.x, s.center.y, s.center.z],
            quaternion: s.rotation,
            log_scales: s.log_scale,
            opacity: s.opacity,
            albedo: [s.albedo.x, s.albedo.y, s.albedo.z],
            metallic: s.metallic,
            roughness: s.roughness,
            feature: s.feature.to_vec(),
        }
    }
}

impl SurfelRecord {
    pub fn into_surfel(self, index: usize) -> Result<Surfel> {
        let bad = |what: &str| Error::InvalidScene(format!("surfel {index}: {what}"));
        let all_finite = self
            .center
            .iter()
            .chain(&self.quaternion)
            .chain(&self.log_scales)
            .chain(&self.albedo)
            .chain(&self.feature)
            .chain([&self.opacity, &self.metallic, &self.roughness])
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(bad("non-finite value"));
        }
        if Vector4::from(self.quaternion).norm() < 1e-12 {
            return Err(bad("zero quaternion"));
        }
        if self.feature.len() != FEATURE_DIM {
            return Err(bad(&format!("feature must have {FEATURE_DIM} channels, got {}", self.feature.len())));
        }
        if self.log_scales.iter().any(|&s| s < log_scale_floor() - 1e-12) {
            return Err(bad("scale below floor"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.opacity) || !unit(self.metallic) || !unit(self.roughness) || !self.albedo.iter().all(|&a| unit(a)) {
            return Err(bad("opacity/albedo/metallic/roughness outside [0, 1]"));
        }
        let mut feature = [0.0; FEATURE_DIM];
        feature.copy_from_slice(&self.feature);
        Ok(Surfel {
            center: V3::from(self.center),
            rotation: self.quaternion,
            log_scale: self.log_scales,
            opacity: self.opacity,
            albedo: Rgb::from(self.albedo),
            metallic: self.metallic,
            roughness: self.roughness,
            feature,
        })
    }
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let records: Vec<SurfelRecord> = serde_json::from_str(text)?;
    let surfels = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_surfel(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { surfels })
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let records: Vec<SurfelRecord> = scene.surfels.iter().map(SurfelRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?).map_err(|e| Error::io(path, e))
}

/// Sanity check used by loaders: finite geometry and unit frames.
pub fn validate_frame(frame: &SplatFrame) -> bool {
    is_finite_v3(&frame.center)
        && (frame.tangent_u.norm() - 1.0).abs() < 1e-6
        && (frame.tangent_v.norm() - 1.0).abs() < 1e-6
        && frame.tangent_u.dot(&frame.tangent_v).abs() < 1e-6
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_disk(su: f64, sv: f64) -> SplatFrame {
        Surfel::from_frame(V3::zeros(), V3::x(), V3::y(), su, sv).frame()
    }

    #[test]
    fn center_hit() {
        let ray = Ray::new(V3::new(0.0, 0.0, 1.0), V3::new(0.0, 0.0, -1.0));
        let hit = ray_splat_intersect(&ray, &unit_disk(1.0, 1.0)).unwrap();
        assert_relative_eq!(hit.u, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hit.v, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hit.t, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scaled_offset_hit() {
        let ray = Ray::new(V3::new(1.0, 0.5, 1.0), V3::new(0.0, 0.0, -1.0));
        let hit = ray_splat_intersect(&ray, &unit_disk(2.0, 1.0)).unwrap();
        assert_relative_eq!(hit.u, 0.5, epsilon = 1e-12);
        assert_relative_eq!(hit.v, 0.5, epsilon = 1e-12);
        assert_relative_eq!(hit.t, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_ray_misses() {
        let ray = Ray::new(V3::new(0.0, 0.0, 1.0), V3::new(1.0, 0.0, 0.0));
        assert!(ray_splat_intersect(&ray, &unit_disk(1.0, 1.0)).is_none());
    }

    #[test]
    fn cutoff_and_bounds() {
        let disk = unit_disk(1.0, 1.0);
        let far = Ray::new(V3::new(3.01, 0.0, 1.0), V3::new(0.0, 0.0, -1.0));
        assert!(ray_splat_intersect(&far, &disk).is_none());
        let edge = Ray::new(V3::new(2.99, 0.0, 1.0), V3::new(0.0, 0.0, -1.0));
        assert!(ray_splat_intersect(&edge, &disk).is_some());
        let short = Ray::new(V3::new(0.0, 0.0, 1.0), V3::new(0.0, 0.0, -1.0)).with_bounds(0.0, 0.5);
        assert!(ray_splat_intersect(&short, &disk).is_none());
        let behind = Ray::new(V3::new(0.0, 0.0, 1.0), V3::new(0.0, 0.0, 1.0));
        assert!(ray_splat_intersect(&behind, &disk).is_none());
    }

    #[test]
    fn gaussian_values() {
        assert_eq!(gaussian_weight(0.0, 0.0), 1.0);
        assert_relative_eq!(gaussian_weight(1.0, 0.0), 0.606_530_659_712_633_4, epsilon = 1e-12);
        assert_relative_eq!(gaussian_weight(3.0, 4.0), (-12.5f64).exp(), epsilon = 1e-18);
        assert_relative_eq!(gaussian_weight(3.0, 4.0), 3.7267e-6, max_relative = 1e-4);
    }

    #[test]
    fn filtered_weight_branches() {
        assert_eq!(filtered_weight(0.0, 0.0, 3.0), 1.0);
        // Low-pass value exp(-100 / (2 f^2)) = 0.1.
        let footprint = (50.0 / 10f64.ln()).sqrt();
        assert_relative_eq!(filtered_weight(10.0, 0.0, footprint), 0.1, epsilon = 1e-12);
        assert_relative_eq!(filtered_weight(0.1, 0.0, 1e-9), (-0.005f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.25];
        let weights = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.5, 0.9, 0.4, -0.2);
        let f = |q: &[f64; 4]| rotation_matrix(q).component_mul(&weights).sum();
        let g = rotation_matrix_backward(&q, &weights);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn gl_pose_round_trip() {
        let cam = Camera::look_at(V3::new(1.0, -2.0, 0.5), V3::zeros(), V3::new(0.0, 0.0, 1.0), 0.8, 40, 30);
        let back = Camera::from_world_from_camera_gl(&cam.world_from_camera_gl(), cam.fov_x(), 40, 30);
        assert!((back.rotation - cam.rotation).norm() < 1e-12);
        assert!((back.translation - cam.translation).norm() < 1e-12);
        assert!((back.fx - cam.fx).abs() < 1e-9);
    }

    #[test]
    fn camera_round_trip() {
        let cam = Camera::look_at(V3::new(0.3, -2.0, 1.0), V3::zeros(), V3::z(), 0.8, 64, 48);
        let p = V3::new(0.1, 0.2, -0.3);
        let (px, py, depth) = cam.project(&p);
        let back = cam.unproject(px, py, depth);
        assert!((back - p).norm() < 1e-12);
        let (qx, qy, _) = cam.project(&cam.ray(px, py).at(5.0));
        assert!((qx - px).abs() < 1e-6 && (qy - py).abs() < 1e-6);
        assert!((cam.pixel_ray(3, 7).direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scene_json_round_trip_and_validation() {
        let scene = Scene::fibonacci_sphere(5, V3::zeros(), 1.0);
        let text = scene_to_json(&scene).unwrap();
        let back = scene_from_json(&text).unwrap();
        assert_eq!(back, scene);

        let bad = text.replacen("\"opacity\": 1.0", "\"opacity\": 1.5", 1);
        assert!(matches!(scene_from_json(&bad), Err(Error::InvalidScene(_))));
        let short = r#"[{"center":[0,0,0],"quaternion":[1,0,0,0],"log_scales":[0,0],"opacity":1,
            "albedo":[0,0,0],"metallic":0,"roughness":0,"feature":[0]}]"#;
        assert!(scene_from_json(short).is_err());
        // JSON has no NaN literal; non-finite numbers never parse.
        assert!(scene_from_json(&text.replacen("1.0", "NaN", 1)).is_err());
        assert!(scene_from_json(&text.replacen("1.0", "1e999", 1)).is_err());
    }

    proptest! {
        #[test]
        fn hit_reconstructs_ray_point(
            ox in -2.0..2.0f64, oy in -2.0..2.0f64, oz in 0.5..3.0f64,
            dx in -0.5..0.5f64, dy in -0.5..0.5f64,
            q in prop::array::uniform4(-1.0..1.0f64),
            su in 0.2..2.0f64, sv in 0.2..2.0f64,
        ) {
            prop_assume!(Vector4::from(q).norm() > 0.1);
            let mut s = Surfel::from_frame(V3::new(0.1, -0.2, 0.0), V3::x(), V3::y(), su, sv);
            s.rotation = q;
            let frame = s.frame();
            prop_assert!(validate_frame(&frame));
            prop_assert!((frame.normal.norm() - 1.0).abs() < 1e-6);
            let ray = Ray::new(V3::new(ox, oy, oz), V3::new(dx, dy, -1.0));
            if let Some(hit) = ray_splat_intersect(&ray, &frame) {
                let world = frame.point(hit.u, hit.v);
                prop_assert!((world - ray.at(hit.t)).norm() < 1e-6);
            }
        }

        #[test]
        fn gaussian_depends_on_radius_only(r in 0.0..4.0f64, a in 0.0..6.3f64, b in 0.0..6.3f64) {
            let g1 = gaussian_weight(r * a.cos(), r * a.sin());
            let g2 = gaussian_weight(r * b.cos(), r * b.sin());
            prop_assert!((g1 - g2).abs() < 1e-12);
        }

        #[test]
        fn gaussian_strictly_decreasing(r1 in 0.0..5.0f64, dr in 1e-3..2.0f64) {
            prop_assert!(gaussian_weight(r1 + dr, 0.0) < gaussian_weight(r1, 0.0));
        }
    }
}
