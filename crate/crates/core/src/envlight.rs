//! Distant environment lighting: cubemap storage, the roughness-indexed
//! pre-filtered mip chain, a cosine-convolved irradiance map, the split-sum
//! BRDF lookup table and split-sum shading with its adjoint.
//!
//! Cubemap faces follow the OpenGL order `+X, -X, +Y, -Y, +Z, -Z`. Texel
//! `(i, j)` of a face of size `S` covers face coordinates
//! `u in [2i/S - 1, 2(i+1)/S - 1]` (columns) and likewise `v` for rows.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::brdf::{alpha_from_roughness, ggx_d, sample_ggx_half, smith_g, Brdf, Material, COS_FLOOR};
use crate::error::{Error, Result};
use crate::math::{hammersley, reflect, sample_stream, Rgb, PI, V3};
use crate::splat::ShadingPoint;

/// `(major axis, major sign, s axis, s sign, t axis, t sign)` per face.
const FACES: [(usize, f64, usize, f64, usize, f64); 6] = [
    (0, 1.0, 2, -1.0, 1, -1.0),
    (0, -1.0, 2, 1.0, 1, -1.0),
    (1, 1.0, 0, 1.0, 2, 1.0),
    (1, -1.0, 0, 1.0, 2, -1.0),
    (2, 1.0, 0, 1.0, 1, -1.0),
    (2, -1.0, 0, -1.0, 1, -1.0),
];

/// Direction (not normalized) of face coordinates `(u, v)`.
#[inline]
pub fn face_direction(face: usize, u: f64, v: f64) -> V3 {
    let (ma, ms, sa, ss, ta, ts) = FACES[face];
    let mut d = V3::zeros();
    d[ma] = ms;
    d[sa] = ss * u;
    d[ta] = ts * v;
    d
}

/// Face and face coordinates of a (not necessarily unit) direction.
#[inline]
pub fn direction_to_face(d: &V3) -> (usize, f64, f64) {
    let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
    let face = if ax >= ay && ax >= az {
        if d.x >= 0.0 { 0 } else { 1 }
    } else if ay >= az {
        if d.y >= 0.0 { 2 } else { 3 }
    } else if d.z >= 0.0 {
        4
    } else {
        5
    };
    let (ma, _, sa, ss, ta, ts) = FACES[face];
    let m = d[ma].abs();
    (face, ss * d[sa] / m, ts * d[ta] / m)
}

/// Unit direction through the centre of texel `(i, j)`; indices may lie one
/// texel outside the face, in which case the face plane is extended.
#[inline]
pub fn texel_direction(face: usize, i: isize, j: isize, size: usize) -> V3 {
    let u = 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;
    let v = 2.0 * (j as f64 + 0.5) / size as f64 - 1.0;
    face_direction(face, u, v).normalize()
}

fn area_element(x: f64, y: f64) -> f64 {
    (x * y).atan2((x * x + y * y + 1.0).sqrt())
}

/// Exact solid angle subtended by texel `(i, j)`.
pub fn texel_solid_angle(i: usize, j: usize, size: usize) -> f64 {
    let s = size as f64;
    let x0 = 2.0 * i as f64 / s - 1.0;
    let x1 = 2.0 * (i + 1) as f64 / s - 1.0;
    let y0 = 2.0 * j as f64 / s - 1.0;
    let y1 = 2.0 * (j + 1) as f64 / s - 1.0;
    area_element(x0, y0) - area_element(x0, y1) - area_element(x1, y0) + area_element(x1, y1)
}

/// Nearest texel index of a direction on a face of the given size.
#[inline]
fn nearest_texel(d: &V3, size: usize) -> usize {
    let (face, u, v) = direction_to_face(d);
    let to_index = |c: f64| (((c + 1.0) * 0.5 * size as f64).floor() as isize).clamp(0, size as isize - 1) as usize;
    face * size * size + to_index(v) * size + to_index(u)
}

/// Bilinear taps `(texel index, weight)` plus the weight derivatives with
/// respect to the lookup direction.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub d_weight: [V3; 4],
}

/// Seam-aware bilinear footprint of `dir` on a cube level of `size`.
pub fn bilinear_taps(dir: &V3, size: usize) -> BilinearTaps {
    let (face, u, v) = direction_to_face(dir);
    let s = size as f64;
    let sx = (u + 1.0) * 0.5 * s - 0.5;
    let sy = (v + 1.0) * 0.5 * s - 0.5;
    let i0 = sx.floor();
    let j0 = sy.floor();
    let fx = sx - i0;
    let fy = sy - j0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    let n = size as isize;
    let tap = |i: isize, j: isize| -> usize {
        if (0..n).contains(&i) && (0..n).contains(&j) {
            face * size * size + j as usize * size + i as usize
        } else {
            nearest_texel(&texel_direction(face, i, j, size), size)
        }
    };

    // d(u, v)/d dir on this face.
    let (ma, ms, sa, ss, ta, ts) = FACES[face];
    let m = dir[ma].abs();
    let mut du = V3::zeros();
    du[sa] = ss / m;
    du[ma] = -u * ms / m;
    let mut dv = V3::zeros();
    dv[ta] = ts / m;
    dv[ma] = -v * ms / m;
    let dsx = du * (0.5 * s);
    let dsy = dv * (0.5 * s);

    BilinearTaps {
        index: [tap(i0, j0), tap(i0 + 1, j0), tap(i0, j0 + 1), tap(i0 + 1, j0 + 1)],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        d_weight: [
            -dsx * (1.0 - fy) - dsy * (1.0 - fx),
            dsx * (1.0 - fy) - dsy * fx,
            -dsx * fy + dsy * (1.0 - fx),
            dsx * fy + dsy * fx,
        ],
    }
}

/// One square level of a cubemap: `6 * size * size` RGB texels.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeLevel {
    pub size: usize,
    pub texels: Vec<Rgb>,
}

impl CubeLevel {
    pub fn new(size: usize, fill: Rgb) -> Self {
        CubeLevel { size, texels: vec![fill; 6 * size * size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(&V3) -> Rgb + Sync) -> Self {
        let texels = (0..6 * size * size)
            .into_par_iter()
            .map(|k| {
                let face = k / (size * size);
                let j = (k / size) % size;
                let i = k % size;
                f(&texel_direction(face, i as isize, j as isize, size))
            })
            .collect();
        CubeLevel { size, texels }
    }

    pub fn texel_index(&self, face: usize, i: usize, j: usize) -> usize {
        face * self.size * self.size + j * self.size + i
    }

    pub fn direction_of(&self, index: usize) -> V3 {
        let s = self.size;
        texel_direction(index / (s * s), (index % s) as isize, ((index / s) % s) as isize, s)
    }

    pub fn solid_angle_of(&self, index: usize) -> f64 {
        let s = self.size;
        texel_solid_angle(index % s, (index / s) % s, s)
    }

    pub fn sample(&self, dir: &V3) -> Rgb {
        let taps = bilinear_taps(dir, self.size);
        (0..4).fold(Rgb::zeros(), |acc, k| acc + self.texels[taps.index[k]] * taps.weight[k])
    }

    /// 2x downsample weighting each texel by its solid angle, so the
    /// solid-angle-weighted total (radiant energy) is preserved exactly.
    pub fn downsample(&self) -> CubeLevel {
        if self.size == 1 {
            return self.clone();
        }
        let half = self.size / 2;
        let mut out = CubeLevel::new(half, Rgb::zeros());
        for face in 0..6 {
            for j in 0..half {
                for i in 0..half {
                    let mut acc = Rgb::zeros();
                    let mut total = 0.0;
                    for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let omega = texel_solid_angle(2 * i + di, 2 * j + dj, self.size);
                        acc += self.texels[self.texel_index(face, 2 * i + di, 2 * j + dj)] * omega;
                        total += omega;
                    }
                    let k = out.texel_index(face, i, j);
                    out.texels[k] = acc / total;
                }
            }
        }
        out
    }

    /// Sum of `radiance * solid angle` over every texel.
    pub fn radiant_energy(&self) -> Rgb {
        (0..self.texels.len()).fold(Rgb::zeros(), |acc, k| acc + self.texels[k] * self.solid_angle_of(k))
    }

    pub fn scaled(&self, s: f64) -> CubeLevel {
        CubeLevel { size: self.size, texels: self.texels.iter().map(|t| t * s).collect() }
    }
}

/// Solid-angle-weighted pyramid of a base level, finest first.
pub fn box_pyramid(base: &CubeLevel) -> Vec<CubeLevel> {
    let mut levels = vec![base.clone()];
    while levels.last().unwrap().size > 1 {
        let next = levels.last().unwrap().downsample();
        levels.push(next);
    }
    levels
}

/// Trilinear lookup into a pyramid at a fractional level.
fn pyramid_sample(levels: &[CubeLevel], dir: &V3, lod: f64) -> Rgb {
    let last = levels.len() - 1;
    let lod = lod.clamp(0.0, last as f64);
    let l0 = lod.floor() as usize;
    let l1 = (l0 + 1).min(last);
    let t = lod - l0 as f64;
    let a = levels[l0].sample(dir);
    if t == 0.0 || l0 == l1 {
        return a;
    }
    a * (1.0 - t) + levels[l1].sample(dir) * t
}

/// Split-sum BRDF factors over `(n.wo, roughness)`: the specular albedo is
/// approximately `f0 * scale + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrdfLut {
    pub size: usize,
    /// `(scale, bias)` at `[roughness_bin * size + cos_bin]`.
    pub table: Vec<(f64, f64)>,
}

pub const LUT_SIZE: usize = 64;
pub const LUT_SAMPLES: u32 = 4096;

impl BrdfLut {
    /// Monte Carlo integration with GGX importance sampling on a node grid
    /// that includes both endpoints of each axis, so lookups at normal
    /// incidence and full roughness need no extrapolation.
    pub fn bake(size: usize, samples: u32, seed: u64) -> BrdfLut {
        let size = size.max(2);
        let step = 1.0 / (size - 1) as f64;
        let table = (0..size * size)
            .into_par_iter()
            .map(|k| integrate_split_sum((k % size) as f64 * step, (k / size) as f64 * step, samples, seed, k as u64))
            .collect();
        BrdfLut { size, table }
    }

    pub fn bake_default() -> BrdfLut {
        Self::bake(LUT_SIZE, LUT_SAMPLES, 0x5eed_1075)
    }

    /// Bilinear lookup between grid nodes; returns `(scale, bias)` and their
    /// derivatives in `cos_o` and roughness.
    pub fn lookup(&self, cos_o: f64, roughness: f64) -> LutSample {
        let n = (self.size - 1) as f64;
        let coord = |x: f64| {
            let s = x.clamp(0.0, 1.0) * n;
            if s <= 0.0 {
                (0usize, 0.0, false)
            } else if s >= n {
                (self.size - 1, 0.0, false)
            } else {
                (s.floor() as usize, s - s.floor(), true)
            }
        };
        let (x0, fx, x_inside) = coord(cos_o);
        let (y0, fy, y_inside) = coord(roughness);
        let x1 = (x0 + 1).min(self.size - 1);
        let y1 = (y0 + 1).min(self.size - 1);
        let at = |x: usize, y: usize| self.table[y * self.size + x];
        let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
        let mix = |p: f64, q: f64, r: f64, s: f64| {
            let top = p + (q - p) * fx;
            let bottom = r + (s - r) * fx;
            (top + (bottom - top) * fy, ((q - p) * (1.0 - fy) + (s - r) * fy) * n, (bottom - top) * n)
        };
        let (scale, ds_dc, ds_dr) = mix(a.0, b.0, c.0, d.0);
        let (bias, db_dc, db_dr) = mix(a.1, b.1, c.1, d.1);
        let gate = |v: f64, inside: bool| if inside { v } else { 0.0 };
        LutSample {
            scale,
            bias,
            d_scale_d_cos: gate(ds_dc, x_inside),
            d_bias_d_cos: gate(db_dc, x_inside),
            d_scale_d_rough: gate(ds_dr, y_inside),
            d_bias_d_rough: gate(db_dr, y_inside),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LutSample {
    pub scale: f64,
    pub bias: f64,
    pub d_scale_d_cos: f64,
    pub d_bias_d_cos: f64,
    pub d_scale_d_rough: f64,
    pub d_bias_d_rough: f64,
}

/// `(scale, bias)` of the specular albedo at one `(cos_o, roughness)`.
pub fn integrate_split_sum(cos_o: f64, roughness: f64, samples: u32, seed: u64, key: u64) -> (f64, f64) {
    let alpha = alpha_from_roughness(roughness);
    let cos_o = cos_o.max(COS_FLOOR);
    let n = V3::z();
    let wo = V3::new((1.0 - cos_o * cos_o).max(0.0).sqrt(), 0.0, cos_o);
    let mut rng = sample_stream(seed, key, 0);
    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
    let mut scale = 0.0;
    let mut bias = 0.0;
    for i in 0..samples {
        let (h1, h2) = hammersley(i, samples);
        let (h, _) = sample_ggx_half(&n, alpha, (h1 + r1).fract(), (h2 + r2).fract());
        let wi = reflect(&wo, &h);
        let cos_i = wi.z;
        if cos_i <= 0.0 {
            continue;
        }
        let cos_h = h.z.max(COS_FLOOR);
        let cos_oh = wo.dot(&h).max(0.0);
        // f_s cos_i / pdf with pdf = D cos_h / (4 cos_oh).
        let g_vis = smith_g(cos_i.max(COS_FLOOR), cos_o, alpha) * cos_oh / (cos_h * cos_o);
        let fc = (1.0 - cos_oh).powi(5);
        scale += (1.0 - fc) * g_vis;
        bias += fc * g_vis;
    }
    (scale / samples as f64, bias / samples as f64)
}

/// Settings for pre-filtering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefilterSettings {
    /// The GGX lobe is truncated at half-vector tangent `tail * alpha`.
    pub tail: f64,
    pub irradiance_size: usize,
}

impl Default for PrefilterSettings {
    fn default() -> Self {
        PrefilterSettings { tail: 8.0, irradiance_size: 16 }
    }
}

/// Roughness assigned to mip level `level` of a chain with `levels` entries.
pub fn level_roughness(level: usize, levels: usize) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        level as f64 / (levels - 1) as f64
    }
}

const TILE: usize = 8;

/// Texel tiles of one cube level with bounding cones, for culling.
struct Tiles {
    size: usize,
    tile: usize,
    /// `(face, i0, j0, centre direction, angular radius)`.
    cones: Vec<(usize, usize, usize, V3, f64)>,
}

impl Tiles {
    fn new(size: usize) -> Self {
        let tile = TILE.min(size);
        let per_face = size / tile;
        let mut cones = Vec::with_capacity(6 * per_face * per_face);
        for face in 0..6 {
            for tj in 0..per_face {
                for ti in 0..per_face {
                    let (i0, j0) = (ti * tile, tj * tile);
                    let edge = |k: usize| 2.0 * k as f64 / size as f64 - 1.0;
                    let (u0, u1, v0, v1) = (edge(i0), edge(i0 + tile), edge(j0), edge(j0 + tile));
                    let centre = face_direction(face, 0.5 * (u0 + u1), 0.5 * (v0 + v1)).normalize();
                    let radius = [(u0, v0), (u1, v0), (u0, v1), (u1, v1)]
                        .iter()
                        .map(|&(u, v)| centre.dot(&face_direction(face, u, v).normalize()).clamp(-1.0, 1.0).acos())
                        .fold(0.0, f64::max);
                    cones.push((face, i0, j0, centre, radius));
                }
            }
        }
        Tiles { size, tile, cones }
    }

    fn texels(&self, cone: usize) -> impl Iterator<Item = usize> + '_ {
        let (face, i0, j0, _, _) = self.cones[cone];
        let (s, t) = (self.size, self.tile);
        (j0..j0 + t).flat_map(move |j| (i0..i0 + t).map(move |i| face * s * s + j * s + i))
    }
}

/// Normalized GGX-lobe convolution of `src` evaluated at its own texel
/// centres: `out(n) = sum_l K(n, l) L(l) / sum_l K(n, l)` with
/// `K = D(h) (n.l) Omega_l` and `h` the half vector of `n` and `l` (the
/// lobe seen from `v = n`). Lobe directions beyond `max_angle` are dropped.
fn ggx_convolve(src: &CubeLevel, alpha: f64, max_angle: f64) -> CubeLevel {
    let size = src.size;
    let dirs: Vec<V3> = (0..src.texels.len()).map(|k| src.direction_of(k)).collect();
    let omegas: Vec<f64> = (0..src.texels.len()).map(|k| src.solid_angle_of(k)).collect();
    let tiles = Tiles::new(size);
    let cos_cut = max_angle.cos();
    let per_tile: Vec<Vec<(usize, Rgb)>> = (0..tiles.cones.len())
        .into_par_iter()
        .map(|r| {
            let (_, _, _, rc, rr) = tiles.cones[r];
            let candidates: Vec<usize> = (0..tiles.cones.len())
                .filter(|&s| {
                    let (_, _, _, sc, sr) = tiles.cones[s];
                    rc.dot(&sc).clamp(-1.0, 1.0).acos() <= max_angle + rr + sr
                })
                .collect();
            tiles
                .texels(r)
                .map(|k| {
                    let n = dirs[k];
                    let mut acc = Rgb::zeros();
                    let mut wsum = 0.0;
                    for &c in &candidates {
                        for l in tiles.texels(c) {
                            let cos_l = n.dot(&dirs[l]);
                            if cos_l < cos_cut || cos_l <= 0.0 {
                                continue;
                            }
                            let cos_h = (0.5 * (1.0 + cos_l)).sqrt();
                            let w = ggx_d(cos_h, alpha) * cos_l * omegas[l];
                            acc += src.texels[l] * w;
                            wsum += w;
                        }
                    }
                    (k, if wsum > 0.0 { acc / wsum } else { src.texels[k] })
                })
                .collect()
        })
        .collect();
    let mut out = CubeLevel::new(size, Rgb::zeros());
    for (k, v) in per_tile.into_iter().flatten() {
        out.texels[k] = v;
    }
    out
}

/// GGX-filtered mip chain. Level `l` is the normalized GGX-lobe convolution
/// at roughness `l / (levels - 1)`, evaluated on the coarsest box-pyramid
/// level that still resolves the lobe and then box-averaged down to the
/// level's resolution. The quadrature is deterministic. Level 0 is the base
/// map itself.
pub fn prefilter_mips(base: &CubeLevel, settings: &PrefilterSettings) -> Vec<CubeLevel> {
    let pyramid = box_pyramid(base);
    let levels = pyramid.len();
    let mut out = vec![base.clone()];
    for level in 1..levels {
        let alpha = alpha_from_roughness(level_roughness(level, levels));
        // Angular scale of the reflected lobe; the source spacing must not
        // exceed it.
        let lobe = 2.0 * alpha.atan();
        let mut q = level - 1;
        while q > 0 && 2.0 / pyramid[q].size as f64 > lobe {
            q -= 1;
        }
        let spacing = 2.0 / pyramid[q].size as f64;
        let max_angle = (2.0 * (settings.tail * alpha).atan() + 2.0 * spacing).min(0.5 * PI);
        let mut filtered = ggx_convolve(&pyramid[q], alpha, max_angle);
        for _ in q..level {
            filtered = filtered.downsample();
        }
        out.push(filtered);
    }
    out
}

/// Cosine-convolved radiance `E(n) / pi`, computed by exact quadrature over
/// the pyramid level of matching resolution. Weights are normalized so a
/// constant environment maps to itself.
#[derive(Clone)]
pub struct IrradianceOperator {
    pub size: usize,
    /// Pyramid level used as source.
    pub source_level: usize,
    /// Dense weights `[receiver][source]`, rows summing to one.
    weights: Vec<f64>,
    source_len: usize,
}

impl IrradianceOperator {
    pub fn new(base_size: usize, irradiance_size: usize) -> Self {
        let size = irradiance_size.min(base_size).max(1);
        let mut source_level = 0;
        let mut s = base_size;
        while s > size {
            s /= 2;
            source_level += 1;
        }
        let src = CubeLevel::new(s, Rgb::zeros());
        let recv = CubeLevel::new(size, Rgb::zeros());
        let source_len = src.texels.len();
        let src_dirs: Vec<(V3, f64)> = (0..source_len).map(|k| (src.direction_of(k), src.solid_angle_of(k))).collect();
        let weights = (0..recv.texels.len())
            .into_par_iter()
            .flat_map_iter(|r| {
                let n = recv.direction_of(r);
                let mut row: Vec<f64> = src_dirs.iter().map(|(d, omega)| n.dot(d).max(0.0) * omega).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|w| *w /= total);
                row
            })
            .collect();
        IrradianceOperator { size, source_level, weights, source_len }
    }

    pub fn apply(&self, source: &CubeLevel) -> CubeLevel {
        debug_assert_eq!(source.texels.len(), self.source_len);
        let texels = (0..6 * self.size * self.size)
            .into_par_iter()
            .map(|r| {
                let row = &self.weights[r * self.source_len..(r + 1) * self.source_len];
                row.iter().zip(&source.texels).fold(Rgb::zeros(), |acc, (w, l)| acc + l * *w)
            })
            .collect();
        CubeLevel { size: self.size, texels }
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn adjoint(&self, grad: &[Rgb]) -> Vec<Rgb> {
        let mut out = vec![Rgb::zeros(); self.source_len];
        for (r, g) in grad.iter().enumerate() {
            if *g == Rgb::zeros() {
                continue;
            }
            let row = &self.weights[r * self.source_len..(r + 1) * self.source_len];
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * *w;
            }
        }
        out
    }
}

/// Environment light ready for queries.
#[derive(Clone)]
pub struct EnvironmentLight {
    /// Pre-filtered chain; level 0 is the base radiance.
    pub mips: Vec<CubeLevel>,
    pub irradiance: CubeLevel,
    pub lut: BrdfLut,
    pub settings: PrefilterSettings,
    irradiance_op: IrradianceOperator,
}

impl EnvironmentLight {
    pub fn from_base(base: CubeLevel, lut: BrdfLut, settings: PrefilterSettings) -> Self {
        let op = IrradianceOperator::new(base.size, settings.irradiance_size);
        Self::with_operator(base, lut, settings, op)
    }

    fn with_operator(base: CubeLevel, lut: BrdfLut, settings: PrefilterSettings, op: IrradianceOperator) -> Self {
        let pyramid = box_pyramid(&base);
        let irradiance = op.apply(&pyramid[op.source_level]);
        let mips = prefilter_mips(&base, &settings);
        EnvironmentLight { mips, irradiance, lut, settings, irradiance_op: op }
    }

    /// Rebuilds every derived table from a new base map of the same size.
    pub fn rebuild(&mut self, base: CubeLevel) {
        assert_eq!(base.size, self.base_size());
        let pyramid = box_pyramid(&base);
        self.irradiance = self.irradiance_op.apply(&pyramid[self.irradiance_op.source_level]);
        self.mips = prefilter_mips(&base, &self.settings);
    }

    /// Replaces only the base level. Derived tables stay as they were until
    /// the next [`rebuild`](Self::rebuild).
    pub fn update_base(&mut self, base: CubeLevel) {
        assert_eq!(base.size, self.base_size());
        self.mips[0] = base;
    }

    pub fn constant(color: Rgb, size: usize, lut: BrdfLut, settings: PrefilterSettings) -> Self {
        Self::from_base(CubeLevel::new(size, color), lut, settings)
    }

    pub fn base(&self) -> &CubeLevel {
        &self.mips[0]
    }

    pub fn base_size(&self) -> usize {
        self.mips[0].size
    }

    pub fn levels(&self) -> usize {
        self.mips.len()
    }

    /// Mip level selected for a perceptual roughness.
    pub fn mip_for_roughness(&self, roughness: f64) -> f64 {
        roughness.clamp(0.0, 1.0) * (self.levels() - 1) as f64
    }

    /// Direct radiance `L_dir` along `dir` (bilinear on the base level).
    pub fn radiance(&self, dir: &V3) -> Rgb {
        self.mips[0].sample(dir)
    }

    /// Bilinear within a level, linear across levels.
    pub fn sample_env(&self, dir: &V3, mip: f64) -> Rgb {
        pyramid_sample(&self.mips, dir, mip)
    }

    pub fn sample_irradiance(&self, normal: &V3) -> Rgb {
        self.irradiance.sample(normal)
    }

    pub fn scaled(&self, s: f64) -> EnvironmentLight {
        EnvironmentLight {
            mips: self.mips.iter().map(|m| m.scaled(s)).collect(),
            irradiance: self.irradiance.scaled(s),
            lut: self.lut.clone(),
            settings: self.settings,
            irradiance_op: IrradianceOperator::new(self.base_size(), self.settings.irradiance_size),
        }
    }

    /// Gradient of `dot(up, sample_env(dir, mip))` accumulated into `grad`,
    /// returning the derivatives with respect to `dir` and `mip`.
    fn sample_env_backward(&self, dir: &V3, mip: f64, up: &Rgb, grad: Option<&mut LightGrad>) -> (V3, f64) {
        let last = self.levels() - 1;
        let mip = mip.clamp(0.0, last as f64);
        let l0 = mip.floor() as usize;
        let l1 = (l0 + 1).min(last);
        let t = mip - l0 as f64;
        let mut d_dir = V3::zeros();
        let mut values = [Rgb::zeros(); 2];
        let mut grad = grad;
        for (slot, (level, w)) in [(l0, 1.0 - t), (l1, t)].into_iter().enumerate() {
            if slot == 1 && l1 == l0 {
                values[1] = values[0];
                continue;
            }
            let cube = &self.mips[level];
            let taps = bilinear_taps(dir, cube.size);
            for k in 0..4 {
                let texel = &cube.texels[taps.index[k]];
                values[slot] += texel * taps.weight[k];
                d_dir += taps.d_weight[k] * (up.dot(texel) * w);
                if let Some(g) = grad.as_deref_mut() {
                    if w != 0.0 {
                        g.mips[level][taps.index[k]] += up * (taps.weight[k] * w);
                    }
                }
            }
        }
        let d_mip = if l1 != l0 { up.dot(&(values[1] - values[0])) } else { 0.0 };
        (d_dir, d_mip)
    }

    /// Accumulates `dot(up, radiance(dir))` into the base gradient.
    pub fn radiance_backward(&self, dir: &V3, up: &Rgb, grad: &mut LightGrad) {
        let taps = bilinear_taps(dir, self.base_size());
        for k in 0..4 {
            grad.mips[0][taps.index[k]] += up * taps.weight[k];
        }
    }

    /// Split-sum shading of one opacity-normalized G-buffer sample.
    pub fn shade(&self, sp: &ShadingPoint, brdf: &Brdf) -> SplitSum {
        let mat = sp.material();
        let n = sp.normal;
        let cos_o = n.dot(&sp.view_dir).max(COS_FLOOR);
        let f0 = mat.f0();
        let kd = (1.0 - mat.metallic) * (1.0 - brdf.diffuse_fresnel_term(cos_o, &f0));
        let irradiance = self.sample_irradiance(&n);
        let lut = self.lut.lookup(cos_o, mat.roughness);
        let reflected = reflect_dir(&n, &sp.view_dir);
        let env = self.sample_env(&reflected, self.mip_for_roughness(mat.roughness));
        let spec_weight = f0 * lut.scale + Rgb::repeat(lut.bias);
        SplitSum {
            diffuse: mat.albedo.component_mul(&irradiance) * kd,
            specular: spec_weight.component_mul(&env),
        }
    }

    /// Adjoint of [`shade`](Self::shade) for upstream gradient `up` on the
    /// total radiance.
    pub fn shade_backward(&self, sp: &ShadingPoint, brdf: &Brdf, up: &Rgb, grad: Option<&mut LightGrad>) -> ShadingGrad {
        let mat = sp.material();
        let n = sp.normal;
        let wo = sp.view_dir;
        let raw_cos = n.dot(&wo);
        let cos_o = raw_cos.max(COS_FLOOR);
        let cos_active = raw_cos > COS_FLOOR;
        let m = mat.metallic;
        let a = mat.albedo;
        let f0 = mat.f0();
        let k_o = (1.0 - cos_o.clamp(0.0, 1.0)).powi(5);
        let fd = brdf.diffuse_fresnel_term(cos_o, &f0);
        let kd = (1.0 - m) * (1.0 - fd);
        let irradiance = self.sample_irradiance(&n);
        let lut = self.lut.lookup(cos_o, mat.roughness);
        let reflected = reflect_dir_raw(&n, &wo);
        let mip = self.mip_for_roughness(mat.roughness);
        let env = self.sample_env(&reflected, mip);
        let spec_weight = f0 * lut.scale + Rgb::repeat(lut.bias);

        let mut out = ShadingGrad::default();
        // d F_d / d f0_c and d F_d / d cos_o.
        let (dfd_df0, dfd_dcos) = if brdf.diffuse_fresnel {
            let dk = -5.0 * (1.0 - cos_o.clamp(0.0, 1.0)).powi(4);
            ((1.0 - k_o) / 3.0, (1.0 - crate::math::channel_mean(&f0)) * dk)
        } else {
            (0.0, 0.0)
        };
        let up_a_e = up.component_mul(&a).dot(&irradiance);

        // Diffuse: a_c kd E_c.
        for c in 0..3 {
            out.albedo[c] += up[c] * kd * irradiance[c];
            out.albedo[c] += -up_a_e * (1.0 - m) * dfd_df0 * m;
            out.albedo[c] += up[c] * lut.scale * m * env[c];
        }
        out.metallic += -up_a_e * (1.0 - fd);
        for c in 0..3 {
            let df0_dm = a[c] - crate::brdf::DIELECTRIC_F0;
            out.metallic += -up_a_e * (1.0 - m) * dfd_df0 * df0_dm;
            out.metallic += up[c] * lut.scale * df0_dm * env[c];
        }
        let up_env = up.component_mul(&env);
        out.roughness += up_env.dot(&f0) * lut.d_scale_d_rough + (up_env.x + up_env.y + up_env.z) * lut.d_bias_d_rough;

        let mut grad = grad;
        // Irradiance lookup.
        let up_irr = up.component_mul(&a) * kd;
        let taps = bilinear_taps(&n, self.irradiance.size);
        for k in 0..4 {
            out.normal += taps.d_weight[k] * up_irr.dot(&self.irradiance.texels[taps.index[k]]);
            if let Some(g) = grad.as_deref_mut() {
                g.irradiance[taps.index[k]] += up_irr * taps.weight[k];
            }
        }
        // Specular environment lookup.
        let up_spec = up.component_mul(&spec_weight);
        let (d_dir, d_mip) = self.sample_env_backward(&reflected, mip, &up_spec, grad);
        if mat.roughness > 0.0 && mat.roughness < 1.0 {
            out.roughness += d_mip * (self.levels() - 1) as f64;
        }
        // reflected = 2 (n.wo) n - wo.
        out.normal += (d_dir * n.dot(&wo) + wo * n.dot(&d_dir)) * 2.0;
        // Paths through cos_o.
        if cos_active {
            let d_cos = -up_a_e * (1.0 - m) * dfd_dcos
                + up_env.dot(&f0) * lut.d_scale_d_cos
                + (up_env.x + up_env.y + up_env.z) * lut.d_bias_d_cos;
            out.normal += wo * d_cos;
        }
        out
    }

    pub fn shade_or_background(&self, sp: Option<&ShadingPoint>, brdf: &Brdf, background: &Rgb) -> Rgb {
        match sp {
            Some(sp) => self.shade(sp, brdf).total(),
            None => *background,
        }
    }

    /// Zeroed gradient accumulator shaped like this light.
    pub fn grad_buffer(&self) -> LightGrad {
        LightGrad {
            mips: self.mips.iter().map(|m| vec![Rgb::zeros(); m.texels.len()]).collect(),
            irradiance: vec![Rgb::zeros(); self.irradiance.texels.len()],
        }
    }

    /// Folds an accumulated [`LightGrad`] onto the base texels. Level 0 and
    /// the irradiance path are exact; gradients of coarser mips are spread
    /// over the base texels they cover with the pyramid's solid-angle
    /// weights, treating the GGX filter as frozen between rebuilds.
    pub fn base_gradient(&self, grad: &LightGrad) -> Vec<Rgb> {
        let size = self.base_size();
        let mut out = grad.mips[0].clone();
        let spread = |out: &mut Vec<Rgb>, level_size: usize, g: &[Rgb]| {
            let block = size / level_size;
            for face in 0..6 {
                for j in 0..size {
                    for i in 0..size {
                        let (ci, cj) = (i / block, j / block);
                        let src = g[face * level_size * level_size + cj * level_size + ci];
                        if src != Rgb::zeros() {
                            let share = texel_solid_angle(i, j, size) / texel_solid_angle(ci, cj, level_size);
                            out[face * size * size + j * size + i] += src * share;
                        }
                    }
                }
            }
        };
        for level in 1..self.levels() {
            spread(&mut out, self.mips[level].size, &grad.mips[level]);
        }
        let src = self.irradiance_op.adjoint(&grad.irradiance);
        let src_size = size >> self.irradiance_op.source_level;
        spread(&mut out, src_size, &src);
        out
    }
}

/// Gradient accumulator for an [`EnvironmentLight`].
#[derive(Clone, Debug)]
pub struct LightGrad {
    pub mips: Vec<Vec<Rgb>>,
    pub irradiance: Vec<Rgb>,
}

impl LightGrad {
    pub fn accumulate(&mut self, o: &LightGrad) {
        for (a, b) in self.mips.iter_mut().zip(&o.mips) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.irradiance.iter_mut().zip(&o.irradiance) {
            *x += y;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSum {
    pub diffuse: Rgb,
    pub specular: Rgb,
}

impl SplitSum {
    pub fn total(&self) -> Rgb {
        self.diffuse + self.specular
    }
}

/// Gradient of split-sum shading with respect to the shading inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: V3,
}

impl Default for ShadingGrad {
    fn default() -> Self {
        ShadingGrad { albedo: Rgb::zeros(), metallic: 0.0, roughness: 0.0, normal: V3::zeros() }
    }
}

fn reflect_dir_raw(n: &V3, wo: &V3) -> V3 {
    n * (2.0 * n.dot(wo)) - wo
}

/// Reflected view direction `2 (n.wo) n - wo`, renormalized.
pub fn reflect_dir(n: &V3, wo: &V3) -> V3 {
    reflect_dir_raw(n, wo).normalize()
}

/// Split-sum shading of a raw G-buffer pixel; background pixels return the
/// background colour.
pub fn shade_splitsum(px: &crate::splat::GPixel, light: &EnvironmentLight, brdf: &Brdf, background: &Rgb) -> Rgb {
    if !px.is_foreground() {
        return *background;
    }
    light.shade_or_background(px.shading().as_ref(), brdf, background)
}

/// Specular split-sum prediction for a material and view under `light`
/// (used by consistency checks against Monte Carlo references).
pub fn splitsum_specular(light: &EnvironmentLight, normal: &V3, wo: &V3, mat: &Material) -> Rgb {
    let cos_o = normal.dot(wo).max(COS_FLOOR);
    let lut = light.lut.lookup(cos_o, mat.roughness);
    let env = light.sample_env(&reflect_dir(normal, wo), light.mip_for_roughness(mat.roughness));
    (mat.f0() * lut.scale + Rgb::repeat(lut.bias)).component_mul(&env)
}

// ---------------------------------------------------------------------------
// Radiance HDR input and the light bundle.

/// Equirectangular RGB float image with `+z` up: column `x` maps to azimuth
/// `phi = 2 pi (x + 0.5) / width` measured from `+x` towards `+y`, row `y`
/// to polar angle `theta = pi (y + 0.5) / height` from `+z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Equirect {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Equirect {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(&V3) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(&Self::pixel_direction(x as f64 + 0.5, y as f64 + 0.5, width, height)));
            }
        }
        Equirect { width, height, pixels }
    }

    fn pixel_direction(x: f64, y: f64, width: usize, height: usize) -> V3 {
        let phi = 2.0 * PI * x / width as f64;
        let theta = PI * y / height as f64;
        V3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    /// Bilinear lookup, wrapping in azimuth and clamping in polar angle.
    pub fn sample(&self, d: &V3) -> Rgb {
        let d = d.normalize();
        let phi = d.y.atan2(d.x).rem_euclid(2.0 * PI);
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let x = phi / (2.0 * PI) * self.width as f64 - 0.5;
        let y = (theta / PI * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor();
        let fx = x - x0;
        let y0 = y.floor().min((self.height - 1) as f64);
        let fy = y - y0;
        let w = self.width as isize;
        let xi0 = (x0 as isize).rem_euclid(w) as usize;
        let xi1 = (x0 as isize + 1).rem_euclid(w) as usize;
        let yi0 = y0 as usize;
        let yi1 = (yi0 + 1).min(self.height - 1);
        let at = |x: usize, y: usize| self.pixels[y * self.width + x];
        let top = at(xi0, yi0) * (1.0 - fx) + at(xi1, yi0) * fx;
        let bottom = at(xi0, yi1) * (1.0 - fx) + at(xi1, yi1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resamples to a cubemap face size with 4x4 supersampling per texel.
    pub fn to_cubemap(&self, size: usize) -> CubeLevel {
        let sub = 4;
        let texels = (0..6 * size * size)
            .into_par_iter()
            .map(|k| {
                let face = k / (size * size);
                let j = (k / size) % size;
                let i = k % size;
                let mut acc = Rgb::zeros();
                for sj in 0..sub {
                    for si in 0..sub {
                        let u = 2.0 * (i as f64 + (si as f64 + 0.5) / sub as f64) / size as f64 - 1.0;
                        let v = 2.0 * (j as f64 + (sj as f64 + 0.5) / sub as f64) / size as f64 - 1.0;
                        acc += self.sample(&face_direction(face, u, v));
                    }
                }
                acc / (sub * sub) as f64
            })
            .collect();
        CubeLevel { size, texels }
    }
}

pub fn load_hdr(path: &Path) -> Result<Equirect> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = img.into_rgb32f();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb
        .pixels()
        .map(|p| Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect::<Vec<_>>();
    if pixels.iter().any(|p| !p.iter().all(|v| v.is_finite() && *v >= 0.0)) {
        return Err(Error::format(path, "non-finite or negative radiance"));
    }
    Ok(Equirect { width, height, pixels })
}

pub fn save_hdr(env: &Equirect, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let data: Vec<image::Rgb<f32>> = env
        .pixels
        .iter()
        .map(|p| image::Rgb([p.x as f32, p.y as f32, p.z as f32]))
        .collect();
    image::codecs::hdr::HdrEncoder::new(std::io::BufWriter::new(file))
        .encode(&data, env.width, env.height)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub const BUNDLE_MAGIC: &[u8; 4] = b"SPLB";
pub const BUNDLE_VERSION: u32 = 1;

/// Writes the light bundle: header, mip chain, irradiance map and LUT as
/// little-endian `f32` (layout in `docs/formats.md`).
pub fn write_bundle<W: Write>(light: &EnvironmentLight, mut w: W) -> std::io::Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    for v in [
        BUNDLE_VERSION,
        light.base_size() as u32,
        light.levels() as u32,
        light.irradiance.size as u32,
        light.lut.size as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut put = |x: f64| w.write_all(&(x as f32).to_le_bytes());
    for level in light.mips.iter().chain(std::iter::once(&light.irradiance)) {
        for t in &level.texels {
            put(t.x)?;
            put(t.y)?;
            put(t.z)?;
        }
    }
    for (s, b) in &light.lut.table {
        put(*s)?;
        put(*b)?;
    }
    Ok(())
}

/// Reads a light bundle written by [`write_bundle`].
pub fn read_bundle<R: Read>(mut r: R, settings: PrefilterSettings) -> std::io::Result<EnvironmentLight> {
    let invalid = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(invalid("bad light bundle magic"));
    }
    let mut word = || -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != BUNDLE_VERSION {
        return Err(invalid("unsupported light bundle version"));
    }
    let (size, levels, irr_size, lut_size) = (word()? as usize, word()? as usize, word()? as usize, word()? as usize);
    if size == 0 || !size.is_power_of_two() || levels != size.trailing_zeros() as usize + 1 || irr_size == 0 || lut_size < 2 {
        return Err(invalid("inconsistent light bundle header"));
    }
    let mut float = || -> std::io::Result<f64> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    };
    let mut read_level = |s: usize| -> std::io::Result<CubeLevel> {
        let mut texels = Vec::with_capacity(6 * s * s);
        for _ in 0..6 * s * s {
            texels.push(Rgb::new(float()?, float()?, float()?));
        }
        Ok(CubeLevel { size: s, texels })
    };
    let mips = (0..levels).map(|l| read_level(size >> l)).collect::<std::io::Result<Vec<_>>>()?;
    let irradiance = read_level(irr_size)?;
    let mut table = Vec::with_capacity(lut_size * lut_size);
    for _ in 0..lut_size * lut_size {
        table.push((float()?, float()?));
    }
    let settings = PrefilterSettings { irradiance_size: irr_size, ..settings };
    Ok(EnvironmentLight {
        irradiance_op: IrradianceOperator::new(size, irr_size),
        mips,
        irradiance,
        lut: BrdfLut { size: lut_size, table },
        settings,
    })
}
