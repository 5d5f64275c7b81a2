//! Learned specular compensation: a roughness-indexed feature grid over the
//! reflected direction, decoded together with the blended surfel feature by
//! a small MLP into an additive radiance term.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::envlight::reflect_dir;
use crate::math::{sigmoid, softplus, Rgb, PI, V3};
use crate::surfel::FEATURE_DIM;

pub const GRID_CHANNELS: usize = 16;
pub const MLP_INPUT: usize = FEATURE_DIM + GRID_CHANNELS;
pub const MLP_HIDDEN: usize = 256;
/// The output activation is `softplus(z - OUTPUT_SHIFT)`, nonnegative and
/// close to zero for a zero-initialized output layer.
pub const OUTPUT_SHIFT: f64 = 10.0;

const HIDDEN_BIAS_INIT: f64 = 0.01;

/// Feature grid over `(theta, phi)` of the reflected direction. Only the
/// base level is a parameter; coarser levels are 2x box reductions of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalMipGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `levels[l]` holds `(width >> l) * (height >> l) * channels` values,
    /// row-major over `theta` rows, then `phi` columns, then channels.
    pub levels: Vec<Vec<f64>>,
}

/// One bilinear tap set on one level.
#[derive(Clone, Copy, Debug)]
struct GridTaps {
    index: [usize; 4],
    weight: [f64; 4],
}

/// Trilinear lookup plan: up to two levels with their blend weights.
#[derive(Clone, Debug)]
pub struct GridQuery {
    taps: Vec<(usize, f64, GridTaps)>,
}

impl SphericalMipGrid {
    pub fn zeros(width: usize, height: usize, channels: usize, levels: usize) -> Self {
        assert!(levels >= 1);
        assert!(
            width >> (levels - 1) >= 1 && height >> (levels - 1) >= 1,
            "grid {width}x{height} too small for {levels} levels"
        );
        let levels = (0..levels).map(|l| vec![0.0; (width >> l) * (height >> l) * channels]).collect();
        SphericalMipGrid { width, height, channels, levels }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.width >> level, self.height >> level)
    }

    pub fn base(&self) -> &[f64] {
        &self.levels[0]
    }

    pub fn base_mut(&mut self) -> &mut [f64] {
        &mut self.levels[0]
    }

    /// Recomputes every coarser level from the base.
    pub fn rebuild_mips(&mut self) {
        let c = self.channels;
        for l in 1..self.levels.len() {
            let (w, h) = self.level_dims(l);
            let (pw, _) = self.level_dims(l - 1);
            let (lo, hi) = self.levels.split_at_mut(l);
            let src = &lo[l - 1];
            let dst = &mut hi[0];
            for j in 0..h {
                for i in 0..w {
                    for k in 0..c {
                        let at = |ii: usize, jj: usize| src[(jj * pw + ii) * c + k];
                        dst[(j * w + i) * c + k] =
                            0.25 * (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1));
                    }
                }
            }
        }
    }

    /// Folds per-level gradients onto the base level (adjoint of
    /// [`rebuild_mips`](Self::rebuild_mips)).
    pub fn fold_gradient(&self, grads: &mut [Vec<f64>]) {
        let c = self.channels;
        for l in (1..self.levels.len()).rev() {
            let (w, h) = self.level_dims(l);
            let (pw, _) = self.level_dims(l - 1);
            let (lo, hi) = grads.split_at_mut(l);
            let dst = &mut lo[l - 1];
            let src = &hi[0];
            for j in 0..h {
                for i in 0..w {
                    for k in 0..c {
                        let g = 0.25 * src[(j * w + i) * c + k];
                        if g == 0.0 {
                            continue;
                        }
                        for (ii, jj) in [(2 * i, 2 * j), (2 * i + 1, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j + 1)] {
                            dst[(jj * pw + ii) * c + k] += g;
                        }
                    }
                }
            }
        }
    }

    pub fn zero_gradient(&self) -> Vec<Vec<f64>> {
        self.levels.iter().map(|l| vec![0.0; l.len()]).collect()
    }

    fn bilinear(&self, level: usize, theta: f64, phi: f64) -> GridTaps {
        let (w, h) = self.level_dims(level);
        let x = phi / (2.0 * PI) * w as f64 - 0.5;
        let y = theta / PI * h as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let wrap = |i: i64| i.rem_euclid(w as i64) as usize;
        let clamp = |j: i64| j.clamp(0, h as i64 - 1) as usize;
        let (i0, i1) = (wrap(x0 as i64), wrap(x0 as i64 + 1));
        let (j0, j1) = (clamp(y0 as i64), clamp(y0 as i64 + 1));
        GridTaps {
            index: [j0 * w + i0, j0 * w + i1, j1 * w + i0, j1 * w + i1],
            weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    /// Lookup plan for spherical coordinates and a fractional mip.
    pub fn query_angles(&self, theta: f64, phi: f64, mip: f64) -> GridQuery {
        let last = self.levels.len() - 1;
        let mip = mip.clamp(0.0, last as f64);
        let l0 = mip.floor() as usize;
        let t = mip - l0 as f64;
        let mut taps = vec![(l0, 1.0 - t, self.bilinear(l0, theta, phi))];
        if l0 < last && t > 0.0 {
            taps.push((l0 + 1, t, self.bilinear(l0 + 1, theta, phi)));
        }
        GridQuery { taps }
    }

    pub fn lookup(&self, q: &GridQuery) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; c];
        for (level, lw, taps) in &q.taps {
            let data = &self.levels[*level];
            for k in 0..4 {
                let w = lw * taps.weight[k];
                let base = taps.index[k] * c;
                for (o, v) in out.iter_mut().zip(&data[base..base + c]) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Accumulates `up . lookup(q)` into per-level gradients.
    pub fn lookup_backward(&self, q: &GridQuery, up: &[f64], grads: &mut [Vec<f64>]) {
        let c = self.channels;
        for (level, lw, taps) in &q.taps {
            let g = &mut grads[*level];
            for k in 0..4 {
                let w = lw * taps.weight[k];
                let base = taps.index[k] * c;
                for (o, u) in g[base..base + c].iter_mut().zip(up) {
                    *o += w * u;
                }
            }
        }
    }

    /// Lookup plan for the reflection of `wo` about `normal` at roughness
    /// `roughness`.
    pub fn query(&self, normal: &V3, wo: &V3, roughness: f64) -> GridQuery {
        let (theta, phi) = direction_angles(&reflect_dir(normal, wo));
        self.query_angles(theta, phi, roughness.clamp(0.0, 1.0) * (self.levels.len() - 1) as f64)
    }

    /// Directional encoding `h` for a shading configuration.
    pub fn encode_direction(&self, normal: &V3, wo: &V3, roughness: f64) -> Vec<f64> {
        self.lookup(&self.query(normal, wo, roughness))
    }
}

/// Polar angle from `+z` and azimuth in `[0, 2 pi)` from `+x` towards `+y`.
pub fn direction_angles(d: &V3) -> (f64, f64) {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    if phi >= 2.0 * PI {
        phi -= 2.0 * PI;
    }
    (theta, phi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// Rectified MLP with a shifted-softplus RGB output.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationMlp {
    pub layers: Vec<Dense>,
}

/// Pre-activations of every layer for one forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    /// Smallest hidden pre-activation magnitude, i.e. distance to a ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        let hidden = &self.pre[..self.pre.len().saturating_sub(1)];
        hidden.iter().flatten().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Gradients shaped like [`CompensationMlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrad {
    pub fn accumulate(&mut self, o: &MlpGrad) {
        for (a, b) in self.weights.iter_mut().zip(&o.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&o.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl CompensationMlp {
    /// Fan-in scaled normal init on hidden layers, zero output layer.
    /// Hidden biases start slightly positive so the network is not dead
    /// for the all-zero input of a fresh grid and zero surfel features.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (inputs, outputs) = (widths[k], widths[k + 1]);
                let weights = if k + 1 == n {
                    vec![0.0; inputs * outputs]
                } else {
                    let std = (2.0 / inputs as f64).sqrt();
                    (0..inputs * outputs).map(|_| gaussian(&mut rng) * std).collect()
                };
                let bias = vec![if k + 1 == n { 0.0 } else { HIDDEN_BIAS_INIT }; outputs];
                Dense { inputs, outputs, weights, bias }
            })
            .collect();
        CompensationMlp { layers }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(&[MLP_INPUT, MLP_HIDDEN, MLP_HIDDEN, 3], seed)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Rgb, MlpTrace) {
        assert_eq!(x.len(), self.input_size());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&act);
            act = if k + 1 == self.layers.len() { z.iter().map(|&v| softplus(v - OUTPUT_SHIFT)).collect() } else { z.iter().map(|&v| v.max(0.0)).collect() };
            pre.push(z);
        }
        (Rgb::new(act[0], act[1], act[2]), MlpTrace { input: x.to_vec(), pre })
    }

    pub fn forward(&self, x: &[f64]) -> Rgb {
        self.forward_traced(x).0
    }

    /// Accumulates the parameter gradient of `up . f(x)` and returns the
    /// input gradient.
    pub fn backward(&self, trace: &MlpTrace, up: &Rgb, grad: &mut MlpGrad) -> Vec<f64> {
        let n = self.layers.len();
        let last = &trace.pre[n - 1];
        let mut delta: Vec<f64> = (0..3).map(|c| up[c] * sigmoid(last[c] - OUTPUT_SHIFT)).collect();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let relu;
            let input: &[f64] = if k == 0 {
                &trace.input
            } else {
                relu = trace.pre[k - 1].iter().map(|&v| v.max(0.0)).collect::<Vec<_>>();
                &relu
            };
            let gw = &mut grad.weights[k];
            for (o, d) in delta.iter().enumerate() {
                grad.bias[k][o] += d;
                if *d == 0.0 {
                    continue;
                }
                for (g, x) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (b, w) in back.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *b += d * w;
                }
            }
            if k > 0 {
                for (b, z) in back.iter_mut().zip(&trace.pre[k - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        delta
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Reconstruction,
    Relighting,
}

/// `L_pbr + L_c` when reconstructing, `L_pbr` when relighting.
pub fn final_radiance(l_pbr: &Rgb, l_c: &Rgb, mode: RenderMode) -> Rgb {
    match mode {
        RenderMode::Reconstruction => l_pbr + l_c,
        RenderMode::Relighting => *l_pbr,
    }
}

/// Grid plus decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecComp {
    pub grid: SphericalMipGrid,
    pub mlp: CompensationMlp,
}

/// Cached forward state for one shading point.
#[derive(Clone, Debug)]
pub struct CompTrace {
    query: GridQuery,
    mlp: MlpTrace,
}

/// Gradient with respect to every spec-comp parameter.
#[derive(Clone, Debug)]
pub struct SpecCompGrad {
    pub grid: Vec<Vec<f64>>,
    pub mlp: MlpGrad,
}

impl SpecCompGrad {
    pub fn accumulate(&mut self, o: &SpecCompGrad) {
        for (a, b) in self.grid.iter_mut().zip(&o.grid) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.mlp.accumulate(&o.mlp);
    }
}

impl SpecComp {
    pub fn new(width: usize, height: usize, levels: usize, seed: u64) -> Self {
        SpecComp { grid: SphericalMipGrid::zeros(width, height, GRID_CHANNELS, levels), mlp: CompensationMlp::standard(seed) }
    }

    /// `L_c = f_c(K, h)`.
    pub fn compensate(&self, feature: &[f64], h: &[f64]) -> Rgb {
        let mut x = Vec::with_capacity(feature.len() + h.len());
        x.extend_from_slice(feature);
        x.extend_from_slice(h);
        self.mlp.forward(&x)
    }

    pub fn forward(&self, feature: &[f64], normal: &V3, wo: &V3, roughness: f64) -> (Rgb, CompTrace) {
        let query = self.grid.query(normal, wo, roughness);
        let h = self.grid.lookup(&query);
        let mut x = Vec::with_capacity(feature.len() + h.len());
        x.extend_from_slice(feature);
        x.extend_from_slice(&h);
        let (out, mlp) = self.mlp.forward_traced(&x);
        (out, CompTrace { query, mlp })
    }

    pub fn zero_grad(&self) -> SpecCompGrad {
        SpecCompGrad { grid: self.grid.zero_gradient(), mlp: self.mlp.zero_grad() }
    }

    /// Parameter gradient of `up . L_c`; the grid gradient stays per level
    /// until [`SphericalMipGrid::fold_gradient`] is applied.
    pub fn backward(&self, trace: &CompTrace, up: &Rgb, grad: &mut SpecCompGrad) {
        let dx = self.mlp.backward(&trace.mlp, up, &mut grad.mlp);
        let dh = &dx[dx.len() - self.grid.channels..];
        self.grid.lookup_backward(&trace.query, dh, &mut grad.grid);
    }

    /// Like [`backward`](Self::backward) but returns the grid query and the
    /// gradient on the looked-up grid features instead of scattering them,
    /// so the grid part can be applied later in a fixed order.
    pub fn backward_split(&self, trace: &CompTrace, up: &Rgb, mlp_grad: &mut MlpGrad) -> (GridQuery, Vec<f64>) {
        let dx = self.mlp.backward(&trace.mlp, up, mlp_grad);
        (trace.query.clone(), dx[dx.len() - self.grid.channels..].to_vec())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SECTION_MAGIC)?;
        for v in [self.grid.width, self.grid.height, self.grid.channels, self.grid.levels.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64s(&mut w, self.grid.base())?;
        w.write_all(&(self.mlp.layers.len() as u32).to_le_bytes())?;
        for l in &self.mlp.layers {
            w.write_all(&(l.inputs as u32).to_le_bytes())?;
            w.write_all(&(l.outputs as u32).to_le_bytes())?;
            write_f64s(&mut w, &l.weights)?;
            write_f64s(&mut w, &l.bias)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SECTION_MAGIC {
            return Err(invalid("bad spec-comp section magic"));
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let levels = read_u32(&mut r)? as usize;
        if levels == 0 || levels > 16 || channels == 0 || width >> (levels - 1) == 0 || height >> (levels - 1) == 0 {
            return Err(invalid("bad spec-comp grid dimensions"));
        }
        let mut grid = SphericalMipGrid::zeros(width, height, channels, levels);
        read_f64s(&mut r, grid.base_mut())?;
        grid.rebuild_mips();
        let n = read_u32(&mut r)? as usize;
        if n == 0 || n > 64 {
            return Err(invalid("bad layer count"));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let inputs = read_u32(&mut r)? as usize;
            let outputs = read_u32(&mut r)? as usize;
            if inputs == 0 || outputs == 0 || inputs * outputs > 1 << 26 {
                return Err(invalid("bad layer shape"));
            }
            let mut weights = vec![0.0; inputs * outputs];
            read_f64s(&mut r, &mut weights)?;
            let mut bias = vec![0.0; outputs];
            read_f64s(&mut r, &mut bias)?;
            layers.push(Dense { inputs, outputs, weights, bias });
        }
        if layers.last().map(|l| l.outputs) != Some(3) || layers[0].inputs != FEATURE_DIM + channels {
            return Err(invalid("mlp shape does not match grid"));
        }
        Ok(SpecComp { grid, mlp: CompensationMlp { layers } })
    }
}

pub const SECTION_MAGIC: &[u8; 4] = b"SPCC";

fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (o, c) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
