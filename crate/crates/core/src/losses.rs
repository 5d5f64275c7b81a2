//! Training losses with their gradients, and the weighted stage totals.
//!
//! Every loss is a mean over the pixels it applies to and returns the
//! gradient with respect to each of its per-pixel inputs.

use log::warn;

use crate::math::{Rgb, V3};
use crate::splat::{ContributionGrad, ContributionList};

/// Clamp applied to opacities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-6;

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A scalar loss and its gradient with respect to each input element.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Vec<T>,
    /// Number of pixels that entered the mean.
    pub count: usize,
    /// Pixels left out because their input was degenerate.
    pub skipped: usize,
}

/// Mean absolute error over masked pixels and channels. An empty mask gives
/// zero (and `count == 0`).
pub fn loss_color(render: &[Rgb], gt: &[Rgb], mask: Option<&[bool]>) -> Loss<Rgb> {
    assert_eq!(render.len(), gt.len());
    let count = mask.map_or(render.len(), |m| m.iter().filter(|&&b| b).count());
    let mut grad = vec![Rgb::zeros(); render.len()];
    if count == 0 {
        warn!("colour loss over an empty mask");
        return Loss { value: 0.0, grad, count, skipped: 0 };
    }
    let scale = 1.0 / (3 * count) as f64;
    let mut value = 0.0;
    for i in 0..render.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let d = render[i] - gt[i];
        value += d.x.abs() + d.y.abs() + d.z.abs();
        grad[i] = d.map(sgn) * scale;
    }
    Loss { value: value * scale, grad, count, skipped: 0 }
}

/// Prior-normal loss `|N - P|_1 + lambda (1 - cos(N, P))` averaged over
/// pixels with a prior. Zero-length rendered normals are skipped.
pub fn loss_normal_prior(rendered: &[V3], prior: &[Option<V3>], lambda: f64) -> Loss<V3> {
    assert_eq!(rendered.len(), prior.len());
    let mut grad = vec![V3::zeros(); rendered.len()];
    let mut value = 0.0;
    let mut used = Vec::new();
    let mut skipped = 0;
    for (i, (n, p)) in rendered.iter().zip(prior).enumerate() {
        let Some(p) = p else { continue };
        let ln = n.norm();
        let lp = p.norm();
        if ln <= 1e-12 || lp <= 1e-12 {
            skipped += 1;
            continue;
        }
        let d = n - p;
        let cos = n.dot(p) / (ln * lp);
        value += d.x.abs() + d.y.abs() + d.z.abs() + lambda * (1.0 - cos);
        let dcos = p / (ln * lp) - n * (n.dot(p) / (ln * ln * ln * lp));
        grad[i] = d.map(sgn) - dcos * lambda;
        used.push(i);
    }
    let count = used.len();
    if count == 0 {
        return Loss { value: 0.0, grad, count, skipped };
    }
    let s = 1.0 / count as f64;
    for i in used {
        grad[i] *= s;
    }
    Loss { value: value * s, grad, count, skipped }
}

/// Scale-invariant depth loss with its per-view affine fit.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub loss: Loss<f64>,
    pub scale: f64,
    pub shift: f64,
    /// Set when the rendered depths are constant and only the shift was fit.
    pub degenerate: bool,
}

/// `min_{w,b} mean((w D + b - P)^2)` over masked pixels, solved in closed
/// form. By the envelope theorem the gradient is `2 w r / n` at the optimum.
pub fn loss_depth_scale_invariant(rendered: &[f64], prior: &[f64], mask: &[bool]) -> DepthLoss {
    assert!(rendered.len() == prior.len() && prior.len() == mask.len());
    let idx: Vec<usize> = (0..rendered.len()).filter(|&i| mask[i]).collect();
    let n = idx.len();
    let mut grad = vec![0.0; rendered.len()];
    if n == 0 {
        return DepthLoss { loss: Loss { value: 0.0, grad, count: 0, skipped: 0 }, scale: 1.0, shift: 0.0, degenerate: true };
    }
    let nf = n as f64;
    let mx = idx.iter().map(|&i| rendered[i]).sum::<f64>() / nf;
    let my = idx.iter().map(|&i| prior[i]).sum::<f64>() / nf;
    let sxx: f64 = idx.iter().map(|&i| (rendered[i] - mx).powi(2)).sum();
    let sxy: f64 = idx.iter().map(|&i| (rendered[i] - mx) * (prior[i] - my)).sum();
    let spread = idx.iter().map(|&i| rendered[i].abs()).fold(0.0, f64::max).max(1.0);
    let degenerate = n < 2 || sxx <= 1e-20 * spread * spread * nf;
    let (w, b) = if degenerate { (0.0, my) } else { (sxy / sxx, my - sxy / sxx * mx) };
    let mut value = 0.0;
    for &i in &idx {
        let r = w * rendered[i] + b - prior[i];
        value += r * r;
        grad[i] = 2.0 * w * r / nf;
    }
    DepthLoss { loss: Loss { value: value / nf, grad, count: n, skipped: 0 }, scale: w, shift: b, degenerate }
}

/// Binary cross-entropy between accumulated opacity and the object mask.
pub fn loss_opacity_bce(opacity: &[f64], mask: &[bool]) -> Loss<f64> {
    assert_eq!(opacity.len(), mask.len());
    let n = opacity.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        return Loss { value: 0.0, grad, count: 0, skipped: 0 };
    }
    let s = 1.0 / n as f64;
    let mut value = 0.0;
    for i in 0..n {
        let o = opacity[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
        let inside = opacity[i] > BCE_EPS && opacity[i] < 1.0 - BCE_EPS;
        if mask[i] {
            value -= o.ln();
            if inside {
                grad[i] = -s / o;
            }
        } else {
            value -= (1.0 - o).ln();
            if inside {
                grad[i] = s / (1.0 - o);
            }
        }
    }
    Loss { value: value * s, grad, count: n, skipped: 0 }
}

/// Edge-aware smoothness of a `channels`-wide field on a `width x height`
/// grid: mean over pixels with a right and a lower neighbour of
/// `(|dx f|_1 + |dy f|_1) exp(-|grad guide|_1)`, where the guide gradient
/// norm sums both forward differences over the RGB channels. Pixels outside
/// `mask` (when given) are left out.
pub fn loss_smooth(field: &[f64], channels: usize, width: usize, height: usize, guide: &[Rgb], mask: Option<&[bool]>) -> Loss<f64> {
    assert_eq!(field.len(), width * height * channels);
    assert_eq!(guide.len(), width * height);
    let mut grad = vec![0.0; field.len()];
    if width < 2 || height < 2 {
        return Loss { value: 0.0, grad, count: 0, skipped: 0 };
    }
    let mut value = 0.0;
    let mut count = 0usize;
    let mut terms = Vec::new();
    for y in 0..height - 1 {
        for x in 0..width - 1 {
            let i = y * width + x;
            let (r, d) = (i + 1, i + width);
            if mask.is_some_and(|m| !(m[i] && m[r] && m[d])) {
                continue;
            }
            let gx = guide[r] - guide[i];
            let gy = guide[d] - guide[i];
            let wgt = (-(gx.abs().sum() + gy.abs().sum())).exp();
            for c in 0..channels {
                let fx = field[r * channels + c] - field[i * channels + c];
                let fy = field[d * channels + c] - field[i * channels + c];
                value += wgt * (fx.abs() + fy.abs());
                terms.push((i, r, d, c, wgt * sgn(fx), wgt * sgn(fy)));
            }
            count += 1;
        }
    }
    if count == 0 {
        return Loss { value: 0.0, grad, count, skipped: 0 };
    }
    let s = 1.0 / count as f64;
    for (i, r, d, c, sx, sy) in terms {
        grad[r * channels + c] += sx * s;
        grad[d * channels + c] += sy * s;
        grad[i * channels + c] -= (sx + sy) * s;
    }
    Loss { value: value * s, grad, count, skipped: 0 }
}

/// Neutral-light prior on a diffuse incident radiance estimate:
/// `sum_c |L_c - mean(L)|`. Returns the value and its gradient.
pub fn loss_light_white(l: &Rgb) -> (f64, Rgb) {
    // Written relative to the red channel so that gray light is exactly zero.
    let m = l.x + ((l.y - l.x) + (l.z - l.x)) / 3.0;
    let s = Rgb::new(sgn(l.x - m), sgn(l.y - m), sgn(l.z - m));
    let value = (l.x - m).abs() + (l.y - m).abs() + (l.z - m).abs();
    let mean_s = (s.x + s.y + s.z) / 3.0;
    (value, s - Rgb::repeat(mean_s))
}

/// Depth distortion along one ray, `sum_{i,j} w_i w_j |t_i - t_j|`.
pub fn loss_distortion(contribs: &ContributionList) -> (f64, Vec<ContributionGrad>) {
    let items = &contribs.items;
    let n = items.len();
    let mut grad = vec![ContributionGrad::default(); n];
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dt = items[i].t - items[j].t;
            value += items[i].weight * items[j].weight * dt.abs();
            grad[i].weight += 2.0 * items[j].weight * dt.abs();
            grad[i].t += 2.0 * items[i].weight * items[j].weight * sgn(dt);
        }
    }
    (value, grad)
}

/// Normals implied by a map of surface points, from central differences.
/// Defined where the pixel and its four neighbours are in `mask`; oriented
/// towards `view` (the direction to the viewer).
pub fn depth_normals(points: &[V3], view: &[V3], width: usize, height: usize, mask: &[bool]) -> Vec<Option<V3>> {
    let mut out = vec![None; points.len()];
    for y in 1..height.saturating_sub(1) {
        for x in 1..width.saturating_sub(1) {
            let i = y * width + x;
            let nb = [i - 1, i + 1, i - width, i + width];
            if !mask[i] || nb.iter().any(|&k| !mask[k]) {
                continue;
            }
            let c = (points[i + width] - points[i - width]).cross(&(points[i + 1] - points[i - 1]));
            let len = c.norm();
            if len <= 1e-15 {
                continue;
            }
            let n = c / len;
            out[i] = Some(if n.dot(&view[i]) < 0.0 { -n } else { n });
        }
    }
    out
}

/// Normal consistency `mean(1 - N . N_depth)` between rendered unit normals
/// and normals of the rendered surface points. Gradients flow into both.
pub fn loss_normal_consistency(
    normals: &[V3],
    points: &[V3],
    view: &[V3],
    width: usize,
    height: usize,
    mask: &[bool],
) -> (Loss<V3>, Vec<V3>) {
    let nd = depth_normals(points, view, width, height, mask);
    let mut g_n = vec![V3::zeros(); normals.len()];
    let mut g_p = vec![V3::zeros(); points.len()];
    let count = nd.iter().filter(|v| v.is_some()).count();
    if count == 0 {
        return (Loss { value: 0.0, grad: g_n, count: 0, skipped: 0 }, g_p);
    }
    let s = 1.0 / count as f64;
    let mut value = 0.0;
    for (i, d) in nd.iter().enumerate() {
        let Some(d) = d else { continue };
        value += 1.0 - normals[i].dot(d);
        g_n[i] = -d * s;
        // Back through the orientation flip, normalization and cross product.
        let a = points[i + width] - points[i - width];
        let b = points[i + 1] - points[i - 1];
        let c = a.cross(&b);
        let flip = if (c / c.norm()).dot(&view[i]) < 0.0 { -1.0 } else { 1.0 };
        let g_c = crate::math::normalize_backward(&c, &(-normals[i] * (s * flip)));
        let g_a = b.cross(&g_c);
        let g_b = g_c.cross(&a);
        g_p[i + width] += g_a;
        g_p[i - width] -= g_a;
        g_p[i + 1] += g_b;
        g_p[i - 1] -= g_b;
    }
    (Loss { value: value * s, grad: g_n, count, skipped: 0 }, g_p)
}

/// Unweighted loss terms. Each is a nonnegative mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossTerms {
    pub c: f64,
    pub n: f64,
    pub o: f64,
    pub d: f64,
    pub smooth: f64,
    pub geo_n: f64,
    pub geo_d: f64,
    pub light: f64,
}

/// Stage I weights.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Weights {
    pub n: f64,
    pub o: f64,
    pub d: f64,
    pub smooth: f64,
    pub geo_n: f64,
    pub geo_d: f64,
    /// Balance between magnitude and angle in the prior-normal loss.
    pub geo_n_lambda: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Stage1Weights { n: 0.05, o: 0.01, d: 0.05, smooth: 0.01, geo_n: 0.005, geo_d: 0.005, geo_n_lambda: 1.0 }
    }
}

/// Stage II weights.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Weights {
    pub smooth: f64,
    pub light: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { smooth: 2.0, light: 0.01 }
    }
}

/// Terms, the weights they were combined with and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossTerms,
    pub total: f64,
}

impl LossReport {
    fn combine(terms: LossTerms, weights: LossTerms) -> Self {
        let total = weights.c * terms.c
            + weights.n * terms.n
            + weights.o * terms.o
            + weights.d * terms.d
            + weights.smooth * terms.smooth
            + weights.geo_n * terms.geo_n
            + weights.geo_d * terms.geo_d
            + weights.light * terms.light;
        LossReport { terms, weights, total }
    }
}

/// `L_c + l_n L_n + l_o L_o + l_d L_d + l_smooth L_smooth + l_geo-n L_geo-n
/// + l_geo-d L_geo-d`.
pub fn stage1_total(terms: &LossTerms, w: &Stage1Weights) -> LossReport {
    let weights = LossTerms {
        c: 1.0,
        n: w.n,
        o: w.o,
        d: w.d,
        smooth: w.smooth,
        geo_n: w.geo_n,
        geo_d: w.geo_d,
        light: 0.0,
    };
    LossReport::combine(LossTerms { light: 0.0, ..*terms }, weights)
}

/// `L_c + l_smooth L_smooth + l_light L_light`.
pub fn stage2_total(terms: &LossTerms, w: &Stage2Weights) -> LossReport {
    let weights = LossTerms { c: 1.0, smooth: w.smooth, light: w.light, ..LossTerms::default() };
    LossReport::combine(LossTerms { c: terms.c, smooth: terms.smooth, light: terms.light, ..LossTerms::default() }, weights)
}
