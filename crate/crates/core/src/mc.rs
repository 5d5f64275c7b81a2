//! Monte Carlo shading of the full rendering equation: cosine and GGX
//! importance sampling combined with the balance heuristic, incident light
//! split into occluded direct and one-bounce indirect parts, and the
//! gradient of the estimate with the sample set held fixed.

use std::io::Write;

use rand::Rng;

use crate::brdf::{ggx_d, sample_ggx_half, Brdf, BrdfValue, Material, MaterialGrad, ShadingFrame};
use crate::envlight::{EnvironmentLight, LightGrad};
use crate::error::{Error, Result};
use crate::math::{local_to_world, reflect, sample_stream, Rgb, INV_PI, PI, V3};
use crate::splat::{HitCollector, ShadingPoint};
use crate::trace::Tracer;

/// Samples whose mixture density falls below this are skipped.
pub const PDF_EPS: f64 = 1e-9;

/// Per-pixel sample counts for the two strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleBudget {
    pub n_d: usize,
    pub n_s: usize,
    pub seed: u64,
}

impl SampleBudget {
    pub fn new(n_d: usize, n_s: usize, seed: u64) -> Result<Self> {
        if n_d == 0 || n_s == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample budget needs at least one sample per strategy, got N_d={n_d}, N_s={n_s}"
            )));
        }
        Ok(SampleBudget { n_d, n_s, seed })
    }

    pub fn total(&self) -> usize {
        self.n_d + self.n_s
    }

    pub fn pi_d(&self) -> f64 {
        self.n_d as f64 / self.total() as f64
    }

    pub fn pi_s(&self) -> f64 {
        self.n_s as f64 / self.total() as f64
    }
}

/// Which directions are drawn and how they are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Strategy {
    /// `N_d` cosine and `N_s` GGX samples under balance-heuristic weights.
    #[serde(rename = "mis")]
    Mis,
    /// All samples from the cosine distribution.
    #[serde(rename = "cosine")]
    CosineOnly,
    /// All samples from the GGX reflection distribution.
    #[serde(rename = "ggx")]
    GgxOnly,
    /// All samples uniform over the hemisphere (no importance sampling).
    #[serde(rename = "uniform")]
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Technique {
    Cosine,
    Ggx,
    Uniform,
}

impl Technique {
    fn name(&self) -> &'static str {
        match self {
            Technique::Cosine => "cosine",
            Technique::Ggx => "ggx",
            Technique::Uniform => "uniform",
        }
    }
}

#[inline]
pub fn pdf_cosine(n: &V3, wi: &V3) -> f64 {
    n.dot(wi).max(0.0) * INV_PI
}

/// Concentric map of the unit square onto the unit disk. Inputs are shifted
/// by one half (mod 1) so that `(0, 0)` lands on the disk centre.
pub fn concentric_disk(u1: f64, u2: f64) -> (f64, f64) {
    let a = 2.0 * (u1 + 0.5).fract() - 1.0;
    let b = 2.0 * (u2 + 0.5).fract() - 1.0;
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, phi) = if a.abs() > b.abs() {
        (a, 0.25 * PI * (b / a))
    } else {
        (b, 0.5 * PI - 0.25 * PI * (a / b))
    };
    (r * phi.cos(), r * phi.sin())
}

/// Cosine-distributed direction about `n` and its density.
pub fn sample_cosine(n: &V3, u1: f64, u2: f64) -> (V3, f64) {
    let (x, y) = concentric_disk(u1, u2);
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    let wi = local_to_world(n, &V3::new(x, y, z)).normalize();
    (wi, pdf_cosine(n, &wi))
}

pub fn pdf_uniform(n: &V3, wi: &V3) -> f64 {
    if n.dot(wi) > 0.0 {
        0.5 * INV_PI
    } else {
        0.0
    }
}

pub fn sample_uniform(n: &V3, u1: f64, u2: f64) -> (V3, f64) {
    let z = u1;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    let wi = local_to_world(n, &V3::new(r * phi.cos(), r * phi.sin(), z)).normalize();
    (wi, pdf_uniform(n, &wi))
}

/// Density of `wi` under GGX half-vector sampling reflected about `wo`:
/// `D(h)(n.h) / (4 wo.h)`.
pub fn pdf_ggx(frame: &ShadingFrame, alpha: f64, wi: &V3) -> f64 {
    let sum = wi + frame.wo;
    let len = sum.norm();
    if len < 1e-12 {
        return 0.0;
    }
    let h = sum / len;
    let cos_h = frame.normal.dot(&h);
    let cos_oh = frame.wo.dot(&h);
    if cos_h <= 0.0 || cos_oh <= 0.0 {
        return 0.0;
    }
    ggx_d(cos_h, alpha) * cos_h / (4.0 * cos_oh)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GgxSample {
    pub wi: V3,
    pub h: V3,
    pub pdf: f64,
    /// False when `wi` falls below the horizon; such samples contribute zero.
    pub valid: bool,
}

pub fn sample_ggx(frame: &ShadingFrame, alpha: f64, u1: f64, u2: f64) -> GgxSample {
    let (h, d_cos) = sample_ggx_half(&frame.normal, alpha, u1, u2);
    let wi = reflect(&frame.wo, &h);
    let cos_oh = frame.wo.dot(&h);
    let pdf = if cos_oh > 0.0 { d_cos / (4.0 * cos_oh) } else { 0.0 };
    GgxSample { wi, h, pdf, valid: frame.normal.dot(&wi) > 0.0 && pdf > 0.0 }
}

/// Balance-heuristic weight of strategy `k` for a sample with the given
/// densities.
pub fn mis_weight(k: Technique, budget: &SampleBudget, pdf_d: f64, pdf_s: f64) -> f64 {
    let qd = budget.pi_d() * pdf_d;
    let qs = budget.pi_s() * pdf_s;
    let q = qd + qs;
    if q <= 0.0 {
        return 0.0;
    }
    match k {
        Technique::Cosine => qd / q,
        Technique::Ggx => qs / q,
        Technique::Uniform => 0.0,
    }
}

/// Incident radiance split as in `L_i = V L_dir + L_ind`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Incident {
    pub visibility: f64,
    pub direct: Rgb,
    pub indirect: Rgb,
}

impl Incident {
    pub fn total(&self) -> Rgb {
        self.direct * self.visibility + self.indirect
    }
}

/// Source of incident radiance at a shading point.
pub trait IncidentLight: Sync {
    fn incident(&self, x: &V3, normal: &V3, wi: &V3) -> Incident;
    fn light(&self) -> &EnvironmentLight;
}

/// Distant light with nothing in between.
impl IncidentLight for EnvironmentLight {
    fn incident(&self, _x: &V3, _normal: &V3, wi: &V3) -> Incident {
        Incident { visibility: 1.0, direct: self.radiance(wi), indirect: Rgb::zeros() }
    }

    fn light(&self) -> &EnvironmentLight {
        self
    }
}

/// Distant light occluded by the surfel scene, plus one bounce off it.
pub struct TracedLight<'a, C: HitCollector + ?Sized> {
    pub tracer: &'a Tracer<'a, C>,
    pub light: &'a EnvironmentLight,
    pub brdf: Brdf,
    /// Surfels contributing to the primary ray, never hit by its secondaries.
    pub exclude: &'a [usize],
    pub indirect: bool,
}

impl<C: HitCollector + ?Sized> IncidentLight for TracedLight<'_, C> {
    fn incident(&self, x: &V3, normal: &V3, wi: &V3) -> Incident {
        let ray = self.tracer.secondary_ray(x, normal, wi);
        let (visibility, indirect) = if self.indirect {
            let r = self.tracer.trace(&ray, self.exclude, self.light, &self.brdf);
            (r.transmittance, r.radiance)
        } else {
            (self.tracer.trace_visibility(&ray, self.exclude), Rgb::zeros())
        };
        Incident { visibility, direct: self.light.radiance(wi), indirect }
    }

    fn light(&self) -> &EnvironmentLight {
        self.light
    }
}

/// `V L_dir + L_ind` along `wi` from `x`.
pub fn incident_radiance(x: &V3, normal: &V3, wi: &V3, source: &dyn IncidentLight) -> Rgb {
    source.incident(x, normal, wi).total()
}

/// One drawn direction with everything needed to replay its contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord {
    pub technique: Technique,
    pub direction: V3,
    pub pdf_d: f64,
    pub pdf_s: f64,
    /// Balance-heuristic weight of the drawing strategy (1 for single
    /// strategies).
    pub weight: f64,
    /// `N q` where `q` is the density of the full sampling mixture; the
    /// contribution is `f L cos / (N q)`.
    pub normalizer: f64,
    pub cos: f64,
    pub incident: Incident,
    pub brdf: BrdfValue,
    pub valid: bool,
}

impl SampleRecord {
    pub fn contribution(&self) -> BrdfValue {
        if !self.valid {
            return BrdfValue::zero();
        }
        let li = self.incident.total() * (self.cos / self.normalizer);
        BrdfValue { diffuse: self.brdf.diffuse.component_mul(&li), specular: self.brdf.specular.component_mul(&li) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MCEstimate {
    pub diffuse: Rgb,
    pub specular: Rgb,
    pub records: Vec<SampleRecord>,
    /// Set when no sample contributed.
    pub all_invalid: bool,
}

impl MCEstimate {
    pub fn zero() -> Self {
        MCEstimate { diffuse: Rgb::zeros(), specular: Rgb::zeros(), records: Vec::new(), all_invalid: true }
    }

    pub fn pbr(&self) -> Rgb {
        self.diffuse + self.specular
    }

    /// Mean incident radiance over the cosine samples, the quantity the
    /// neutral-light prior acts on.
    pub fn diffuse_incident(&self) -> Option<Rgb> {
        let cos: Vec<&SampleRecord> = self.records.iter().filter(|r| r.technique == Technique::Cosine && r.valid).collect();
        if cos.is_empty() {
            return None;
        }
        Some(cos.iter().fold(Rgb::zeros(), |a, r| a + r.incident.total()) / cos.len() as f64)
    }

    /// Records of the cosine samples that entered [`diffuse_incident`].
    pub fn diffuse_incident_records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.technique == Technique::Cosine && r.valid)
    }
}

/// Estimates outgoing radiance at one shading point. Samples come from the
/// stream `(budget.seed, key, counter)`: all cosine draws first, then all
/// GGX draws, two uniforms each.
pub fn estimate_radiance(
    sp: &ShadingPoint,
    brdf: &Brdf,
    source: &dyn IncidentLight,
    budget: &SampleBudget,
    strategy: Strategy,
    key: u64,
    counter: u64,
) -> MCEstimate {
    let mat = sp.material();
    let frame = ShadingFrame::new(sp.normal, sp.view_dir);
    let alpha = mat.alpha();
    let total = budget.total();
    let mut rng = sample_stream(budget.seed, key, counter);
    let mut records = Vec::with_capacity(total);
    let plan: Vec<Technique> = match strategy {
        Strategy::Mis => std::iter::repeat_n(Technique::Cosine, budget.n_d)
            .chain(std::iter::repeat_n(Technique::Ggx, budget.n_s))
            .collect(),
        Strategy::CosineOnly => vec![Technique::Cosine; total],
        Strategy::GgxOnly => vec![Technique::Ggx; total],
        Strategy::Uniform => vec![Technique::Uniform; total],
    };
    for technique in plan {
        let (u1, u2): (f64, f64) = (rng.random(), rng.random());
        let (wi, drawn_ok) = match technique {
            Technique::Cosine => {
                let (wi, pdf) = sample_cosine(&frame.normal, u1, u2);
                (wi, pdf > 0.0)
            }
            Technique::Ggx => {
                let s = sample_ggx(&frame, alpha, u1, u2);
                (s.wi, s.valid)
            }
            Technique::Uniform => {
                let (wi, pdf) = sample_uniform(&frame.normal, u1, u2);
                (wi, pdf > 0.0)
            }
        };
        let pdf_d = pdf_cosine(&frame.normal, &wi);
        let pdf_s = pdf_ggx(&frame, alpha, &wi);
        let (weight, q) = match strategy {
            Strategy::Mis => (mis_weight(technique, budget, pdf_d, pdf_s), budget.pi_d() * pdf_d + budget.pi_s() * pdf_s),
            Strategy::CosineOnly => (1.0, pdf_d),
            Strategy::GgxOnly => (1.0, pdf_s),
            Strategy::Uniform => (1.0, pdf_uniform(&frame.normal, &wi)),
        };
        let cos = frame.normal.dot(&wi);
        let valid = drawn_ok && cos > 0.0 && q >= PDF_EPS;
        let (incident, value) = if valid {
            (source.incident(&sp.position, &frame.normal, &wi), brdf.eval(&frame, &wi, &mat))
        } else {
            (Incident { visibility: 0.0, direct: Rgb::zeros(), indirect: Rgb::zeros() }, BrdfValue::zero())
        };
        records.push(SampleRecord {
            technique,
            direction: wi,
            pdf_d,
            pdf_s,
            weight,
            normalizer: total as f64 * q,
            cos: cos.max(0.0),
            incident,
            brdf: value,
            valid,
        });
    }
    let mut diffuse = Rgb::zeros();
    let mut specular = Rgb::zeros();
    for r in &records {
        let c = r.contribution();
        diffuse += c.diffuse;
        specular += c.specular;
    }
    let all_invalid = records.iter().all(|r| !r.valid);
    MCEstimate { diffuse, specular, records, all_invalid }
}

/// Re-evaluates a recorded estimate for new material and direct light with
/// the directions, densities, visibility and indirect light held fixed.
pub fn replay(records: &[SampleRecord], sp: &ShadingPoint, mat: &Material, brdf: &Brdf, light: &EnvironmentLight) -> Rgb {
    let frame = ShadingFrame::new(sp.normal, sp.view_dir);
    records.iter().filter(|r| r.valid).fold(Rgb::zeros(), |acc, r| {
        let f = brdf.eval(&frame, &r.direction, mat).total();
        let li = light.radiance(&r.direction) * r.incident.visibility + r.incident.indirect;
        acc + f.component_mul(&li) * (r.cos / r.normalizer)
    })
}

/// Gradient of `up . L_pbr` with respect to the material and (through the
/// visible direct term) the base environment texels, sample set fixed.
pub fn estimate_backward(
    est: &MCEstimate,
    sp: &ShadingPoint,
    brdf: &Brdf,
    light: &EnvironmentLight,
    up: &Rgb,
    light_grad: Option<&mut LightGrad>,
) -> MaterialGrad {
    let mat = sp.material();
    let frame = ShadingFrame::new(sp.normal, sp.view_dir);
    let mut grad = MaterialGrad::zero();
    let mut light_grad = light_grad;
    for r in est.records.iter().filter(|r| r.valid) {
        let scale = r.cos / r.normalizer;
        let li = r.incident.total();
        let up_f = up.component_mul(&li) * scale;
        grad.add_assign(&brdf.vjp(&frame, &r.direction, &mat, &up_f, &up_f));
        if let Some(g) = light_grad.as_deref_mut() {
            let up_l = up.component_mul(&r.brdf.total()) * (scale * r.incident.visibility);
            light.radiance_backward(&r.direction, &up_l, g);
        }
    }
    grad
}

/// Writes sample records as CSV (see `docs/formats.md`).
pub fn write_records_csv<W: Write>(records: &[SampleRecord], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "sample,technique,dir_x,dir_y,dir_z,pdf_d,pdf_s,mis_weight,valid,visibility,l_dir_r,l_dir_g,l_dir_b,l_ind_r,l_ind_g,l_ind_b,contrib_r,contrib_g,contrib_b"
    )?;
    for (i, r) in records.iter().enumerate() {
        let c = r.contribution().total();
        writeln!(
            w,
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.technique.name(),
            r.direction.x,
            r.direction.y,
            r.direction.z,
            r.pdf_d,
            r.pdf_s,
            r.weight,
            r.valid as u8,
            r.incident.visibility,
            r.incident.direct.x,
            r.incident.direct.y,
            r.incident.direct.z,
            r.incident.indirect.x,
            r.incident.indirect.y,
            r.incident.indirect.z,
            c.x,
            c.y,
            c.z
        )?;
    }
    Ok(())
}
