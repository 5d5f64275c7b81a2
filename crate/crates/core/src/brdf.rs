//! Metallic-workflow microfacet BRDF: Lambertian diffuse with metallic and
//! Fresnel deduction, plus a Cook-Torrance specular lobe (GGX distribution,
//! separable Smith masking-shadowing, Schlick Fresnel), with analytic
//! derivatives in the material parameters.

use crate::math::{channel_mean, local_to_world, Rgb, INV_PI, PI, V3};

/// Lower bound on the microfacet roughness `alpha = roughness^2`.
pub const ALPHA_FLOOR: f64 = 1e-3;
/// Lower bound on cosines entering denominators.
pub const COS_FLOOR: f64 = 1e-4;
/// Normal-incidence reflectance of dielectrics.
pub const DIELECTRIC_F0: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: Rgb,
    pub metallic: f64,
    /// Perceptual roughness in `[0, 1]`.
    pub roughness: f64,
}

impl Material {
    pub fn new(albedo: Rgb, metallic: f64, roughness: f64) -> Self {
        Material { albedo, metallic, roughness }
    }

    /// Specular reflectance at normal incidence.
    pub fn f0(&self) -> Rgb {
        self.albedo * self.metallic + Rgb::repeat(DIELECTRIC_F0 * (1.0 - self.metallic))
    }

    pub fn alpha(&self) -> f64 {
        alpha_from_roughness(self.roughness)
    }
}

#[inline]
pub fn alpha_from_roughness(roughness: f64) -> f64 {
    (roughness * roughness).max(ALPHA_FLOOR)
}

/// `d alpha / d roughness`, zero on the floor.
#[inline]
pub fn alpha_derivative(roughness: f64) -> f64 {
    if roughness * roughness > ALPHA_FLOOR {
        2.0 * roughness
    } else {
        0.0
    }
}

/// GGX normal distribution.
#[inline]
pub fn ggx_d(cos_nh: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let q = cos_nh * cos_nh * (a2 - 1.0) + 1.0;
    a2 / (PI * q * q)
}

/// `d D / d alpha`.
#[inline]
pub fn ggx_d_dalpha(cos_nh: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let c2 = cos_nh * cos_nh;
    let q = c2 * (a2 - 1.0) + 1.0;
    2.0 * alpha * (q - 2.0 * a2 * c2) / (PI * q * q * q)
}

#[inline]
pub fn smith_g1(cos: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let s = (a2 + (1.0 - a2) * cos * cos).sqrt();
    2.0 * cos / (cos + s)
}

#[inline]
fn smith_g1_dalpha(cos: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let s = (a2 + (1.0 - a2) * cos * cos).sqrt();
    let ds = alpha * (1.0 - cos * cos) / s;
    -2.0 * cos * ds / ((cos + s) * (cos + s))
}

/// Separable Smith-GGX masking-shadowing.
#[inline]
pub fn smith_g(cos_ni: f64, cos_no: f64, alpha: f64) -> f64 {
    smith_g1(cos_ni, alpha) * smith_g1(cos_no, alpha)
}

#[inline]
fn smith_g_dalpha(cos_ni: f64, cos_no: f64, alpha: f64) -> f64 {
    smith_g1_dalpha(cos_ni, alpha) * smith_g1(cos_no, alpha) + smith_g1(cos_ni, alpha) * smith_g1_dalpha(cos_no, alpha)
}

#[inline]
fn schlick_weight(cos: f64) -> f64 {
    (1.0 - cos.clamp(0.0, 1.0)).powi(5)
}

#[inline]
pub fn fresnel_schlick(cos: f64, f0: &Rgb) -> Rgb {
    let k = schlick_weight(cos);
    f0.map(|f| f + (1.0 - f) * k)
}

/// Samples a GGX half vector around `n` from `D(h) (n.h)`; returns the half
/// vector and its density.
pub fn sample_ggx_half(n: &V3, alpha: f64, u1: f64, u2: f64) -> (V3, f64) {
    let a2 = alpha * alpha;
    let cos_t = ((1.0 - u1) / (1.0 + (a2 - 1.0) * u1)).max(0.0).sqrt().min(1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    let h = local_to_world(n, &V3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t));
    (h, ggx_d(cos_t, alpha) * cos_t)
}

/// Normal plus outgoing direction at a shading point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingFrame {
    pub normal: V3,
    pub wo: V3,
}

impl ShadingFrame {
    pub fn new(normal: V3, wo: V3) -> Self {
        ShadingFrame { normal: normal.normalize(), wo: wo.normalize() }
    }

    pub fn cos_o(&self) -> f64 {
        self.normal.dot(&self.wo).max(COS_FLOOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfValue {
    pub diffuse: Rgb,
    pub specular: Rgb,
}

impl BrdfValue {
    pub fn zero() -> Self {
        BrdfValue { diffuse: Rgb::zeros(), specular: Rgb::zeros() }
    }

    pub fn total(&self) -> Rgb {
        self.diffuse + self.specular
    }
}

/// Gradient of a scalar with respect to the material parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaterialGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
}

impl MaterialGrad {
    pub fn zero() -> Self {
        MaterialGrad { albedo: Rgb::zeros(), metallic: 0.0, roughness: 0.0 }
    }

    pub fn add_assign(&mut self, o: &MaterialGrad) {
        self.albedo += o.albedo;
        self.metallic += o.metallic;
        self.roughness += o.roughness;
    }

    pub fn scaled(&self, s: f64) -> MaterialGrad {
        MaterialGrad { albedo: self.albedo * s, metallic: self.metallic * s, roughness: self.roughness * s }
    }
}

/// The BRDF model. `diffuse_fresnel` toggles the deduction of
/// specular-reflected energy from the diffuse lobe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Brdf {
    pub diffuse_fresnel: bool,
}

impl Default for Brdf {
    fn default() -> Self {
        Brdf { diffuse_fresnel: true }
    }
}

/// Quantities shared by evaluation and differentiation.
struct Geometry {
    cos_i: f64,
    cos_o: f64,
    cos_h: f64,
    cos_oh: f64,
}

impl Brdf {
    pub fn without_diffuse_fresnel() -> Self {
        Brdf { diffuse_fresnel: false }
    }

    /// Diffuse Fresnel deduction: channel mean of Schlick at `n.wo`.
    pub fn diffuse_fresnel_term(&self, cos_o: f64, f0: &Rgb) -> f64 {
        if self.diffuse_fresnel {
            channel_mean(&fresnel_schlick(cos_o, f0))
        } else {
            0.0
        }
    }

    /// `(1 - metallic)(1 - F_d) / pi`, the factor multiplying albedo in `f_d`.
    pub fn diffuse_factor(&self, mat: &Material, cos_o: f64) -> f64 {
        (1.0 - mat.metallic) * (1.0 - self.diffuse_fresnel_term(cos_o, &mat.f0())) * INV_PI
    }

    fn geometry(frame: &ShadingFrame, wi: &V3) -> Option<Geometry> {
        let n = &frame.normal;
        let cos_i = n.dot(wi);
        if cos_i <= 0.0 {
            return None;
        }
        let sum = wi + frame.wo;
        let len = sum.norm();
        let h = if len > 1e-12 { sum / len } else { *n };
        Some(Geometry {
            cos_i: cos_i.max(COS_FLOOR),
            cos_o: frame.cos_o(),
            cos_h: n.dot(&h).max(0.0),
            // Symmetric in (wi, wo) so the specular lobe is exactly reciprocal.
            cos_oh: (0.5 * (frame.wo.dot(&h) + wi.dot(&h))).max(0.0),
        })
    }

    /// Diffuse and specular BRDF values; zero below the horizon.
    pub fn eval(&self, frame: &ShadingFrame, wi: &V3, mat: &Material) -> BrdfValue {
        let Some(g) = Self::geometry(frame, wi) else {
            return BrdfValue::zero();
        };
        let alpha = mat.alpha();
        let f0 = mat.f0();
        let dg = ggx_d(g.cos_h, alpha) * smith_g(g.cos_i, g.cos_o, alpha) / (4.0 * (g.cos_i * g.cos_o));
        BrdfValue {
            diffuse: mat.albedo * self.diffuse_factor(mat, g.cos_o),
            specular: fresnel_schlick(g.cos_oh, &f0) * dg,
        }
    }

    /// Vector-Jacobian product: gradient of `up_d . f_d + up_s . f_s` with
    /// respect to the material.
    pub fn vjp(&self, frame: &ShadingFrame, wi: &V3, mat: &Material, up_d: &Rgb, up_s: &Rgb) -> MaterialGrad {
        let Some(g) = Self::geometry(frame, wi) else {
            return MaterialGrad::zero();
        };
        let m = mat.metallic;
        let a = &mat.albedo;
        let f0 = mat.f0();
        let alpha = mat.alpha();
        let mut out = MaterialGrad::zero();

        // Diffuse: f_d,c = a_c (1 - m)(1 - F_d) / pi.
        let (fd_term, dfd_da, dfd_dm) = if self.diffuse_fresnel {
            let k = schlick_weight(g.cos_o);
            let fd = channel_mean(&fresnel_schlick(g.cos_o, &f0));
            // d F_d / d f0_c = (1 - k) / 3.
            let da = (1.0 - k) * m / 3.0;
            let dm = (1.0 - k) * (channel_mean(a) - DIELECTRIC_F0);
            (fd, da, dm)
        } else {
            (0.0, 0.0, 0.0)
        };
        let diff_scale = (1.0 - m) * (1.0 - fd_term) * INV_PI;
        let up_dot_a = up_d.dot(a);
        for c in 0..3 {
            out.albedo[c] += up_d[c] * diff_scale - up_dot_a * (1.0 - m) * INV_PI * dfd_da;
        }
        out.metallic += -up_dot_a * (1.0 - fd_term) * INV_PI - up_dot_a * (1.0 - m) * INV_PI * dfd_dm;

        // Specular: f_s,c = F_c D G / (4 ci co).
        let d = ggx_d(g.cos_h, alpha);
        let gg = smith_g(g.cos_i, g.cos_o, alpha);
        let inv = 1.0 / (4.0 * (g.cos_i * g.cos_o));
        let kh = schlick_weight(g.cos_oh);
        let fres = fresnel_schlick(g.cos_oh, &f0);
        let dgi = d * gg * inv;
        for c in 0..3 {
            let df_df0 = (1.0 - kh) * dgi * up_s[c];
            out.albedo[c] += df_df0 * m;
            out.metallic += df_df0 * (a[c] - DIELECTRIC_F0);
        }
        let d_dg_dalpha = (ggx_d_dalpha(g.cos_h, alpha) * gg + d * smith_g_dalpha(g.cos_i, g.cos_o, alpha)) * inv;
        out.roughness += up_s.dot(&fres) * d_dg_dalpha * alpha_derivative(mat.roughness);
        out
    }

    /// Full Jacobian of `(f_d, f_s)` as per-output-channel material
    /// gradients: `[diffuse r, g, b, specular r, g, b]`.
    pub fn jacobian(&self, frame: &ShadingFrame, wi: &V3, mat: &Material) -> [MaterialGrad; 6] {
        let mut out = [MaterialGrad::zero(); 6];
        for c in 0..3 {
            let mut e = Rgb::zeros();
            e[c] = 1.0;
            out[c] = self.vjp(frame, wi, mat, &e, &Rgb::zeros());
            out[c + 3] = self.vjp(frame, wi, mat, &Rgb::zeros(), &e);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gray, rgb};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Midpoint quadrature of `int D(h) (n.h) dw_h` over the hemisphere.
    fn ndf_normalization(alpha: f64) -> f64 {
        // Substitute mu = cos(theta); the integrand is 2 pi D(mu) mu dmu.
        // A non-uniform grid in mu resolves the narrow peak at mu = 1.
        let n = 200_000;
        let mut sum = 0.0;
        for i in 0..n {
            let s0 = i as f64 / n as f64;
            let s1 = (i + 1) as f64 / n as f64;
            // mu = 1 - s^4 clusters nodes near mu = 1.
            let mu0 = 1.0 - s0.powi(4);
            let mu1 = 1.0 - s1.powi(4);
            let mu = 0.5 * (mu0 + mu1);
            sum += 2.0 * PI * ggx_d(mu, alpha) * mu * (mu0 - mu1);
        }
        sum
    }

    #[test]
    fn ggx_closed_forms() {
        assert_relative_eq!(ggx_d(1.0, 1.0), 1.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(ggx_d(0.0, 1.0), 1.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(1.0 / PI, 0.318_310, epsilon = 1e-6);
        for alpha in [0.1, 0.5, 1.0] {
            assert!((ndf_normalization(alpha) - 1.0).abs() < 0.01, "alpha {alpha}");
        }
    }

    #[test]
    fn smith_closed_forms() {
        assert_relative_eq!(smith_g(0.3, 0.8, 1e-9), 1.0, epsilon = 1e-6);
        assert_relative_eq!(smith_g(1.0, 1.0, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(smith_g(0.5, 1.0, 1.0), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn fresnel_endpoints() {
        let f0 = rgb(0.04, 0.5, 0.9);
        assert_eq!(fresnel_schlick(1.0, &f0), f0);
        assert_eq!(fresnel_schlick(0.0, &f0), gray(1.0));
        assert_relative_eq!(fresnel_schlick(0.5, &gray(0.04)).x, 0.07, epsilon = 1e-12);
    }

    #[test]
    fn metallic_kills_diffuse() {
        let frame = ShadingFrame::new(V3::z(), V3::new(0.3, 0.1, 1.0));
        let mat = Material::new(rgb(0.9, 0.5, 0.1), 1.0, 0.4);
        for wi in [V3::new(0.1, 0.2, 1.0).normalize(), V3::new(-0.7, 0.1, 0.3).normalize()] {
            assert_eq!(Brdf::default().eval(&frame, &wi, &mat).diffuse, Rgb::zeros());
        }
    }

    #[test]
    fn lambert_reduction_without_fresnel() {
        let frame = ShadingFrame::new(V3::z(), V3::new(0.4, -0.2, 1.0));
        let mat = Material::new(gray(1.0), 0.0, 0.6);
        let v = Brdf::without_diffuse_fresnel().eval(&frame, &V3::new(0.2, 0.5, 0.8).normalize(), &mat);
        assert_relative_eq!(v.diffuse.x, 1.0 / PI, epsilon = 1e-15);
    }

    #[test]
    fn mirror_configuration_value() {
        let frame = ShadingFrame::new(V3::z(), V3::z());
        let mat = Material::new(gray(0.5), 0.0, 1.0);
        let v = Brdf::default().eval(&frame, &V3::z(), &mat);
        assert_relative_eq!(v.specular.x, 0.04 / (4.0 * PI), epsilon = 1e-12);
        assert_relative_eq!(v.specular.x, 0.003183, epsilon = 1e-6);
    }

    #[test]
    fn below_horizon_is_zero() {
        let frame = ShadingFrame::new(V3::z(), V3::z());
        let mat = Material::new(gray(0.5), 0.2, 0.5);
        let v = Brdf::default().eval(&frame, &V3::new(0.0, 0.3, -1.0).normalize(), &mat);
        assert_eq!(v, BrdfValue::zero());
    }

    #[test]
    fn derivative_examples() {
        let frame = ShadingFrame::new(V3::z(), V3::new(0.2, 0.1, 1.0));
        let wi = V3::new(-0.3, 0.2, 1.0).normalize();
        let a = rgb(0.7, 0.3, 0.5);
        let brdf = Brdf::without_diffuse_fresnel();
        let j = brdf.jacobian(&frame, &wi, &Material::new(a, 0.0, 0.5));
        for c in 0..3 {
            assert_relative_eq!(j[c].metallic, -a[c] / PI, epsilon = 1e-12);
        }
        let m = 0.35;
        let j = brdf.jacobian(&frame, &wi, &Material::new(a, m, 0.5));
        for c in 0..3 {
            assert_relative_eq!(j[c].albedo[c], (1.0 - m) / PI, epsilon = 1e-12);
        }
    }

    /// Central finite-difference Jacobian of `(f_d, f_s)`.
    pub(crate) fn fd_jacobian(brdf: &Brdf, frame: &ShadingFrame, wi: &V3, mat: &Material, h: f64) -> [MaterialGrad; 6] {
        let mut out = [MaterialGrad::zero(); 6];
        let stack = |v: BrdfValue| [v.diffuse.x, v.diffuse.y, v.diffuse.z, v.specular.x, v.specular.y, v.specular.z];
        let mut perturb = |f: &dyn Fn(&mut Material, f64), set: &dyn Fn(&mut MaterialGrad, f64)| {
            let mut p = *mat;
            f(&mut p, h);
            let mut m = *mat;
            f(&mut m, -h);
            let vp = stack(brdf.eval(frame, wi, &p));
            let vm = stack(brdf.eval(frame, wi, &m));
            for k in 0..6 {
                set(&mut out[k], (vp[k] - vm[k]) / (2.0 * h));
            }
        };
        for c in 0..3 {
            perturb(&|m, e| m.albedo[c] += e, &|g, v| g.albedo[c] = v);
        }
        perturb(&|m, e| m.metallic += e, &|g, v| g.metallic = v);
        perturb(&|m, e| m.roughness += e, &|g, v| g.roughness = v);
        out
    }

    proptest! {
        #[test]
        fn analytic_jacobian_matches_finite_differences(
            a in prop::array::uniform3(0.05..0.95f64),
            m in 0.05..0.95f64,
            r in 0.1..0.95f64,
            wo in prop::array::uniform3(-1.0..1.0f64),
            wi in prop::array::uniform3(-1.0..1.0f64),
            fresnel in any::<bool>(),
        ) {
            let wo = V3::new(wo[0], wo[1], wo[2].abs() + 0.2).normalize();
            let wi = V3::new(wi[0], wi[1], wi[2].abs() + 0.2).normalize();
            let frame = ShadingFrame::new(V3::z(), wo);
            let mat = Material::new(Rgb::from(a), m, r);
            let brdf = Brdf { diffuse_fresnel: fresnel };
            let an = brdf.jacobian(&frame, &wi, &mat);
            let fd = fd_jacobian(&brdf, &frame, &wi, &mat, 1e-5);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3);
            for k in 0..6 {
                for c in 0..3 {
                    prop_assert!(close(an[k].albedo[c], fd[k].albedo[c]), "albedo {} {}", an[k].albedo[c], fd[k].albedo[c]);
                }
                prop_assert!(close(an[k].metallic, fd[k].metallic));
                prop_assert!(close(an[k].roughness, fd[k].roughness), "rough {} {}", an[k].roughness, fd[k].roughness);
            }
        }

        #[test]
        fn specular_is_reciprocal_and_nonnegative(
            a in prop::array::uniform3(0.0..1.0f64),
            m in 0.0..1.0f64,
            r in 0.0..1.0f64,
            wo in prop::array::uniform3(-1.0..1.0f64),
            wi in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let wo = V3::new(wo[0], wo[1], wo[2].abs() + 0.05).normalize();
            let wi = V3::new(wi[0], wi[1], wi[2].abs() + 0.05).normalize();
            let mat = Material::new(Rgb::from(a), m, r);
            let brdf = Brdf::default();
            let fo = ShadingFrame::new(V3::z(), wo);
            let fi = ShadingFrame::new(V3::z(), wi);
            let forward = brdf.eval(&fo, &fi.wo, &mat);
            let backward = brdf.eval(&fi, &fo.wo, &mat);
            prop_assert_eq!(forward.specular, backward.specular);
            prop_assert!(forward.specular.iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!(forward.diffuse.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
