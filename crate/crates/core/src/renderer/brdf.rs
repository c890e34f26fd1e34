//! Microfacet BRDF with the `(k_d, r, m)` material subset.
//!
//! Specular: GGX distribution with `alpha = r^2`, separable Smith masking and
//! Fresnel-Schlick with `F0 = specular_color(k_d, m)`. Diffuse: Lambertian
//! `(1 - m) k_d / pi`, scaled by `1 - E_spec(mu_o)` where `E_spec` is the
//! directional albedo of the specular lobe, so that the sum never reflects
//! more than it receives.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::gradtape::dual::Scalar;
use crate::math::{tangent_frame, Vec3};

/// Roughness floor applied before squaring.
pub const MIN_ROUGHNESS: f64 = 0.02;

const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// `k_s = (1 - m) * 0.04 + m * k_d`.
pub fn specular_color(k_d: [f64; 3], m: f64) -> [f64; 3] {
    k_d.map(|c| (1.0 - m) * 0.04 + m * c)
}

fn f0<S: Scalar>(k_d: &[S; 3], m: S) -> [S; 3] {
    let dielectric = (-m + 1.0) * 0.04;
    [dielectric + m * k_d[0], dielectric + m * k_d[1], dielectric + m * k_d[2]]
}

pub fn ggx_alpha<S: Scalar>(r: S) -> S {
    let r = r.max_c(MIN_ROUGHNESS);
    r * r
}

pub fn ggx_d<S: Scalar>(n_h: S, alpha: S) -> S {
    let a2 = alpha * alpha;
    let t = n_h * n_h * (a2 - 1.0) + 1.0;
    a2 / (t * t * PI)
}

pub fn smith_g1<S: Scalar>(n_x: S, alpha: S) -> S {
    let a2 = alpha * alpha;
    let root = (a2 + (-a2 + 1.0) * n_x * n_x).sqrt();
    n_x * 2.0 / (n_x + root)
}

pub fn fresnel_schlick<S: Scalar>(f0: S, v_h: f64) -> S {
    let c = (1.0 - v_h).clamp(0.0, 1.0).powi(5);
    f0 * (1.0 - c) + c
}

/// Split-sum table of the specular directional albedo:
/// `E_spec(mu, r) = F0 * A(mu, r) + B(mu, r)`.
#[derive(Debug)]
pub struct SpecularAlbedo {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn radical_inverse(mut i: u32) -> f64 {
    i = i.reverse_bits();
    i as f64 / 4_294_967_296.0
}

/// GGX half-vector around `+Z` from two uniforms.
fn sample_ggx_half(alpha: f64, u1: f64, u2: f64) -> Vec3 {
    let tan2 = alpha * alpha * u1 / (1.0 - u1).max(1e-300);
    let cos_t = 1.0 / (1.0 + tan2).sqrt();
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

impl SpecularAlbedo {
    pub fn build(n: usize, samples: u32) -> Self {
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            let mu = (i as f64 / (n - 1) as f64).max(1e-3);
            let v = Vec3::new((1.0 - mu * mu).sqrt(), 0.0, mu);
            for j in 0..n {
                let alpha = ggx_alpha(j as f64 / (n - 1) as f64);
                let (mut sa, mut sb) = (0.0, 0.0);
                for s in 0..samples {
                    let h = sample_ggx_half(alpha, (s as f64 + 0.5) / samples as f64, radical_inverse(s));
                    let v_h = v.dot(&h);
                    let l = 2.0 * v_h * h - v;
                    if l.z <= 0.0 || v_h <= 0.0 {
                        continue;
                    }
                    let g = smith_g1(mu, alpha) * smith_g1(l.z, alpha);
                    let w = g * v_h / (h.z * mu);
                    let fc = (1.0 - v_h).powi(5);
                    sa += (1.0 - fc) * w;
                    sb += fc * w;
                }
                a[i * n + j] = sa / samples as f64;
                b[i * n + j] = sb / samples as f64;
            }
        }
        SpecularAlbedo { n, a, b }
    }

    /// Shared table used by the renderer.
    pub fn global() -> &'static SpecularAlbedo {
        static LUT: OnceLock<SpecularAlbedo> = OnceLock::new();
        LUT.get_or_init(|| SpecularAlbedo::build(33, 1024))
    }

    /// Bilinear `(A, B)` at `(mu, r)`.
    pub fn eval<S: Scalar>(&self, mu: S, r: S) -> (S, S) {
        let scale = (self.n - 1) as f64;
        let cell = |x: S| {
            let f = x.max_c(0.0).min_c(1.0) * scale;
            let i = (f.val().floor() as usize).min(self.n - 2);
            (i, f - i as f64)
        };
        let (i, fm) = cell(mu);
        let (j, fr) = cell(r);
        let at = |t: &[f64]| {
            let t00 = t[i * self.n + j];
            let t01 = t[i * self.n + j + 1];
            let t10 = t[(i + 1) * self.n + j];
            let t11 = t[(i + 1) * self.n + j + 1];
            let lo = fr * (t01 - t00) + t00;
            let hi = fr * (t11 - t10) + t10;
            fm * (hi - lo) + lo
        };
        (at(&self.a), at(&self.b))
    }
}

/// BRDF times `cos(theta_i)` for fixed world directions, differentiable in
/// the normal and material. Zero outside the shared hemisphere.
pub fn brdf_cos<S: Scalar>(n: &[S; 3], wo: &Vec3, wi: &Vec3, k_d: &[S; 3], r: S, m: S) -> [S; 3] {
    let dot = |v: &Vec3| n[0] * v.x + n[1] * v.y + n[2] * v.z;
    let cos_i = dot(wi);
    let cos_o = dot(wo);
    let zero = S::cst(0.0);
    if cos_i.val() <= 0.0 || cos_o.val() <= 0.0 {
        return [zero; 3];
    }
    let h = (wi + wo).normalize();
    let v_h = wo.dot(&h).max(0.0);
    let n_h = dot(&h);
    let alpha = ggx_alpha(r);
    let spec_common = ggx_d(n_h, alpha) * smith_g1(cos_o, alpha) * smith_g1(cos_i, alpha) / (cos_o * 4.0);
    let f0 = f0(k_d, m);
    let (ta, tb) = SpecularAlbedo::global().eval(cos_o, r);
    let diffuse_w = (-m + 1.0) * cos_i / PI;
    std::array::from_fn(|c| {
        let e_spec = f0[c] * ta + tb;
        let diffuse = k_d[c] * diffuse_w * (-e_spec + 1.0);
        diffuse + spec_common * fresnel_schlick(f0[c], v_h)
    })
}

/// Importance-sampling proposal: a mixture of cosine-weighted diffuse and
/// GGX half-vector sampling, built from detached material values.
#[derive(Clone, Debug)]
pub struct Proposal {
    n: Vec3,
    t: Vec3,
    b: Vec3,
    wo: Vec3,
    alpha: f64,
    p_spec: f64,
}

impl Proposal {
    pub fn new(n: Vec3, wo: Vec3, k_d: [f64; 3], r: f64, m: f64) -> Self {
        let (t, b) = tangent_frame(&n);
        let ks = specular_color(k_d, m);
        let lum = |c: [f64; 3]| c[0] * LUMA[0] + c[1] * LUMA[1] + c[2] * LUMA[2];
        let (ls, ld) = (lum(ks), (1.0 - m) * lum(k_d));
        let p_spec = if ls + ld > 0.0 { (ls / (ls + ld)).clamp(0.1, 0.9) } else { 0.5 };
        Proposal {
            n,
            t,
            b,
            wo,
            alpha: ggx_alpha(r),
            p_spec,
        }
    }

    fn to_world(&self, v: Vec3) -> Vec3 {
        self.t * v.x + self.b * v.y + self.n * v.z
    }

    /// Draws a direction; `None` when it falls below the surface.
    pub fn sample(&self, u_lobe: f64, u1: f64, u2: f64) -> Option<Vec3> {
        let wi = if u_lobe < self.p_spec {
            let h = self.to_world(sample_ggx_half(self.alpha, u1, u2));
            let o_h = self.wo.dot(&h);
            if o_h <= 0.0 {
                return None;
            }
            2.0 * o_h * h - self.wo
        } else {
            let r = u1.sqrt();
            let phi = 2.0 * PI * u2;
            self.to_world(Vec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt()))
        };
        (wi.dot(&self.n) > 0.0).then(|| wi.normalize())
    }

    pub fn pdf(&self, wi: &Vec3) -> f64 {
        let cos_i = wi.dot(&self.n);
        if cos_i <= 0.0 {
            return 0.0;
        }
        let h = (wi + self.wo).normalize();
        let o_h = self.wo.dot(&h);
        let spec = if o_h > 0.0 {
            ggx_d(h.dot(&self.n).max(0.0), self.alpha) * h.dot(&self.n).max(0.0) / (4.0 * o_h)
        } else {
            0.0
        };
        self.p_spec * spec + (1.0 - self.p_spec) * cos_i / PI
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradtape::dual::Dual;
    use rand::{Rng, SeedableRng};

    #[test]
    fn specular_color_endpoints() {
        assert_eq!(specular_color([0.3, 0.6, 0.9], 0.0), [0.04; 3]);
        assert_eq!(specular_color([0.8, 0.2, 0.1], 1.0), [0.8, 0.2, 0.1]);
        let mid = specular_color([1.0; 3], 0.5);
        assert!(mid.iter().all(|&c| (c - 0.52).abs() < 1e-15));
    }

    #[test]
    fn ggx_distribution_is_normalised() {
        // Integral of D(h) cos(theta_h) over the hemisphere is one.
        for &alpha in &[0.09, 0.36, 1.0] {
            let n = 4000;
            let mut sum = 0.0;
            for i in 0..n {
                let mu = (i as f64 + 0.5) / n as f64;
                sum += ggx_d(mu, alpha) * mu * 2.0 * PI / n as f64;
            }
            assert!((sum - 1.0).abs() < 1e-3, "alpha {alpha}: {sum}");
        }
    }

    #[test]
    fn proposal_pdf_integrates_to_acceptance_rate() {
        // Reflected half-vector samples below the surface are rejected, so the
        // density over the upper hemisphere integrates to the acceptance rate.
        let n = Vec3::new(0.2, 0.9, 0.1).normalize();
        let wo = Vec3::new(-0.3, 0.8, 0.5).normalize();
        let prop = Proposal::new(n, wo, [0.5, 0.4, 0.3], 0.5, 0.3);
        let (nt, np) = (400, 800);
        let mut sum = 0.0;
        for i in 0..nt {
            let theta = (i as f64 + 0.5) / nt as f64 * PI;
            for j in 0..np {
                let phi = (j as f64 + 0.5) / np as f64 * 2.0 * PI;
                let d = Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
                sum += prop.pdf(&d) * theta.sin() * (PI / nt as f64) * (2.0 * PI / np as f64);
            }
        }
        let draws = 200_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let accepted = (0..draws)
            .filter(|_| prop.sample(rng.gen(), rng.gen(), rng.gen()).is_some())
            .count() as f64
            / draws as f64;
        assert!(sum <= 1.0 + 5e-3, "{sum}");
        assert!((sum - accepted).abs() < 5e-3, "{sum} vs {accepted}");
    }

    #[test]
    fn lut_matches_direct_quadrature() {
        // Brute-force E_spec with F0 = 1 (so E = A + B) over a uniform grid.
        let lut = SpecularAlbedo::global();
        for &(mu, r) in &[(0.5, 0.5), (0.9, 1.0), (0.3, 0.75)] {
            let alpha: f64 = ggx_alpha(r);
            let wo = Vec3::new((1.0f64 - mu * mu).sqrt(), 0.0, mu);
            let (nt, np) = (600, 600);
            let mut e = 0.0;
            for i in 0..nt {
                let theta = (i as f64 + 0.5) / nt as f64 * 0.5 * PI;
                for j in 0..np {
                    let phi = (j as f64 + 0.5) / np as f64 * 2.0 * PI;
                    let wi = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                    let h = (wi + wo).normalize();
                    let f = ggx_d(h.z, alpha) * smith_g1(mu, alpha) * smith_g1(wi.z, alpha) / (4.0 * mu * wi.z);
                    e += f * wi.z * theta.sin() * (0.5 * PI / nt as f64) * (2.0 * PI / np as f64);
                }
            }
            let (a, b) = lut.eval(mu, r);
            assert!((a + b - e).abs() < 0.01, "mu {mu} r {r}: lut {} vs {e}", a + b);
        }
    }

    #[test]
    fn brdf_dual_matches_f64() {
        let n = Vec3::new(0.1, 0.2, 0.95).normalize();
        let wo = Vec3::new(0.3, -0.1, 0.9).normalize();
        let wi = Vec3::new(-0.2, 0.4, 0.8).normalize();
        let k_d = [0.6, 0.3, 0.2];
        let plain = brdf_cos(&[n.x, n.y, n.z], &wo, &wi, &k_d, 0.45, 0.3);
        let v = |x: f64, i: usize| Dual::<5>::variable(x, i);
        let dual = brdf_cos(
            &[Dual::constant(n.x), Dual::constant(n.y), Dual::constant(n.z)],
            &wo,
            &wi,
            &[v(k_d[0], 0), v(k_d[1], 1), v(k_d[2], 2)],
            v(0.45, 3),
            v(0.3, 4),
        );
        for c in 0..3 {
            assert!((dual[c].v - plain[c]).abs() < 1e-14);
        }
        let h = 1e-6;
        let fd = (brdf_cos(&[n.x, n.y, n.z], &wo, &wi, &k_d, 0.45 + h, 0.3)[1]
            - brdf_cos(&[n.x, n.y, n.z], &wo, &wi, &k_d, 0.45 - h, 0.3)[1])
            / (2.0 * h);
        assert!((dual[1].d[3] - fd).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
