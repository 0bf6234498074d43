//! Reversible quadratically convex Finsler metrics on the sphere.
//!
//! A metric is exposed purely through fiberwise evaluation; dual norms,
//! Legendre transforms and convexity margins are derived numerically.
//! Kernels may install fast paths (exact dual norms, Hamiltonian gradients,
//! closed-form geodesics) that accelerate the generic machinery without
//! changing its contracts; the generic routes stay available as oracles.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::sphere::{SphereCurve, SpherePoint, TangentVector, Vec3, FOUR_PI, TWO_PI};

/// Liouville volume of the unit cotangent bundle of any Zoll metric of
/// geodesic length `2 pi` (up to orientation sign, which is not assigned).
pub const WEINSTEIN_VOLUME: f64 = 8.0 * std::f64::consts::PI * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum FinslerError {
    #[error("covector form is not tangent: form.base = {0:.3e}")]
    FormNotTangent(f64),
    #[error("vector is not on the unit sphere of the metric: F = {0:.8}")]
    NotUnitNorm(f64),
    #[error("fiber maximization failed to converge, residual {0:.3e}")]
    OptimizationFailed(f64),
    #[error("not quadratically convex here: margin {0:.3e}")]
    NotQuadraticallyConvex(f64),
    #[error("non-finite Liouville density at sample {0}")]
    NonFiniteDensity(usize),
    #[error("convexity audit failed: min margin {0:.3e}")]
    AuditFailed(f64),
}

/// How a metric was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Round,
    Enveloping,
    CroftonReconstructed,
}

/// Fiberwise evaluation of a reversible Finsler norm, plus optional exact
/// fast paths.
pub trait MetricKernel: Send + Sync {
    /// Norm of the tangent vector `v` at `x`. Must be positively homogeneous,
    /// even in `v`, and positive away from zero.
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64;

    fn provenance(&self) -> Provenance;

    /// Smallest angular feature size of the metric (radians); derivative
    /// step sizes are derived from it.
    fn smoothness_scale(&self) -> f64;

    /// Exact dual norm, when the kernel knows one.
    fn dual_norm_hook(&self, _x: &SpherePoint, _xi: &Vec3) -> Option<f64> {
        None
    }

    /// Exact gradient of the extended Hamiltonian `H = F*(x, xi)^2 |x|^2 / 2`
    /// as `(dH/dx, dH/dxi)` in ambient coordinates.
    fn hamiltonian_grad_hook(&self, _x: &Vec3, _xi: &Vec3) -> Option<(Vec3, Vec3)> {
        None
    }

    /// Closed-form arclength-parametrized closed geodesic through `(x, v)`,
    /// when the kernel knows the geodesics exactly.
    fn closed_geodesic_hook(&self, _x: &SpherePoint, _v: &Vec3, _nodes: usize) -> Option<SphereCurve> {
        None
    }

    /// A distinguished axis of the metric (for perturbed metrics, the
    /// perturbation center); lattice constructions align with it.
    fn preferred_axis(&self) -> Option<SpherePoint> {
        None
    }
}

/// Shared-ownership handle to a metric kernel.
#[derive(Clone)]
pub struct FinslerMetric(Arc<dyn MetricKernel>);

impl FinslerMetric {
    pub fn new(kernel: impl MetricKernel + 'static) -> Self {
        Self(Arc::new(kernel))
    }

    pub fn from_arc(kernel: Arc<dyn MetricKernel>) -> Self {
        Self(kernel)
    }

    /// The canonical round metric.
    pub fn round() -> Self {
        Self::new(RoundMetric)
    }

    pub fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        self.0.eval(x, v)
    }

    pub fn provenance(&self) -> Provenance {
        self.0.provenance()
    }

    pub fn smoothness_scale(&self) -> f64 {
        self.0.smoothness_scale()
    }

    /// Dual norm through the kernel fast path when present, otherwise the
    /// generic fiber maximization.
    pub fn dual_norm_fast(&self, x: &SpherePoint, xi: &Vec3) -> f64 {
        if let Some(v) = self.0.dual_norm_hook(x, xi) {
            return v;
        }
        dual_norm_of_form(self, x, xi).expect("fiber maximization")
    }

    pub fn hamiltonian_grad_hook(&self, x: &Vec3, xi: &Vec3) -> Option<(Vec3, Vec3)> {
        self.0.hamiltonian_grad_hook(x, xi)
    }

    pub fn closed_geodesic_hook(&self, x: &SpherePoint, v: &Vec3, nodes: usize) -> Option<SphereCurve> {
        self.0.closed_geodesic_hook(x, v, nodes)
    }

    pub fn preferred_axis(&self) -> Option<SpherePoint> {
        self.0.preferred_axis()
    }

    /// Finite-difference step for fiber derivatives.
    pub fn derivative_step(&self) -> f64 {
        (self.smoothness_scale() / 100.0).max(1e-5)
    }
}

/// A cotangent vector, acting on tangent vectors by the ambient dot product.
#[derive(Debug, Clone, Copy)]
pub struct Covector {
    base: SpherePoint,
    form: Vec3,
}

impl Covector {
    pub fn new(base: SpherePoint, form: Vec3) -> Result<Self, FinslerError> {
        let t = form.dot(&base.coords()).abs();
        if t > 1e-10 {
            return Err(FinslerError::FormNotTangent(t));
        }
        Ok(Self { base, form })
    }

    /// Projects out any normal component instead of rejecting it.
    pub fn projected(base: SpherePoint, form: Vec3) -> Self {
        Self { base, form: base.project_tangent(form) }
    }

    pub fn base(&self) -> SpherePoint {
        self.base
    }

    pub fn form(&self) -> Vec3 {
        self.form
    }

    pub fn pair(&self, v: &Vec3) -> f64 {
        self.form.dot(v)
    }
}

// -- canonical kernels -------------------------------------------------------

/// The canonical round metric `F(x, v) = |v|`.
pub struct RoundMetric;

impl MetricKernel for RoundMetric {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        x.project_tangent(*v).norm()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Round
    }

    fn smoothness_scale(&self) -> f64 {
        1.0
    }

    fn dual_norm_hook(&self, x: &SpherePoint, xi: &Vec3) -> Option<f64> {
        Some(x.project_tangent(*xi).norm())
    }

    fn hamiltonian_grad_hook(&self, x: &Vec3, xi: &Vec3) -> Option<(Vec3, Vec3)> {
        // H = (|xi|^2 |x|^2 - (x . xi)^2) / 2
        let xdotxi = x.dot(xi);
        let dh_dx = x * xi.norm_squared() - xi * xdotxi;
        let dh_dxi = xi * x.norm_squared() - x * xdotxi;
        Some((dh_dx, dh_dxi))
    }

    fn closed_geodesic_hook(&self, x: &SpherePoint, v: &Vec3, nodes: usize) -> Option<SphereCurve> {
        let t = x.project_tangent(*v);
        let n = t.norm();
        if n < 1e-14 {
            return None;
        }
        let t = t / n;
        let x0 = x.coords();
        SphereCurve::from_closed_param(|s| x0 * s.cos() + t * s.sin(), nodes).ok()
    }
}

/// Pullback of a constant linear anisotropy: `F(x, v) = |A v|` restricted to
/// tangent planes. `A = I` is round; other choices give smooth non-Zoll
/// control metrics.
pub struct LinearPullbackMetric {
    pub matrix: nalgebra::Matrix3<f64>,
}

impl MetricKernel for LinearPullbackMetric {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        (self.matrix * x.project_tangent(*v)).norm()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Round
    }

    fn smoothness_scale(&self) -> f64 {
        1.0
    }
}

/// Diagonal norm in the deterministic tangent frame; a per-fiber test norm
/// (discontinuous across frame switches, fine for pointwise checks).
pub struct FrameDiagonalMetric {
    pub a1: f64,
    pub a2: f64,
}

impl MetricKernel for FrameDiagonalMetric {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        let (e1, e2) = x.tangent_frame();
        let c1 = v.dot(&e1) * self.a1;
        let c2 = v.dot(&e2) * self.a2;
        (c1 * c1 + c2 * c2).sqrt()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Round
    }

    fn smoothness_scale(&self) -> f64 {
        1.0
    }
}

// -- fiber optimization ------------------------------------------------------

/// Golden-section maximization on `[a, b]`, assumed unimodal there.
/// Returns `(argmax, max)`.
pub fn golden_max(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}

/// Maximizes a `2 pi`-periodic function by a coarse scan followed by local
/// golden-section refinement around the scan winner.
pub fn periodic_max(f: &mut dyn FnMut(f64) -> f64, scan: usize, tol: f64) -> (f64, f64) {
    let mut best_phi = 0.0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..scan {
        let phi = TWO_PI * i as f64 / scan as f64;
        let val = f(phi);
        if val > best {
            best = val;
            best_phi = phi;
        }
    }
    let half = TWO_PI / scan as f64;
    let (phi, val) = golden_max(f, best_phi - half, best_phi + half, tol);
    if val >= best {
        (phi, val)
    } else {
        (best_phi, best)
    }
}

fn fiber_direction(e1: &Vec3, e2: &Vec3, phi: f64) -> Vec3 {
    e1 * phi.cos() + e2 * phi.sin()
}

fn dual_norm_of_form(metric: &FinslerMetric, x: &SpherePoint, form: &Vec3) -> Result<f64, FinslerError> {
    let (e1, e2) = x.tangent_frame();
    let mut g = |phi: f64| {
        let d = fiber_direction(&e1, &e2, phi);
        form.dot(&d) / metric.eval(x, &d)
    };
    let (_, val) = periodic_max(&mut g, 256, 1e-10);
    if !val.is_finite() {
        return Err(FinslerError::OptimizationFailed(val));
    }
    Ok(val)
}

/// Dual norm `F*(xi) = max { xi(v) : F(v) = 1 }` by 1-D maximization over the
/// fiber circle with local refinement.
pub fn dual_norm(metric: &FinslerMetric, xi: &Covector) -> Result<f64, FinslerError> {
    dual_norm_of_form(metric, &xi.base(), &xi.form())
}

/// Unit vector achieving the dual norm: the inverse Legendre image of `xi`.
pub fn legendre_inverse(metric: &FinslerMetric, xi: &Covector) -> Result<TangentVector, FinslerError> {
    let x = xi.base();
    let (e1, e2) = x.tangent_frame();
    let form = xi.form();
    let mut g = |phi: f64| {
        let d = fiber_direction(&e1, &e2, phi);
        form.dot(&d) / metric.eval(&x, &d)
    };
    let (phi, val) = periodic_max(&mut g, 256, 1e-12);
    if !val.is_finite() {
        return Err(FinslerError::OptimizationFailed(val));
    }
    let d = fiber_direction(&e1, &e2, phi);
    let v = d / metric.eval(&x, &d);
    Ok(TangentVector::projected(x, v))
}

/// 5-point centered first derivative.
fn stencil_d1(f: &mut dyn FnMut(f64) -> f64, t: f64, h: f64) -> f64 {
    (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h)
}

/// 5-point centered second derivative.
fn stencil_d2(f: &mut dyn FnMut(f64) -> f64, t: f64, h: f64) -> f64 {
    (-f(t + 2.0 * h) + 16.0 * f(t + h) - 30.0 * f(t) + 16.0 * f(t - h) - f(t - 2.0 * h))
        / (12.0 * h * h)
}

/// Radial convexity margin of the fiber at direction angle `phi`: with
/// `u(phi) = F(d(phi))^2 / 2` on the unit circle, the fiberwise Hessian of
/// `F^2/2` is positive definite iff `u'' + F^2 - u'^2 / F^2 > 0`.
pub fn convexity_margin(metric: &FinslerMetric, x: &SpherePoint, phi: f64) -> f64 {
    let (e1, e2) = x.tangent_frame();
    let mut u = |p: f64| {
        let d = fiber_direction(&e1, &e2, p);
        let f = metric.eval(x, &d);
        0.5 * f * f
    };
    let h = (metric.smoothness_scale() / 100.0).max(5e-4);
    let f2 = 2.0 * u(phi);
    if !(f2 > 0.0) {
        return f64::NEG_INFINITY;
    }
    let d1 = stencil_d1(&mut u, phi, h);
    let d2 = stencil_d2(&mut u, phi, h);
    d2 + f2 - d1 * d1 / f2
}

/// The fiberwise Legendre image of an `F`-unit vector: the unique covector
/// with `xi(v) = 1` and `F*(xi) = 1`, computed as the fiber gradient of `F`.
pub fn legendre(metric: &FinslerMetric, v: &TangentVector) -> Result<Covector, FinslerError> {
    let x = v.base();
    let f0 = metric.eval(&x, &v.dir());
    if (f0 - 1.0).abs() > 1e-8 {
        return Err(FinslerError::NotUnitNorm(f0));
    }
    let (e1, e2) = x.tangent_frame();
    let phi0 = v.dir().dot(&e2).atan2(v.dir().dot(&e1));
    let margin = convexity_margin(metric, &x, phi0);
    if margin < 1e-6 {
        return Err(FinslerError::NotQuadraticallyConvex(margin));
    }
    let h = metric.derivative_step();
    let dir = v.dir();
    let d1 = stencil_d1(&mut |t| metric.eval(&x, &(dir + e1 * t)), 0.0, h);
    let d2 = stencil_d1(&mut |t| metric.eval(&x, &(dir + e2 * t)), 0.0, h);
    // gradient of F at a unit vector equals the gradient of F^2/2 there
    Covector::new(x, e1 * d1 + e2 * d2)
}

// -- convexity audit ---------------------------------------------------------

/// Sampling resolution for convexity audits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuditGrid {
    pub base_samples: usize,
    pub fiber_samples: usize,
}

impl Default for AuditGrid {
    fn default() -> Self {
        Self { base_samples: 256, fiber_samples: 128 }
    }
}

/// Report of a quadratic-convexity audit.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityAudit {
    pub min_margin: f64,
    pub worst_point: SpherePoint,
    pub worst_angle: f64,
    pub base_samples: usize,
    pub fiber_samples: usize,
    /// Angular resolution at which the margin was probed.
    pub resolution: f64,
    pub pass: bool,
}

/// Scans the fiberwise convexity margin over a base grid x fiber grid and
/// reports the minimum. Report-only: construction-time enforcement is the
/// caller's business.
pub fn audit_quadratic_convexity(metric: &FinslerMetric, grid: &AuditGrid) -> ConvexityAudit {
    let points = crate::sphere::fibonacci_sphere(grid.base_samples);
    audit_points(metric, &points, grid.fiber_samples)
}

/// Convexity audit over an explicit base-point sample.
pub fn audit_points(metric: &FinslerMetric, points: &[SpherePoint], fiber_samples: usize) -> ConvexityAudit {
    let m = fiber_samples;
    let h = TWO_PI / m as f64;
    let mut min_margin = f64::INFINITY;
    let mut worst_point = points[0];
    let mut worst_angle = 0.0;
    for x in points {
        let (e1, e2) = x.tangent_frame();
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let d = fiber_direction(&e1, &e2, h * i as f64);
                let f = metric.eval(x, &d);
                0.5 * f * f
            })
            .collect();
        for i in 0..m {
            let g = |k: isize| u[((i as isize + k).rem_euclid(m as isize)) as usize];
            let f2 = 2.0 * g(0);
            let margin = if f2 > 0.0 {
                let d1 = (-g(2) + 8.0 * g(1) - 8.0 * g(-1) + g(-2)) / (12.0 * h);
                let d2 =
                    (-g(2) + 16.0 * g(1) - 30.0 * g(0) + 16.0 * g(-1) - g(-2)) / (12.0 * h * h);
                d2 + f2 - d1 * d1 / f2
            } else {
                f64::NEG_INFINITY
            };
            if margin < min_margin {
                min_margin = margin;
                worst_point = *x;
                worst_angle = h * i as f64;
            }
        }
    }
    ConvexityAudit {
        min_margin,
        worst_point,
        worst_angle,
        base_samples: points.len(),
        fiber_samples: m,
        resolution: h,
        pass: min_margin > 0.0,
    }
}

// -- Liouville sampling ------------------------------------------------------

/// A unit covector weighted by the contact volume it represents.
#[derive(Debug, Clone, Serialize)]
pub struct LiouvilleSample {
    pub covector: Covector,
    pub weight: f64,
}

impl Serialize for Covector {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            base: [f64; 3],
            form: [f64; 3],
        }
        Repr { base: self.base.coords().into(), form: self.form.into() }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Covector {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            base: [f64; 3],
            form: [f64; 3],
        }
        let r = Repr::deserialize(de)?;
        let base = SpherePoint::project(Vec3::new(r.base[0], r.base[1], r.base[2]))
            .map_err(serde::de::Error::custom)?;
        Covector::new(base, Vec3::new(r.form[0], r.form[1], r.form[2]))
            .map_err(serde::de::Error::custom)
    }
}

pub fn random_sphere_point(rng: &mut impl Rng) -> SpherePoint {
    let z: f64 = rng.random_range(-1.0..1.0);
    let az: f64 = rng.random_range(0.0..TWO_PI);
    let r = (1.0 - z * z).sqrt();
    SpherePoint::project(Vec3::new(r * az.cos(), r * az.sin(), z)).expect("sample")
}

/// Liouville contact density over `(base point, fiber angle)`: in the chart
/// `(x, phi) -> r*(x, phi) (cos phi e1 + sin phi e2)` of the unit co-sphere
/// bundle, `alpha ^ d alpha = (xi_1 d_phi xi_2 - xi_2 d_phi xi_1) dA d phi`,
/// which for the polar parametrization is `r*(x, phi)^2 = 1 / F*(omega)^2`.
pub fn liouville_density(metric: &FinslerMetric, x: &SpherePoint, phi: f64) -> f64 {
    let (e1, e2) = x.tangent_frame();
    let omega = fiber_direction(&e1, &e2, phi);
    let fstar = metric.dual_norm_fast(x, &omega);
    1.0 / (fstar * fstar)
}

/// Draws `n` unit covectors with importance weights proportional to the
/// contact volume `alpha ^ d alpha`; the weights sum to the total-volume
/// estimate, which tends to `8 pi^2` for Zoll metrics of length `2 pi`.
pub fn sample_liouville(
    metric: &FinslerMetric,
    n: usize,
    seed: u64,
) -> Result<(Vec<LiouvilleSample>, f64), FinslerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut total = 0.0;
    let scale = FOUR_PI * TWO_PI / n as f64;
    for i in 0..n {
        let x = random_sphere_point(&mut rng);
        let phi: f64 = rng.random_range(0.0..TWO_PI);
        let (e1, e2) = x.tangent_frame();
        let omega = fiber_direction(&e1, &e2, phi);
        let fstar = metric.dual_norm_fast(&x, &omega);
        if !(fstar.is_finite() && fstar > 0.0) {
            return Err(FinslerError::NonFiniteDensity(i));
        }
        let rho = 1.0 / (fstar * fstar);
        let weight = rho * scale;
        total += weight;
        samples.push(LiouvilleSample { covector: Covector::projected(x, omega / fstar), weight });
    }
    Ok((samples, total))
}

/// Draws `n` unit covectors distributed according to the normalized contact
/// volume (equal weights), by rejection against a scanned density envelope.
pub fn sample_liouville_unit(metric: &FinslerMetric, n: usize, seed: u64) -> Vec<Covector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51c7_c1e5_0f0f_0f0f);
    let mut rho_max = 0.0_f64;
    for x in crate::sphere::fibonacci_sphere(128) {
        for i in 0..32 {
            let phi = TWO_PI * i as f64 / 32.0;
            rho_max = rho_max.max(liouville_density(metric, &x, phi));
        }
    }
    rho_max *= 1.2;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = random_sphere_point(&mut rng);
        let phi: f64 = rng.random_range(0.0..TWO_PI);
        let rho = liouville_density(metric, &x, phi);
        let u: f64 = rng.random_range(0.0..rho_max);
        if u <= rho {
            let (e1, e2) = x.tangent_frame();
            let omega = fiber_direction(&e1, &e2, phi);
            let fstar = metric.dual_norm_fast(&x, &omega);
            out.push(Covector::projected(x, omega / fstar));
        }
    }
    out
}

// -- chi-squared helpers -----------------------------------------------------

/// Pearson chi-squared statistic for uniformity of points on the sphere over
/// an equal-area `z x azimuth` binning. Returns `(statistic, dof)`.
pub fn chi2_uniformity(points: &[SpherePoint], z_bins: usize, az_bins: usize) -> (f64, usize) {
    let k = z_bins * az_bins;
    let mut counts = vec![0usize; k];
    for p in points {
        let v = p.coords();
        let iz = (((v.z + 1.0) / 2.0 * z_bins as f64) as usize).min(z_bins - 1);
        let az = v.y.atan2(v.x).rem_euclid(TWO_PI);
        let ia = ((az / TWO_PI * az_bins as f64) as usize).min(az_bins - 1);
        counts[iz * az_bins + ia] += 1;
    }
    let expected = points.len() as f64 / k as f64;
    let stat = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    (stat, k - 1)
}

/// Upper critical value of the chi-squared distribution.
pub fn chi2_critical(dof: usize, alpha: f64) -> f64 {
    ChiSquared::new(dof as f64).expect("dof").inverse_cdf(1.0 - alpha)
}
