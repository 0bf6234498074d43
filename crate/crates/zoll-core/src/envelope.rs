//! Construction of non-round Zoll Finsler metrics from enveloping functions.
//!
//! The round metric on the sphere is the envelope of the signed distances to
//! the bisector great circles of a small disk `D`: for a boundary angle `p`,
//! `f_p(x) = arcsin(x . u_p)` where `u_p` is the unit tangent at the disk
//! center toward the boundary point of angle `p`, and `|v| = sup_p df_p(v)`
//! holds inside `D`. Perturbing the family by antisymmetrized smooth bumps
//! supported away from the boundary collar leaves every geodesic crossing of
//! the disk with the same entry/exit data, so the perturbed metric stays
//! Zoll with geodesic length `2 pi`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finsler::{
    audit_points, golden_max, ConvexityAudit, FinslerMetric, MetricKernel, Provenance,
};
use crate::sphere::{
    fibonacci_sphere, geodesic_distance, reparametrize_constant_speed, slerp, SphereCurve,
    SpherePoint, Vec3, TWO_PI,
};

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("disk radius {0:.4} must be positive and below pi/4")]
    RadiusTooLarge(f64),
    #[error("collar width {0:.4} must lie in (0, radius)")]
    CollarInvalid(f64),
    #[error("bump support reaches the collar: center offset {offset:.4} + 2 sigma_x {sigma:.4} exceeds {limit:.4}")]
    BumpOutsideCore { offset: f64, sigma: f64, limit: f64 },
    #[error("bump widths must be positive")]
    BadWidths,
    #[error("amplitude too large: convexity margin {margin:.3e} at ({x:.3}, {y:.3}, {z:.3})")]
    AmplitudeTooLarge { margin: f64, x: f64, y: f64, z: f64 },
    #[error("point lies outside the perturbation disk (distance {0:.4} >= radius {1:.4})")]
    OutsideDisk(f64, f64),
    #[error("curve error: {0}")]
    Curve(#[from] crate::sphere::SphereError),
}

/// A smooth compactly supported perturbation of the enveloping family,
/// `eps * [w(p) b(x) - w(p + pi) b(x)]` with `w` a bump in the boundary
/// angle around `p0` and `b` a bump in distance from `x_center`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpPerturbation {
    pub p0: f64,
    pub x_center: SpherePoint,
    pub eps: f64,
    pub sigma_p: f64,
    pub sigma_x: f64,
}

/// The enveloping-function data generating a Zoll metric: disk, collar,
/// closed-form round family, bump perturbations, and the antipodal flag that
/// mirrors the construction to the opposite disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopingFamily {
    pub center: SpherePoint,
    pub radius: f64,
    pub collar: f64,
    pub bumps: Vec<BumpPerturbation>,
    pub antipodal: bool,
}

/// `exp(1 - 1/(1 - t^2))` on `(-1, 1)`, zero outside; unit height at 0.
fn cutoff(t: f64) -> f64 {
    let t2 = t * t;
    if t2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t2)).exp()
    }
}

/// Smallest absolute difference of two angles on the circle.
fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TWO_PI);
    d.min(TWO_PI - d)
}

impl BumpPerturbation {
    /// Boundary-angle factor `w(p)`.
    fn w(&self, p: f64) -> f64 {
        cutoff(angle_diff(p, self.p0) / self.sigma_p)
    }

    /// Antisymmetrized angle factor `w(p) - w(p + pi)`.
    fn w_odd(&self, p: f64) -> f64 {
        self.w(p) - self.w(p + std::f64::consts::PI)
    }

    /// Spatial factor as a function of `s = x . x_center`, written in the
    /// smooth variable `q = acos(s)^2` so it is C-infinity at the center.
    /// Scaled by `sigma_x` so its gradient is O(1) and the amplitude `eps`
    /// expresses the covector perturbation directly.
    fn b(&self, s: f64) -> f64 {
        let q = s.clamp(-1.0, 1.0).acos().powi(2);
        let u = q / (self.sigma_x * self.sigma_x);
        if u >= 1.0 {
            0.0
        } else {
            self.sigma_x * (1.0 - 1.0 / (1.0 - u)).exp()
        }
    }

    /// Derivative of the spatial factor with respect to `s`.
    fn db_ds(&self, s: f64) -> f64 {
        let s = s.clamp(-1.0, 1.0);
        let d = s.acos();
        let q = d * d;
        let s2 = self.sigma_x * self.sigma_x;
        let u = q / s2;
        if u >= 1.0 {
            return 0.0;
        }
        // dq/ds = -2 acos(s) / sqrt(1 - s^2), with its smooth limit -2 at s=1
        let dq_ds = if 1.0 - s < 1e-9 {
            -2.0 - 2.0 * (1.0 - s) / 3.0
        } else {
            -2.0 * d / (1.0 - s * s).sqrt()
        };
        let b = (1.0 - 1.0 / (1.0 - u)).exp();
        let denom = (1.0 - u) * (1.0 - u);
        -self.sigma_x * b * dq_ds / (s2 * denom)
    }
}

impl EnvelopingFamily {
    pub fn new(
        center: SpherePoint,
        radius: f64,
        collar: f64,
        bumps: Vec<BumpPerturbation>,
        antipodal: bool,
    ) -> Result<Self, EnvelopeError> {
        let fam = Self { center, radius, collar, bumps, antipodal };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if !(self.radius > 0.0 && self.radius < std::f64::consts::FRAC_PI_4) {
            return Err(EnvelopeError::RadiusTooLarge(self.radius));
        }
        if !(self.collar > 0.0 && self.collar < self.radius) {
            return Err(EnvelopeError::CollarInvalid(self.collar));
        }
        let limit = self.radius - self.collar;
        for bump in &self.bumps {
            if !(bump.sigma_p > 0.0 && bump.sigma_x > 0.0) {
                return Err(EnvelopeError::BadWidths);
            }
            let offset = geodesic_distance(&bump.x_center, &self.center);
            if offset + 2.0 * bump.sigma_x > limit {
                return Err(EnvelopeError::BumpOutsideCore {
                    offset,
                    sigma: bump.sigma_x,
                    limit,
                });
            }
        }
        Ok(())
    }

    /// Default single-bump family: disk radius `pi/8`, collar `r/4`, bump at
    /// the disk center with widths that keep the convexity audit passing for
    /// amplitudes up to about `0.05`.
    pub fn single_bump(center: SpherePoint, eps: f64) -> Result<Self, EnvelopeError> {
        let radius = std::f64::consts::FRAC_PI_8;
        let collar = radius / 4.0;
        let bump = BumpPerturbation {
            p0: 0.7,
            x_center: center,
            eps,
            sigma_p: 1.2,
            sigma_x: 0.45 * (radius - collar),
        };
        Self::new(center, radius, collar, vec![bump], false)
    }

    /// Mirrors every perturbation to the antipodal disk so that
    /// `F(-x, -v) = F(x, v)` holds exactly; the resulting metric is balanced.
    pub fn make_antipodal(&self) -> Self {
        let mut fam = self.clone();
        fam.antipodal = true;
        fam
    }

    /// Orthonormal frame at the disk center fixing the boundary
    /// parametrization `u_p = cos(p) a + sin(p) b`.
    pub fn boundary_frame(&self) -> (Vec3, Vec3) {
        self.center.tangent_frame()
    }

    pub fn boundary_tangent(&self, p: f64) -> Vec3 {
        let (a, b) = self.boundary_frame();
        a * p.cos() + b * p.sin()
    }

    /// Boundary point of angle `p`: `exp_center(r u_p)`.
    pub fn boundary_point(&self, p: f64) -> SpherePoint {
        let u = self.boundary_tangent(p);
        SpherePoint::project(self.center.coords() * self.radius.cos() + u * self.radius.sin())
            .expect("boundary point")
    }

    pub fn contains(&self, x: &SpherePoint) -> bool {
        geodesic_distance(x, &self.center) < self.radius
    }

    pub fn in_antipodal_disk(&self, x: &SpherePoint) -> bool {
        self.antipodal && geodesic_distance(x, &self.center.antipode()) < self.radius
    }

    /// Unperturbed enveloping value: signed round distance to the bisector
    /// `H_p`, i.e. `arcsin(x . u_p)`.
    pub fn base_value(&self, p: f64, x: &SpherePoint) -> Result<f64, EnvelopeError> {
        let d = geodesic_distance(x, &self.center);
        if d >= self.radius {
            return Err(EnvelopeError::OutsideDisk(d, self.radius));
        }
        Ok(self.base_value_unchecked(p, x))
    }

    fn base_value_unchecked(&self, p: f64, x: &SpherePoint) -> f64 {
        x.coords().dot(&self.boundary_tangent(p)).clamp(-1.0, 1.0).asin()
    }

    /// Perturbed enveloping value `f~_p(x)`.
    pub fn value(&self, p: f64, x: &SpherePoint) -> Result<f64, EnvelopeError> {
        let d = geodesic_distance(x, &self.center);
        if d >= self.radius {
            return Err(EnvelopeError::OutsideDisk(d, self.radius));
        }
        Ok(self.value_unchecked(p, x))
    }

    fn value_unchecked(&self, p: f64, x: &SpherePoint) -> f64 {
        let mut v = self.base_value_unchecked(p, x);
        for bump in &self.bumps {
            let s = x.coords().dot(&bump.x_center.coords());
            v += bump.eps * bump.w_odd(p) * bump.b(s);
        }
        v
    }

    /// Differential `d f~_p(x)` as a tangent covector form.
    pub fn differential(&self, p: f64, x: &SpherePoint) -> Vec3 {
        let u = self.boundary_tangent(p);
        let su = x.coords().dot(&u).clamp(-1.0, 1.0);
        let mut form = x.project_tangent(u) / (1.0 - su * su).sqrt();
        for bump in &self.bumps {
            let s = x.coords().dot(&bump.x_center.coords());
            let w = bump.w_odd(p);
            if w != 0.0 {
                form += x.project_tangent(bump.x_center.coords()) * (bump.eps * w * bump.db_ds(s));
            }
        }
        form
    }

    /// Envelope norm `sup_p d f~_p(x)(v)` by dense scan plus golden-section
    /// refinement around every near-optimal local maximum.
    pub fn envelope_norm(&self, x: &SpherePoint, v: &Vec3, scan: usize) -> f64 {
        let mut vals = Vec::with_capacity(scan);
        let mut best = f64::NEG_INFINITY;
        for i in 0..scan {
            let p = TWO_PI * i as f64 / scan as f64;
            let val = self.differential(p, x).dot(v);
            if val > best {
                best = val;
            }
            vals.push(val);
        }
        let step = TWO_PI / scan as f64;
        let mut refined = best;
        for i in 0..scan {
            let prev = vals[(i + scan - 1) % scan];
            let next = vals[(i + 1) % scan];
            if vals[i] >= prev && vals[i] >= next && vals[i] > best - 0.05 * best.abs().max(1e-9) {
                let p0 = step * i as f64;
                let mut g = |p: f64| self.differential(p, x).dot(v);
                let (_, val) = golden_max(&mut g, p0 - step, p0 + step, 1e-10);
                refined = refined.max(val);
            }
        }
        refined
    }

    /// Label of the geodesic through `(x, v)` inside the disk: the boundary
    /// angle whose differential is maximized by `v`.
    pub fn label_of(&self, x: &SpherePoint, v: &Vec3, scan: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut best_p = 0.0;
        for i in 0..scan {
            let p = TWO_PI * i as f64 / scan as f64;
            let val = self.differential(p, x).dot(v);
            if val > best {
                best = val;
                best_p = p;
            }
        }
        let step = TWO_PI / scan as f64;
        let mut g = |p: f64| self.differential(p, x).dot(v);
        let (p, _) = golden_max(&mut g, best_p - step, best_p + step, 1e-12);
        p
    }

    /// The `F~`-gradient of `f~_p` at `x`: the unique vector with
    /// `d f~_p(v) = 1` and `d (del_p f~_p)(v) = 0` tangent at `x`
    /// (the characteristic direction of the envelope).
    pub fn gradient_field(&self, p: f64, x: &SpherePoint) -> Vec3 {
        let xi = self.differential(p, x);
        let h = 1e-6;
        let dxi = (self.differential(p + h, x) - self.differential(p - h, x)) / (2.0 * h);
        let n = x.coords();
        let m = nalgebra::Matrix3::from_rows(&[xi.transpose(), dxi.transpose(), n.transpose()]);
        let rhs = Vec3::new(1.0, 0.0, 0.0);
        m.lu().solve(&rhs).expect("characteristic system")
    }
}

/// Result of integrating a gradient-field geodesic.
#[derive(Debug, Clone)]
pub struct GradientArc {
    pub curve: SphereCurve,
    /// Whether the trajectory reached the disk boundary before the requested
    /// arclength was exhausted.
    pub exited: bool,
    /// F-arclength actually covered.
    pub arc_length: f64,
    /// F-arclength parameter of each node.
    pub params: Vec<f64>,
}

/// Integrates the `F~`-gradient field of label `p` from `start` for at most
/// `arc` units of `F~`-arclength, clipping at the disk boundary. The output
/// nodes are equally spaced in `F~`-arclength.
pub fn gradient_geodesic(
    fam: &EnvelopingFamily,
    p: f64,
    start: &SpherePoint,
    arc: f64,
) -> Result<GradientArc, EnvelopeError> {
    let d = geodesic_distance(start, &fam.center);
    if d > fam.radius + 1e-9 {
        return Err(EnvelopeError::OutsideDisk(d, fam.radius));
    }
    let h0 = 5e-3_f64.min(arc / 8.0).max(1e-4);
    // uniform steps tiling the requested arc: nodes are equally spaced in
    // F-arclength
    let n_steps = (arc / h0).ceil().max(1.0);
    let h = arc / n_steps;
    let mut nodes = vec![*start];
    let mut params = vec![0.0];
    let mut y = *start;
    let mut s = 0.0;
    let mut exited = false;
    let field = |pt: &SpherePoint| fam.gradient_field(p, pt);
    for _ in 0..n_steps as usize {
        let step = h;
        let next = rk4_sphere_step(&y, step, &field);
        // the clip only applies once the trajectory has left the entry
        // neighborhood; boundary starts head inward first
        if s + step > 2.0 * h && geodesic_distance(&next, &fam.center) >= fam.radius {
            // bisect the boundary crossing
            let mut lo = 0.0;
            let mut hi = step;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let probe = rk4_sphere_step(&y, mid, &field);
                if geodesic_distance(&probe, &fam.center) >= fam.radius {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            y = rk4_sphere_step(&y, hi, &field);
            s += hi;
            nodes.push(y);
            params.push(s);
            exited = true;
            break;
        }
        y = next;
        s += step;
        nodes.push(y);
        params.push(s);
    }
    let curve = SphereCurve::new(nodes, false, 1)?;
    Ok(GradientArc { curve, exited, arc_length: s, params })
}

fn rk4_sphere_step(
    y: &SpherePoint,
    h: f64,
    field: &impl Fn(&SpherePoint) -> Vec3,
) -> SpherePoint {
    let proj = |v: Vec3| SpherePoint::project(v).expect("rk4 point");
    let k1 = field(y);
    let y2 = proj(y.coords() + k1 * (0.5 * h));
    let k2 = field(&y2);
    let y3 = proj(y.coords() + k2 * (0.5 * h));
    let k3 = field(&y3);
    let y4 = proj(y.coords() + k3 * h);
    let k4 = field(&y4);
    proj(y.coords() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

// -- the metric kernel -------------------------------------------------------

/// Finsler metric built from an enveloping family: the sup formula inside
/// the disk (mirrored into the antipodal disk when the family is balanced)
/// and the round metric outside.
pub struct EnvelopingMetric {
    fam: Arc<EnvelopingFamily>,
    scan: usize,
    smoothness: f64,
}

impl EnvelopingMetric {
    pub fn family(&self) -> &EnvelopingFamily {
        &self.fam
    }

    fn dual_radius(&self, x: &SpherePoint, dir: &Vec3) -> f64 {
        // radius of the dual unit curve p -> d f~_p(x) in the direction of
        // `dir`: locate the angle-matching p by scan plus bisection on the
        // angular mismatch, which is monotone for convex dual curves.
        let target = dir.normalize();
        let (e1, e2) = x.tangent_frame();
        let ta = target.dot(&e2).atan2(target.dot(&e1));
        let ang = |p: f64| {
            let xi = self.fam.differential(p, x);
            let a = xi.dot(&e2).atan2(xi.dot(&e1)) - ta;
            // wrap to (-pi, pi]
            let mut a = a.rem_euclid(TWO_PI);
            if a > std::f64::consts::PI {
                a -= TWO_PI;
            }
            a
        };
        let scan = 128;
        let mut prev_p = 0.0;
        let mut prev = ang(0.0);
        let mut bracket = None;
        for i in 1..=scan {
            let p = TWO_PI * i as f64 / scan as f64;
            let cur = ang(p);
            if prev <= 0.0 && cur > 0.0 && (cur - prev).abs() < std::f64::consts::PI {
                bracket = Some((prev_p, p));
                break;
            }
            prev_p = p;
            prev = cur;
        }
        let (mut lo, mut hi) = bracket.unwrap_or((0.0, TWO_PI));
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if ang(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        self.fam.differential(0.5 * (lo + hi), x).norm()
    }
}

impl MetricKernel for EnvelopingMetric {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        let vt = x.project_tangent(*v);
        if self.fam.contains(x) {
            self.fam.envelope_norm(x, &vt, self.scan)
        } else if self.fam.in_antipodal_disk(x) {
            self.fam.envelope_norm(&x.antipode(), &-vt, self.scan)
        } else {
            vt.norm()
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Enveloping
    }

    fn smoothness_scale(&self) -> f64 {
        self.smoothness
    }

    fn dual_norm_hook(&self, x: &SpherePoint, xi: &Vec3) -> Option<f64> {
        let form = x.project_tangent(*xi);
        let n = form.norm();
        if n < 1e-300 {
            return Some(0.0);
        }
        if self.fam.contains(x) {
            Some(n / self.dual_radius(x, &form))
        } else if self.fam.in_antipodal_disk(x) {
            let xa = x.antipode();
            Some(n / self.dual_radius(&xa, &-form))
        } else {
            Some(n)
        }
    }

    fn closed_geodesic_hook(&self, x: &SpherePoint, v: &Vec3, nodes: usize) -> Option<SphereCurve> {
        spliced_closed_geodesic(&self.fam, x, v, nodes).ok()
    }

    fn preferred_axis(&self) -> Option<SpherePoint> {
        Some(self.fam.center)
    }
}

/// Builds the metric and enforces the convexity audit; fails with the worst
/// fiber when the amplitude is too large.
pub fn build_metric(fam: &EnvelopingFamily) -> Result<FinslerMetric, EnvelopeError> {
    fam.validate()?;
    let smoothness = fam
        .bumps
        .iter()
        .map(|b| b.sigma_p.min(b.sigma_x))
        .fold(1.0_f64, f64::min);
    let kernel = EnvelopingMetric { fam: Arc::new(fam.clone()), scan: 512, smoothness };
    let metric = FinslerMetric::new(kernel);
    let audit = audit_enveloping(fam, &metric);
    if !audit.pass {
        let w = audit.worst_point.coords();
        return Err(EnvelopeError::AmplitudeTooLarge {
            margin: audit.min_margin,
            x: w.x,
            y: w.y,
            z: w.z,
        });
    }
    Ok(metric)
}

/// Convexity audit with base samples concentrated where the metric is
/// non-round: a global lattice plus dense coverage of the perturbed disks.
pub fn audit_enveloping(fam: &EnvelopingFamily, metric: &FinslerMetric) -> ConvexityAudit {
    let mut points = fibonacci_sphere(128);
    for lattice in fibonacci_sphere(512) {
        // map the whole-sphere lattice into the disk (and its mirror)
        let z = lattice.coords().z;
        let frac = (z + 1.0) / 2.0;
        let rho = fam.radius * frac.sqrt();
        let az = lattice.coords().y.atan2(lattice.coords().x);
        let (a, b) = fam.center.tangent_frame();
        let dir = a * az.cos() + b * az.sin();
        let p = SpherePoint::project(fam.center.coords() * rho.cos() + dir * rho.sin())
            .expect("disk point");
        points.push(p);
        if fam.antipodal {
            points.push(p.antipode());
        }
    }
    audit_points(metric, &points, 128)
}

// -- spliced closed geodesics -------------------------------------------------

/// Closed geodesic of the enveloping metric through `(x, v)`, assembled from
/// the round great circle outside the perturbation disks and gradient-field
/// arcs across them. Boundary rigidity of the construction keeps entry and
/// exit data equal to the round chord's, so the result is a closed curve of
/// `F`-length `2 pi`.
pub fn spliced_closed_geodesic(
    fam: &EnvelopingFamily,
    x: &SpherePoint,
    v: &Vec3,
    nodes: usize,
) -> Result<SphereCurve, EnvelopeError> {
    let vt = x.project_tangent(*v);
    let (anchor, dir) = if fam.contains(x) {
        // flow forward out of the disk to reach round territory
        let p = fam.label_of(x, &vt, 512);
        let arc = gradient_geodesic(fam, p, x, 4.0 * fam.radius)?;
        let curve = arc.curve;
        let m = curve.len();
        let last = curve.nodes()[m - 1];
        let prev = curve.nodes()[m - 2];
        let t = last.project_tangent(last.coords() - prev.coords()).normalize();
        (last, t)
    } else if fam.in_antipodal_disk(x) {
        let xa = x.antipode();
        let p = fam.label_of(&xa, &-vt, 512);
        let arc = gradient_geodesic(fam, p, &xa, 4.0 * fam.radius)?;
        let curve = arc.curve;
        let m = curve.len();
        let last = curve.nodes()[m - 1].antipode();
        let prev = curve.nodes()[m - 2].antipode();
        let t = last.project_tangent(last.coords() - prev.coords()).normalize();
        (last, t)
    } else {
        (*x, vt.normalize())
    };

    // great-circle data: pole and a parametrization anchored at `anchor`
    let pole = anchor.coords().cross(&dir).normalize();
    let a0 = anchor.coords();
    let b0 = pole.cross(&a0);
    let circle_point = |t: f64| a0 * t.cos() + b0 * t.sin();

    // crossing window with the disk at `center`: the circle is inside the
    // disk for t in (tc - delta, tc + delta)
    let window = |center: &SpherePoint| -> Option<(f64, f64)> {
        let alpha = a0.dot(&center.coords());
        let beta = b0.dot(&center.coords());
        let reach = (alpha * alpha + beta * beta).sqrt();
        let cr = fam.radius.cos();
        if reach <= cr {
            return None;
        }
        let tc = beta.atan2(alpha);
        let delta = (cr / reach).acos();
        Some((tc, delta))
    };

    let mut windows: Vec<(f64, f64, bool)> = Vec::new();
    if let Some((tc, delta)) = window(&fam.center) {
        windows.push((tc, delta, false));
    }
    if fam.antipodal {
        if let Some((tc, delta)) = window(&fam.center.antipode()) {
            windows.push((tc, delta, true));
        }
    }
    windows.sort_by(|a, b| a.0.rem_euclid(TWO_PI).total_cmp(&b.0.rem_euclid(TWO_PI)));

    // assemble: round arcs between windows, gradient arcs across them
    let fine = (nodes * 4).max(512);
    let step = TWO_PI / fine as f64;
    let mut pts: Vec<SpherePoint> = Vec::with_capacity(fine + 64);
    if windows.is_empty() {
        for i in 0..fine {
            pts.push(SpherePoint::project(circle_point(step * i as f64)).expect("circle"));
        }
    } else {
        let mut t = windows[0].0.rem_euclid(TWO_PI) + windows[0].1;
        let segments: Vec<(f64, f64, bool)> = windows
            .iter()
            .map(|w| (w.0.rem_euclid(TWO_PI), w.1, w.2))
            .collect();
        for k in 0..segments.len() {
            let next = segments[(k + 1) % segments.len()];
            let t_entry_next = next.0 + TWO_PI * ((k + 1) / segments.len()) as f64 - next.1;
            // round arc from exit of window k to entry of window k+1
            let mut t_target = t_entry_next;
            while t_target < t {
                t_target += TWO_PI;
            }
            let arc_len = t_target - t;
            let n_arc = ((arc_len / step).ceil() as usize).max(2);
            for i in 0..n_arc {
                let tt = t + arc_len * i as f64 / n_arc as f64;
                pts.push(SpherePoint::project(circle_point(tt)).expect("circle"));
            }
            // gradient arc across window k+1
            let entry = SpherePoint::project(circle_point(t_target)).expect("entry");
            let tangent = (-a0 * t_target.sin() + b0 * t_target.cos()).normalize();
            let mirrored = next.2;
            let (e_pt, e_dir) = if mirrored {
                (entry.antipode(), -tangent)
            } else {
                (entry, tangent)
            };
            let p = fam.label_of(&e_pt, &e_dir, 512);
            let arc = gradient_geodesic(fam, p, &e_pt, 6.0 * fam.radius)?;
            for q in arc.curve.nodes().iter().skip(1) {
                pts.push(if mirrored { q.antipode() } else { *q });
            }
            // resume the circle at the analytic exit of the window
            t = t_target + 2.0 * next.1;
        }
    }
    // close up: drop a possible duplicate of the start
    if pts.len() > 2 && geodesic_distance(&pts[0], pts.last().unwrap()) < 1e-9 {
        pts.pop();
    }
    let raw = SphereCurve::new(densify(pts), true, 1)?;
    let curve = reparametrize_constant_speed(&raw, nodes)?;
    // rotate so the first node is nearest to the request point
    let k = curve
        .nodes()
        .iter()
        .enumerate()
        .min_by(|a, b| {
            geodesic_distance(a.1, x).total_cmp(&geodesic_distance(b.1, x))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut rotated: Vec<SpherePoint> = curve.nodes()[k..].to_vec();
    rotated.extend_from_slice(&curve.nodes()[..k]);
    Ok(SphereCurve::new(rotated, true, 1)?)
}

/// Inserts midpoints wherever consecutive points are farther apart than the
/// node-gap bound allows.
fn densify(pts: Vec<SpherePoint>) -> Vec<SpherePoint> {
    let mut out = Vec::with_capacity(pts.len() * 2);
    let n = pts.len();
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        out.push(a);
        let gap = geodesic_distance(&a, &b);
        if gap > 0.15 {
            let k = (gap / 0.15).ceil() as usize;
            for j in 1..k {
                out.push(
                    SpherePoint::project(slerp(a.coords(), b.coords(), j as f64 / k as f64))
                        .expect("densify"),
                );
            }
        }
    }
    out
}

// -- affine planar content -----------------------------------------------------

/// Mahler product of the fiber at `x`, exploiting the envelope structure:
/// the dual unit circle is traced directly by `p -> d f~_p(x)`, so its area
/// is a shoelace sum, and the primal ball area integrates `F^{-2}` over
/// directions.
pub fn fiber_content(fam: &EnvelopingFamily, metric: &FinslerMetric, x: &SpherePoint) -> f64 {
    let (e1, e2) = x.tangent_frame();
    let n_dir = 1024;
    let mut primal = 0.0;
    for i in 0..n_dir {
        let phi = TWO_PI * i as f64 / n_dir as f64;
        let d = e1 * phi.cos() + e2 * phi.sin();
        let f = metric.eval(x, &d);
        primal += 0.5 / (f * f);
    }
    primal *= TWO_PI / n_dir as f64;

    let inside = fam.contains(x);
    let (xx, flip) = if inside {
        (*x, 1.0)
    } else if fam.in_antipodal_disk(x) {
        (x.antipode(), -1.0)
    } else {
        // round fiber outside the disks
        return primal * std::f64::consts::PI;
    };
    let n_p = 2048;
    let mut dual = 0.0;
    let mut prev = fam.differential(0.0, &xx) * flip;
    let first = prev;
    for i in 1..=n_p {
        let p = TWO_PI * i as f64 / n_p as f64;
        let xi = if i == n_p { first } else { fam.differential(p, &xx) * flip };
        let a = (prev.dot(&e1), prev.dot(&e2));
        let b = (xi.dot(&e1), xi.dot(&e2));
        dual += 0.5 * (a.0 * b.1 - a.1 * b.0);
        prev = xi;
    }
    primal * dual.abs()
}

/// Minimum fiber content over a deterministic sample of base points
/// (disk-dense plus a global lattice).
pub fn min_fiber_content(fam: &EnvelopingFamily, metric: &FinslerMetric) -> f64 {
    use rayon::prelude::*;
    let mut points = fibonacci_sphere(32);
    for lattice in fibonacci_sphere(96) {
        let z = lattice.coords().z;
        let frac = (z + 1.0) / 2.0;
        let rho = fam.radius * frac.sqrt() * 0.98;
        let az = lattice.coords().y.atan2(lattice.coords().x);
        let (a, b) = fam.center.tangent_frame();
        let dir = a * az.cos() + b * az.sin();
        points.push(
            SpherePoint::project(fam.center.coords() * rho.cos() + dir * rho.sin())
                .expect("disk point"),
        );
    }
    points
        .par_iter()
        .map(|x| fiber_content(fam, metric, x))
        .reduce(|| f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finsler::{audit_quadratic_convexity, dual_norm, AuditGrid, Covector};
    use crate::sphere::hausdorff;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn center() -> SpherePoint {
        SpherePoint::project(Vec3::new(0.2, -0.3, 1.0)).unwrap()
    }

    fn plain_family() -> EnvelopingFamily {
        EnvelopingFamily::new(
            center(),
            std::f64::consts::FRAC_PI_8,
            std::f64::consts::FRAC_PI_8 / 4.0,
            vec![],
            false,
        )
        .unwrap()
    }

    fn bumpy_family(eps: f64) -> EnvelopingFamily {
        EnvelopingFamily::single_bump(center(), eps).unwrap()
    }

    fn random_interior(fam: &EnvelopingFamily, rng: &mut impl Rng) -> SpherePoint {
        loop {
            let jitter = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let x = SpherePoint::project(fam.center.coords() + jitter * 0.3).unwrap();
            if geodesic_distance(&x, &fam.center) < 0.9 * fam.radius {
                return x;
            }
        }
    }

    #[test]
    fn base_value_at_center_and_boundary() {
        let fam = plain_family();
        for p in [0.0, 1.1, 2.9, 4.4] {
            assert_abs_diff_eq!(fam.base_value(p, &center()).unwrap(), 0.0, epsilon = 1e-12);
        }
        // f_p evaluated toward the boundary point approaches r: probe just
        // inside the disk along u_p.
        let p = 0.8;
        let r = fam.radius;
        let probe = crate::sphere::exp_map(&center(), fam.boundary_tangent(p) * (r * 0.999));
        assert_abs_diff_eq!(fam.base_value(p, &probe).unwrap(), 0.999 * r, epsilon = 1e-9);

        // oracle: distance minimization to the sampled bisector great circle
        let u = fam.boundary_tangent(p);
        let mut min_d = f64::INFINITY;
        for i in 0..200_000 {
            let t = TWO_PI * i as f64 / 200_000.0;
            // the bisector is the great circle orthogonal to u_p
            let (a, b) = SpherePoint::project(u).unwrap().tangent_frame();
            let q = a * t.cos() + b * t.sin();
            min_d = min_d.min(geodesic_distance(&probe, &SpherePoint::project(q).unwrap()));
        }
        assert_abs_diff_eq!(fam.base_value(p, &probe).unwrap(), min_d, epsilon = 1e-6);
    }

    #[test]
    fn family_is_odd_in_p() {
        let fam = bumpy_family(0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = random_interior(&fam, &mut rng);
            let p: f64 = rng.random_range(0.0..TWO_PI);
            let plus = fam.value(p, &x).unwrap();
            let minus = fam.value(p + std::f64::consts::PI, &x).unwrap();
            assert_abs_diff_eq!(plus, -minus, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_family_reproduces_round() {
        let fam = plain_family();
        let metric = build_metric(&fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let phi: f64 = rng.random_range(0.0..TWO_PI);
            let v = e1 * phi.cos() + e2 * phi.sin();
            worst = worst.max((metric.eval(&x, &v) - 1.0).abs());
        }
        assert!(worst < 1e-6, "sup deviation from round {worst:.2e}");
    }

    #[test]
    fn differentials_have_unit_dual_norm() {
        let fam = bumpy_family(0.03);
        let metric = build_metric(&fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let x = random_interior(&fam, &mut rng);
            let p: f64 = rng.random_range(0.0..TWO_PI);
            let xi = Covector::projected(x, fam.differential(p, &x));
            let fs = dual_norm(&metric, &xi).unwrap();
            assert!((fs - 1.0).abs() < 1e-6, "F*(df_p) = {fs:.8}");
            // the fast dual hook agrees with the generic maximization
            let fast = metric.dual_norm_fast(&x, &xi.form());
            assert!((fast - fs).abs() < 1e-7, "hook {fast:.9} vs scan {fs:.9}");
        }
    }

    #[test]
    fn distance_formula_matches_shooting() {
        let fam = bumpy_family(0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..4 {
            let x = random_interior(&fam, &mut rng);
            let y = random_interior(&fam, &mut rng);
            if geodesic_distance(&x, &y) < 0.05 {
                continue;
            }
            // sup formula for the distance
            let mut g = |p: f64| fam.value(p, &x).unwrap() - fam.value(p, &y).unwrap();
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0.0;
            for i in 0..512 {
                let p = TWO_PI * i as f64 / 512.0;
                let v = g(p);
                if v > best {
                    best = v;
                    best_p = p;
                }
            }
            let (_, d_sup) = golden_max(&mut g, best_p - 0.02, best_p + 0.02, 1e-12);
            let d_sup = d_sup.max(best);
            // shooting oracle: the geodesic through x and y is a gradient
            // curve; minimize the miss distance over the label.
            let mut miss = |p: f64| -> f64 {
                let arc = gradient_geodesic(&fam, p, &y, 2.5 * d_sup.abs().max(0.05)).unwrap();
                arc.curve.distance_to(&x)
            };
            let mut best_missed = f64::INFINITY;
            let mut best_label = 0.0;
            for i in 0..512 {
                let p = TWO_PI * i as f64 / 512.0;
                let m = miss(p);
                if m < best_missed {
                    best_missed = m;
                    best_label = p;
                }
            }
            let mut neg = |p: f64| -miss(p);
            let (label, _) = golden_max(&mut neg, best_label - 0.02, best_label + 0.02, 1e-10);
            // F-length from y to x along the shot curve, with sub-node
            // refinement by projecting x onto the adjacent arcs
            let arc = gradient_geodesic(&fam, label, &y, 2.5 * d_sup.abs().max(0.05)).unwrap();
            let nodes = arc.curve.nodes();
            let mut d_shoot = f64::INFINITY;
            let mut best_miss = f64::INFINITY;
            for k in 0..nodes.len() - 1 {
                let a = nodes[k].coords();
                let b = nodes[k + 1].coords();
                let gap = a.dot(&b).clamp(-1.0, 1.0).acos();
                let n = a.cross(&b).normalize();
                let foot = x.coords() - n * x.coords().dot(&n);
                if foot.norm() < 1e-12 {
                    continue;
                }
                let foot = foot.normalize();
                let lambda =
                    (a.dot(&foot).clamp(-1.0, 1.0).acos() / gap).clamp(0.0, 1.0);
                let miss = (x.coords() - crate::sphere::slerp(a, b, lambda)).norm();
                if miss < best_miss {
                    best_miss = miss;
                    d_shoot = arc.params[k] + lambda * (arc.params[k + 1] - arc.params[k]);
                }
            }
            assert!(
                (d_shoot - d_sup).abs() < 1e-4,
                "sup {d_sup:.6} vs shooting {d_shoot:.6} (miss {best_miss:.2e}, round {:.6})",
                geodesic_distance(&x, &y)
            );
        }
    }

    #[test]
    fn gradient_curtill_unit_rate() {
        let fam = bumpy_family(0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_interior(&fam, &mut rng);
            let p: f64 = rng.random_range(0.0..TWO_PI);
            let arc = gradient_geodesic(&fam, p, &x, 0.1).unwrap();
            let n = arc.curve.len();
            let end = arc.curve.nodes()[n - 1];
            if arc.exited {
                continue;
            }
            let df = fam.value(p, &end).unwrap() - fam.value(p, &x).unwrap();
            assert!(
                (df - arc.arc_length).abs() < 1e-6,
                "rate error {:.2e}",
                (df - arc.arc_length).abs()
            );
        }
    }

    #[test]
    fn unperturbed_gradient_curves_are_meridians() {
        let fam = plain_family();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = random_interior(&fam, &mut rng);
            let p: f64 = rng.random_range(0.0..TWO_PI);
            let arc = gradient_geodesic(&fam, p, &x, 0.2).unwrap();
            // analytic: the great circle through x in the direction of the
            // projected u_p
            let u = fam.boundary_tangent(p);
            let dir = x.project_tangent(u).normalize();
            let pole = SpherePoint::project(x.coords().cross(&dir)).unwrap();
            let mut worst = 0.0_f64;
            for q in arc.curve.nodes() {
                worst = worst.max(q.coords().dot(&pole.coords()).abs());
            }
            assert!(worst < 1e-8, "meridian deviation {worst:.2e}");
        }
    }

    #[test]
    fn perturbed_chords_share_endpoint_tangents() {
        // enter the disk on a round chord; the perturbed geodesic must exit
        // with the same tangent data as the unperturbed chord
        let fam = bumpy_family(0.04);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..6 {
            // random entry point and inward direction
            let theta: f64 = rng.random_range(0.0..TWO_PI);
            let entry = fam.boundary_point(theta);
            let inward = entry.project_tangent(fam.center.coords() - entry.coords()).normalize();
            let (t1, t2) = (inward, entry.project_tangent(inward.cross(&entry.coords())));
            let a: f64 = rng.random_range(-0.9..0.9);
            let dir = (t1 + t2 * a).normalize();
            let p = fam.label_of(&entry, &dir, 512);
            let arc = gradient_geodesic(&fam, p, &entry, 4.0 * fam.radius).unwrap();
            assert!(arc.exited, "gradient arc must cross the disk");
            let nodes = arc.curve.nodes();
            let exit = nodes[nodes.len() - 1];
            let prev = nodes[nodes.len() - 2];
            let exit_dir = exit.project_tangent(exit.coords() - prev.coords()).normalize();

            // round chord from the same entry data
            let pole = entry.coords().cross(&dir).normalize();
            // exit of the round chord: second boundary crossing
            let a0 = entry.coords();
            let b0 = pole.cross(&a0);
            let alpha = a0.dot(&fam.center.coords());
            let beta = b0.dot(&fam.center.coords());
            let reach = (alpha * alpha + beta * beta).sqrt();
            let delta = (fam.radius.cos() / reach).acos();
            let tc = beta.atan2(alpha);
            let t_exit = tc + delta;
            let round_exit = a0 * t_exit.cos() + b0 * t_exit.sin();
            let round_dir = -a0 * t_exit.sin() + b0 * t_exit.cos();

            assert!(
                (exit.coords() - round_exit).norm() < 1e-5,
                "exit point deviation {:.2e}",
                (exit.coords() - round_exit).norm()
            );
            assert!(
                (exit_dir - round_dir.normalize()).norm() < 1e-4,
                "exit tangent deviation {:.2e}",
                (exit_dir - round_dir.normalize()).norm()
            );
        }
    }

    #[test]
    fn antipodal_metric_is_exactly_symmetric() {
        let fam = bumpy_family(0.03).make_antipodal();
        let metric = build_metric(&fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let v = e1 * rng.random_range(-1.0..1.0) + e2 * rng.random_range(-1.0..1.0);
            let f = metric.eval(&x, &v);
            let g = metric.eval(&x.antipode(), &-v);
            assert_eq!(f, g, "antipodal symmetry must be exact");
        }
    }

    #[test]
    fn amplitude_bound_enforced_by_audit() {
        let fam = bumpy_family(0.5);
        match build_metric(&fam) {
            Err(EnvelopeError::AmplitudeTooLarge { margin, .. }) => {
                assert!(margin <= 0.0);
            }
            other => panic!("expected amplitude failure, got {:?}", other.map(|_| ())),
        }
        // moderate amplitude passes with margin
        let metric = build_metric(&bumpy_family(0.03)).unwrap();
        let audit = audit_quadratic_convexity(&metric, &AuditGrid::default());
        assert!(audit.pass);
    }

    #[test]
    fn spliced_geodesic_closes_and_is_simple() {
        let fam = bumpy_family(0.03).make_antipodal();
        let metric = build_metric(&fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..6 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let phi: f64 = rng.random_range(0.0..TWO_PI);
            let v = e1 * phi.cos() + e2 * phi.sin();
            let curve = spliced_closed_geodesic(&fam, &x, &v, 256).unwrap();
            assert!(curve.is_simple());
            // F-length of the spliced curve is 2 pi (midpoint-rule measure)
            let mut len = 0.0;
            for i in 0..curve.arc_count() {
                let (a, b) = curve.arc(i);
                let mid = SpherePoint::project(a + b).unwrap();
                len += metric.eval(&mid, &(b - a));
            }
            assert!(
                (len - TWO_PI).abs() < 2e-3,
                "spliced F-length {len:.6} vs 2 pi"
            );
            let _ = metric; // lengths measured against the built metric
        }
    }

    #[test]
    fn spliced_geodesic_without_disk_contact_is_great_circle() {
        let fam = bumpy_family(0.03);
        // start far from the disk with direction chosen so the great circle
        // misses it: take the circle around the disk center axis
        let x0 = fam.center;
        let (e1, e2) = x0.tangent_frame();
        let start = SpherePoint::project(e1).unwrap();
        let v = e2;
        let curve = spliced_closed_geodesic(&fam, &start, &v, 128).unwrap();
        let analytic = SphereCurve::great_circle(&x0, 128).unwrap();
        assert!(hausdorff(&curve, &analytic) < 1e-9);
    }

    #[test]
    fn fiber_content_matches_generic_mahler() {
        let fam = bumpy_family(0.04);
        let metric = build_metric(&fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let x = random_interior(&fam, &mut rng);
            let fast = fiber_content(&fam, &metric, &x);
            let norm = crate::mahler::PlanarNorm::from_metric_fiber(&metric, &x);
            let generic =
                crate::mahler::mahler_product(&norm, &crate::mahler::MahlerConfig::fiber())
                    .unwrap();
            assert!(
                (fast - generic).abs() < 1e-4 * generic,
                "fast {fast:.8} vs generic {generic:.8}"
            );
        }
    }

    #[test]
    fn content_minimum_decreases_with_amplitude() {
        let mut last = f64::INFINITY;
        for eps in [0.015, 0.03, 0.045] {
            let fam = bumpy_family(eps);
            let metric = build_metric(&fam).unwrap();
            let c = min_fiber_content(&fam, &metric);
            assert!(c < last, "content must strictly decrease: {c:.6} !< {last:.6}");
            assert!(c >= crate::mahler::MAHLER_LOWER_BOUND);
            last = c;
        }
        // and the unperturbed content is the round value pi^2
        let fam = plain_family();
        let metric = build_metric(&fam).unwrap();
        let c0 = min_fiber_content(&fam, &metric);
        assert!((c0 - std::f64::consts::PI.powi(2)).abs() < 1e-4);
        assert!(last < c0);
    }

    #[test]
    fn family_serialization_round_trip() {
        let fam = bumpy_family(0.03).make_antipodal();
        let js = serde_json::to_string(&fam).unwrap();
        assert!(js.contains("\"antipodal\":true"));
        assert!(js.contains("\"sigma_p\""));
        let back: EnvelopingFamily = serde_json::from_str(&js).unwrap();
        back.validate().unwrap();
        assert_eq!(back.bumps.len(), fam.bumps.len());
    }

    #[test]
    fn bump_constraints_validated() {
        let c = center();
        // bump too wide for the core region
        let bad = EnvelopingFamily::new(
            c,
            std::f64::consts::FRAC_PI_8,
            std::f64::consts::FRAC_PI_8 / 4.0,
            vec![BumpPerturbation {
                p0: 0.0,
                x_center: c,
                eps: 0.01,
                sigma_p: 0.5,
                sigma_x: 0.4,
            }],
            false,
        );
        assert!(matches!(bad, Err(EnvelopeError::BumpOutsideCore { .. })));
        let bad_radius = EnvelopingFamily::new(c, 1.0, 0.1, vec![], false);
        assert!(matches!(bad_radius, Err(EnvelopeError::RadiusTooLarge(_))));
    }
}
