//! Centrally symmetric planar convex bodies and the Mahler product volume.
//!
//! A body is described by its norm (gauge) sampled over boundary directions;
//! the polar body is reached through the support function, and both areas are
//! computed by periodic boundary quadrature with Richardson extrapolation.

use std::sync::Arc;

use nalgebra::Matrix2;
use thiserror::Error;

use crate::finsler::{golden_max, FinslerMetric};
use crate::sphere::{SpherePoint, TWO_PI};

/// Sharp lower bound of the planar Mahler product, attained exactly by
/// parallelograms.
pub const MAHLER_LOWER_BOUND: f64 = 8.0;

#[derive(Debug, Error)]
pub enum MahlerError {
    #[error("norm is not symmetric: |N(v) - N(-v)| = {0:.3e}")]
    NonSymmetric(f64),
    #[error("unit ball is not convex: support curvature {0:.3e} at angle {1:.4}")]
    NonConvex(f64, f64),
    #[error("norm must be positive, got {0:.3e} at angle {1:.4}")]
    NonPositive(f64, f64),
}

/// A norm on a 2-plane, evaluated on unit directions by angle.
#[derive(Clone)]
pub struct PlanarNorm {
    eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl PlanarNorm {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { eval: Arc::new(eval) }
    }

    /// Euclidean norm: the unit disk.
    pub fn euclidean() -> Self {
        Self::new(|_| 1.0)
    }

    /// Sup norm: the square `[-1, 1]^2`.
    pub fn sup_norm() -> Self {
        Self::new(|phi| phi.cos().abs().max(phi.sin().abs()))
    }

    /// Norm with an elliptical unit ball of the given semiaxes.
    pub fn ellipse(a: f64, b: f64) -> Self {
        Self::new(move |phi| {
            let (s, c) = phi.sin_cos();
            ((c / a).powi(2) + (s / b).powi(2)).sqrt()
        })
    }

    /// The fiber norm of a Finsler metric at a base point, read in the
    /// deterministic tangent frame.
    pub fn from_metric_fiber(metric: &FinslerMetric, x: &SpherePoint) -> Self {
        let metric = metric.clone();
        let x = *x;
        let (e1, e2) = x.tangent_frame();
        Self::new(move |phi| {
            let (s, c) = phi.sin_cos();
            metric.eval(&x, &(e1 * c + e2 * s))
        })
    }

    /// Norm of the image body `A B`: `N'(v) = N(A^{-1} v)`.
    pub fn linear_image(&self, a: Matrix2<f64>) -> Option<Self> {
        let inv = a.try_inverse()?;
        let inner = self.eval.clone();
        Some(Self::new(move |phi| {
            let (s, c) = phi.sin_cos();
            let u = inv * nalgebra::Vector2::new(c, s);
            let r = u.norm();
            inner(u.y.atan2(u.x)) * r
        }))
    }

    pub fn value(&self, phi: f64) -> f64 {
        (self.eval)(phi)
    }

    /// Boundary radius in direction `phi`.
    pub fn radius(&self, phi: f64) -> f64 {
        1.0 / self.value(phi)
    }

    /// Checks central symmetry and convexity of the unit ball on a grid.
    /// Convexity is the sign of the polar-coordinate support curvature
    /// `r^2 + 2 r'^2 - r r''`.
    pub fn validate(&self, samples: usize) -> Result<(), MahlerError> {
        let h = TWO_PI / samples as f64;
        let r: Vec<f64> = (0..samples)
            .map(|i| {
                let phi = h * i as f64;
                self.radius(phi)
            })
            .collect();
        for i in 0..samples {
            let phi = h * i as f64;
            let n = self.value(phi);
            if !(n > 0.0) || !n.is_finite() {
                return Err(MahlerError::NonPositive(n, phi));
            }
            let asym = (n - self.value(phi + std::f64::consts::PI)).abs();
            if asym > 1e-9 * n {
                return Err(MahlerError::NonSymmetric(asym));
            }
            let rm = r[(i + samples - 1) % samples];
            let r0 = r[i];
            let rp = r[(i + 1) % samples];
            let d1 = (rp - rm) / (2.0 * h);
            let d2 = (rp - 2.0 * r0 + rm) / (h * h);
            let curv = r0 * r0 + 2.0 * d1 * d1 - r0 * d2;
            if curv < -1e-6 * r0 * r0 {
                return Err(MahlerError::NonConvex(curv, phi));
            }
        }
        Ok(())
    }
}

/// Quadrature resolution for Mahler products.
#[derive(Debug, Clone, Copy)]
pub struct MahlerConfig {
    /// Boundary direction samples (also the support-sweep resolution).
    pub samples: usize,
    /// Coarse scan size inside each support maximization.
    pub support_scan: usize,
}

impl Default for MahlerConfig {
    fn default() -> Self {
        Self { samples: 65_536, support_scan: 256 }
    }
}

impl MahlerConfig {
    /// Cheaper settings for smooth metric fibers, where the periodic
    /// trapezoid rule converges spectrally.
    pub fn fiber() -> Self {
        Self { samples: 2048, support_scan: 128 }
    }
}

/// Area of the unit ball: `(1/2) Int r(phi)^2 d phi`, Richardson-extrapolated
/// over the full and half grids.
fn ball_area(norm: &PlanarNorm, samples: usize) -> f64 {
    let h = TWO_PI / samples as f64;
    let vals: Vec<f64> = (0..samples)
        .map(|i| {
            let r = norm.radius(h * i as f64);
            0.5 * r * r
        })
        .collect();
    richardson_periodic(&vals, h)
}

/// Support function `h_B(theta) = max_phi r(phi) cos(phi - theta)` by coarse
/// scan plus golden-section refinement (unimodal for convex bodies).
fn support(norm: &PlanarNorm, theta: f64, scan: usize) -> f64 {
    let mut m = |phi: f64| norm.radius(phi) * (phi - theta).cos();
    let mut best = f64::NEG_INFINITY;
    let mut best_phi = theta;
    for i in 0..scan {
        let phi = theta - std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / scan as f64;
        let v = m(phi);
        if v > best {
            best = v;
            best_phi = phi;
        }
    }
    let half = std::f64::consts::PI / scan as f64;
    let (_, refined) = golden_max(&mut m, best_phi - half, best_phi + half, 1e-12);
    refined.max(best)
}

/// Trapezoid sums over the full grid and every second sample, extrapolated.
fn richardson_periodic(vals: &[f64], h: f64) -> f64 {
    let full: f64 = vals.iter().sum::<f64>() * h;
    let half: f64 = vals.iter().step_by(2).sum::<f64>() * (2.0 * h);
    (4.0 * full - half) / 3.0
}

/// Area of the polar body `B* = {xi : <xi, v> <= 1 on B}`.
fn polar_area(norm: &PlanarNorm, cfg: &MahlerConfig) -> f64 {
    let h = TWO_PI / cfg.samples as f64;
    let vals: Vec<f64> = (0..cfg.samples)
        .map(|i| {
            let s = support(norm, h * i as f64, cfg.support_scan);
            0.5 / (s * s)
        })
        .collect();
    richardson_periodic(&vals, h)
}

/// Mahler product volume `area(B) * area(B*)` of a centrally symmetric
/// convex planar body. At least `8`, with equality exactly at
/// parallelograms; affine invariant.
pub fn mahler_product(norm: &PlanarNorm, cfg: &MahlerConfig) -> Result<f64, MahlerError> {
    norm.validate(cfg.samples.min(4096))?;
    Ok(mahler_product_unchecked(norm, cfg))
}

/// Mahler product without the symmetry/convexity validation; for fibers
/// already covered by a metric-level convexity audit.
pub fn mahler_product_unchecked(norm: &PlanarNorm, cfg: &MahlerConfig) -> f64 {
    ball_area(norm, cfg.samples) * polar_area(norm, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    const PI_SQ: f64 = std::f64::consts::PI * std::f64::consts::PI;

    #[test]
    fn disk_product_is_pi_squared() {
        let p = mahler_product(&PlanarNorm::euclidean(), &MahlerConfig::default()).unwrap();
        assert!((p - PI_SQ).abs() < 1e-9, "disk {p:.12}");
    }

    #[test]
    fn square_product_is_eight() {
        let p = mahler_product(&PlanarNorm::sup_norm(), &MahlerConfig::default()).unwrap();
        assert!((p - 8.0).abs() < 1e-6, "square {p:.9}");
    }

    #[test]
    fn ellipse_product_is_pi_squared() {
        let p = mahler_product(&PlanarNorm::ellipse(1.0, 3.0), &MahlerConfig::default()).unwrap();
        assert!((p - PI_SQ).abs() < 1e-6, "ellipse {p:.9}");
    }

    #[test]
    fn product_is_affine_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let bodies = [PlanarNorm::sup_norm(), PlanarNorm::ellipse(0.7, 1.9)];
        let expected = [8.0, PI_SQ];
        for (body, want) in bodies.iter().zip(expected) {
            for _ in 0..3 {
                // random unimodular map: shear * rotation
                let t: f64 = rng.random_range(-1.0..1.0);
                let a: f64 = rng.random_range(0.0..TWO_PI);
                let shear = Matrix2::new(1.0, t, 0.0, 1.0);
                let rot = Matrix2::new(a.cos(), -a.sin(), a.sin(), a.cos());
                let mapped = body.linear_image(shear * rot).unwrap();
                let p = mahler_product(&mapped, &MahlerConfig::default()).unwrap();
                assert!((p - want).abs() < 1e-6, "mapped product {p:.9} vs {want:.9}");
            }
        }
    }

    #[test]
    fn products_respect_the_lower_bound() {
        for body in [
            PlanarNorm::euclidean(),
            PlanarNorm::sup_norm(),
            PlanarNorm::ellipse(0.4, 2.0),
        ] {
            let p = mahler_product(&body, &MahlerConfig::default()).unwrap();
            assert!(p >= MAHLER_LOWER_BOUND - 1e-6);
        }
    }

    #[test]
    fn non_convex_body_rejected() {
        let peanut = PlanarNorm::new(|phi| 1.0 / (1.0 + 0.3 * (2.0 * phi).cos()));
        assert!(matches!(
            mahler_product(&peanut, &MahlerConfig::default()),
            Err(MahlerError::NonConvex(..))
        ));
    }

    #[test]
    fn round_metric_fiber_is_euclidean() {
        let metric = FinslerMetric::round();
        let x = SpherePoint::project(crate::sphere::Vec3::new(0.2, 0.5, -0.9)).unwrap();
        let fiber = PlanarNorm::from_metric_fiber(&metric, &x);
        let p = mahler_product(&fiber, &MahlerConfig::fiber()).unwrap();
        assert!((p - PI_SQ).abs() < 1e-8, "fiber {p:.10}");
    }
}
