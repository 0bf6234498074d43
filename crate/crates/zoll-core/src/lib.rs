//! Numerical geometry of Zoll Finsler metrics on the round two-sphere.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`sphere`] — exact and discrete geometry on the canonical round sphere
//!    (points, tangent vectors, geodesic polylines, areas, intersections).
//! 2. [`finsler`] — reversible quadratically convex norm fields: evaluation,
//!    dual norms, Legendre transform, convexity audits, Liouville sampling.
//! 3. [`mahler`] — planar convex bodies, polar duality and the Mahler product.
//! 4. [`envelope`] — construction of non-round Zoll metrics from enveloping
//!    functions with symmetric bump perturbations.
//! 5. [`geodesics`] — Hamiltonian integration of (co-)geodesic flows, closure
//!    detection, Zoll verification, normal variation fields.
//! 6. [`curve_flow`] — curve-shortening flow of embedded spherical curves.
//! 7. [`crofton`] — discrete spaces of geodesics with weights, the Crofton
//!    length functional and metric reconstruction.
//! 8. [`retraction`] — the deformation retraction of a balanced Zoll metric
//!    to the round metric through flowed geodesic families.

pub mod crofton;
pub mod curve_flow;
pub mod envelope;
pub mod finsler;
pub mod geodesics;
pub mod mahler;
pub mod retraction;
pub mod sphere;

pub use crofton::{GeodesicFamily, ReconstructionConfig};
pub use curve_flow::{FlowConfig, FlowState, FlowTrajectory};
pub use envelope::{BumpPerturbation, EnvelopingFamily};
pub use finsler::{Covector, FinslerMetric, LiouvilleSample};
pub use geodesics::{GeodesicRecord, PhaseState, ZollReport};
// TEMP pub use retraction::{RetractionResult, RetractionSchedule};
pub use sphere::{DomainAreaPair, SphereCurve, SpherePoint, TangentVector};
