//! The discrete space of geodesics with its measure, the Crofton length
//! functional, and metric reconstruction.
//!
//! A [`GeodesicFamily`] is a weighted list of simple closed curves with total
//! weight `4 pi`: the pushforward of the normalized contact volume to the
//! space of geodesics. Lengths are recovered as
//! `length(c) = 1/4 sum_i w_i #(gamma_i /\ c)`, and a metric is recovered by
//! probing short geodesic segments.
//!
//! Families built from a metric with a closed-geodesic fast path are
//! *structured*: members sit on a latitude/longitude lattice of great-circle
//! poles, weighted by the uniform pole-area measure (for metrics that are
//! round outside small disks, the geodesic-space measure is exactly the
//! round one in this chart, by the invariance of the action integral over
//! loops lying in the shared round region). Structured families admit a
//! sub-cell reconstruction estimator: the crossing region of a probe is
//! localized in the parameter lattice by signed side fields of the probe
//! endpoints and integrated cell by cell with linear clipping, which removes
//! the counting granularity of plain Monte-Carlo probes.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finsler::{FinslerMetric, MetricKernel, Provenance};
use crate::geodesics::{detect_closure, PhaseState};
use crate::sphere::{
    count_transverse_intersections, exp_map, geodesic_distance, SphereCurve, SpherePoint, Vec3,
    DEFAULT_ANGLE_FLOOR, FOUR_PI, TWO_PI,
};

#[derive(Debug, Error)]
pub enum CroftonError {
    #[error("family mass {0:.9} differs from 4 pi beyond 1e-9")]
    BadMass(f64),
    #[error("member {0} is not simple")]
    MemberNotSimple(usize),
    #[error("open geodesic encountered at sample {index}: residual {residual:.3e}")]
    NotZoll { index: usize, residual: f64 },
    #[error("non-generic incidence: curve shares an arc with member {0}")]
    NonGenericIncidence(usize),
    #[error("insufficient family density: {got} member crossings < {need}")]
    InsufficientDensity { got: usize, need: usize },
    #[error("probe half-length {0} outside [0.005, 0.05]")]
    BadProbe(f64),
    #[error("member count {0} below the configured minimum {1}")]
    TooFewMembers(usize, usize),
    #[error("weight vector length {0} does not match member count {1}")]
    WeightMismatch(usize, usize),
    #[error("interpolation parameter {0} outside [1, 2]")]
    BadTau(f64),
    #[error("family is not structured (no pole grid)")]
    NotStructured,
    #[error("members are not great circles (snap the family first)")]
    NotGreatCircles,
    #[error("geodesic error: {0}")]
    Geodesic(#[from] crate::geodesics::GeodesicError),
    #[error("sphere error: {0}")]
    Sphere(#[from] crate::sphere::SphereError),
}

/// Geometry of one family member: an explicit polyline, or an exact great
/// circle kept as its pole (materialized to a polyline on demand).
#[derive(Debug, Clone)]
pub enum MemberGeometry {
    Polyline(SphereCurve),
    GreatCircle(SpherePoint),
}

/// One weighted geodesic of the family.
#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub geometry: MemberGeometry,
    pub weight: f64,
    /// Stable id linking the member to its originating geodesic across flow
    /// checkpoints (for structured families, the lattice index).
    pub lineage: u64,
}

impl FamilyMember {
    /// Materializes the member as a polyline with at least `nodes` nodes.
    pub fn polyline(&self, nodes: usize) -> SphereCurve {
        match &self.geometry {
            MemberGeometry::Polyline(c) => c.clone(),
            MemberGeometry::GreatCircle(pole) => {
                SphereCurve::great_circle(pole, nodes.max(32)).expect("great circle member")
            }
        }
    }

    pub fn pole(&self) -> Option<SpherePoint> {
        match &self.geometry {
            MemberGeometry::GreatCircle(p) => Some(*p),
            MemberGeometry::Polyline(_) => None,
        }
    }

    /// Signed side of `y` relative to the member curve (positive on the
    /// left domain). For polylines the magnitude is the distance to the
    /// nearest arc; the sign is the domain indicator.
    pub fn signed_side(&self, y: &Vec3) -> f64 {
        match &self.geometry {
            MemberGeometry::GreatCircle(pole) => y.dot(&pole.coords()).clamp(-1.0, 1.0).asin(),
            MemberGeometry::Polyline(c) => {
                let mut best = f64::INFINITY;
                let mut side = 0.0;
                let m = c.arc_count();
                for i in 0..m {
                    let (a, b) = c.arc(i);
                    let d = crate::sphere::point_arc_distance(*y, a, b);
                    if d < best {
                        best = d;
                        let n = a.cross(&b);
                        side = y.dot(&n);
                    }
                }
                if c.orientation() < 0 {
                    side = -side;
                }
                best.copysign(side)
            }
        }
    }
}

/// Structured parametrization of a family: members on a `rows x cols`
/// latitude/longitude lattice of great-circle poles around `axis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoleGrid {
    pub axis: SpherePoint,
    pub rows: usize,
    pub cols: usize,
}

impl PoleGrid {
    pub fn colatitude(&self, row: usize) -> f64 {
        (row as f64 + 0.5) * std::f64::consts::PI / self.rows as f64
    }

    pub fn azimuth(&self, col: usize) -> f64 {
        col as f64 * TWO_PI / self.cols as f64
    }

    pub fn pole(&self, row: usize, col: usize) -> SpherePoint {
        let (e1, e2) = self.axis.tangent_frame();
        let theta = self.colatitude(row);
        let phi = self.azimuth(col);
        let dir = e1 * phi.cos() + e2 * phi.sin();
        SpherePoint::project(self.axis.coords() * theta.cos() + dir * theta.sin())
            .expect("grid pole")
    }

    /// Area of the lattice cell around node `(row, col)`.
    pub fn cell_area(&self, row: usize) -> f64 {
        let dtheta = std::f64::consts::PI / self.rows as f64;
        let dphi = TWO_PI / self.cols as f64;
        let theta = self.colatitude(row);
        2.0 * (dtheta / 2.0).sin() * theta.sin() * dphi
    }
}

/// Discrete model of the space of geodesics with its measure: weighted
/// simple closed curves of total weight `4 pi`.
#[derive(Debug, Clone)]
pub struct GeodesicFamily {
    pub members: Vec<FamilyMember>,
    pub total_mass: f64,
    pub grid: Option<PoleGrid>,
}

impl GeodesicFamily {
    /// Checks the mass budget and (for polyline members) simplicity.
    pub fn validate(&self) -> Result<(), CroftonError> {
        let mass: f64 = self.members.iter().map(|m| m.weight).sum();
        if (mass - FOUR_PI).abs() > 1e-9 {
            return Err(CroftonError::BadMass(mass));
        }
        let bad = self
            .members
            .par_iter()
            .enumerate()
            .find_any(|(_, m)| match &m.geometry {
                MemberGeometry::Polyline(c) => !c.closed() || !c.is_simple(),
                MemberGeometry::GreatCircle(_) => false,
            });
        if let Some((i, _)) = bad {
            return Err(CroftonError::MemberNotSimple(i));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Renormalizes the weights to total exactly `4 pi`.
    pub fn renormalize(&mut self) {
        let mass: f64 = self.members.iter().map(|m| m.weight).sum();
        let scale = FOUR_PI / mass;
        for m in &mut self.members {
            m.weight *= scale;
        }
        self.total_mass = FOUR_PI;
    }
}

// -- serialization ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MemberRepr {
    curve: SphereCurve,
    weight: f64,
    lineage: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    great_circle_pole: Option<SpherePoint>,
}

#[derive(Serialize, Deserialize)]
struct FamilyRepr {
    members: Vec<MemberRepr>,
    total_mass: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<PoleGrid>,
}

impl Serialize for GeodesicFamily {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let members = self
            .members
            .iter()
            .map(|m| MemberRepr {
                curve: m.polyline(64),
                weight: m.weight,
                lineage: m.lineage,
                great_circle_pole: m.pole(),
            })
            .collect();
        FamilyRepr { members, total_mass: self.total_mass, grid: self.grid.clone() }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for GeodesicFamily {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = FamilyRepr::deserialize(de)?;
        let members = repr
            .members
            .into_iter()
            .map(|m| FamilyMember {
                geometry: match m.great_circle_pole {
                    Some(pole) => MemberGeometry::GreatCircle(pole),
                    None => MemberGeometry::Polyline(m.curve),
                },
                weight: m.weight,
                lineage: m.lineage,
            })
            .collect();
        Ok(GeodesicFamily { members, total_mass: repr.total_mass, grid: repr.grid })
    }
}

// -- family construction -------------------------------------------------------

/// Builds the family of closed geodesics representing the geodesic-space
/// measure of a verified Zoll metric.
///
/// When the metric provides closed geodesics in closed form, members are
/// constructed on a structured pole lattice of about `n` points with the
/// uniform pole-area weights; otherwise `n` Liouville samples are integrated
/// to their orbits (equal weights `4 pi / n`, same-orbit samples merged).
pub fn family_from_metric(
    metric: &FinslerMetric,
    n: usize,
    seed: u64,
) -> Result<GeodesicFamily, CroftonError> {
    let probe_x = SpherePoint::new(Vec3::z()).expect("probe");
    let probe_v = Vec3::x();
    if metric.closed_geodesic_hook(&probe_x, &probe_v, 64).is_some() {
        structured_family(metric, n)
    } else {
        monte_carlo_family(metric, n, seed)
    }
}

/// Preferred lattice axis: the perturbation axis of enveloping metrics keeps
/// the hard probes (inside the disks) away from the lattice poles.
fn family_axis(metric: &FinslerMetric) -> SpherePoint {
    metric.preferred_axis().unwrap_or_else(|| SpherePoint::new(Vec3::z()).expect("axis"))
}

fn structured_family(metric: &FinslerMetric, n: usize) -> Result<GeodesicFamily, CroftonError> {
    let rows = ((n as f64 / 2.0).sqrt().floor() as usize).max(8);
    let cols = (n / rows).max(16);
    let grid = PoleGrid { axis: family_axis(metric), rows, cols };
    let round = metric.provenance() == Provenance::Round;
    let indices: Vec<(usize, usize)> =
        (0..rows).flat_map(|a| (0..cols).map(move |b| (a, b))).collect();
    let members: Vec<FamilyMember> = indices
        .par_iter()
        .map(|&(a, b)| {
            let pole = grid.pole(a, b);
            let geometry = if round {
                MemberGeometry::GreatCircle(pole)
            } else {
                // anchor on the great circle, heading along it
                let (e1, _) = pole.tangent_frame();
                let anchor = SpherePoint::project(e1).expect("anchor");
                let dir = pole.coords().cross(&e1);
                match metric.closed_geodesic_hook(&anchor, &dir, 256) {
                    Some(curve) => MemberGeometry::Polyline(curve),
                    None => MemberGeometry::GreatCircle(pole),
                }
            };
            FamilyMember { geometry, weight: grid.cell_area(a), lineage: (a * cols + b) as u64 }
        })
        .collect();
    let mut fam = GeodesicFamily { members, total_mass: FOUR_PI, grid: Some(grid) };
    fam.renormalize();
    Ok(fam)
}

fn monte_carlo_family(metric: &FinslerMetric, n: usize, seed: u64) -> Result<GeodesicFamily, CroftonError> {
    let covs = crate::finsler::sample_liouville_unit(metric, n, seed);
    let results: Vec<Result<SphereCurve, CroftonError>> = covs
        .par_iter()
        .enumerate()
        .map(|(index, xi)| {
            let state = PhaseState::new(metric, *xi)?;
            let rec = detect_closure(metric, &state, 3.0 * TWO_PI, 1e-3)?;
            match rec.period {
                Some(_) => Ok(rec.curve),
                None => Err(CroftonError::NotZoll { index, residual: rec.closure_residual }),
            }
        })
        .collect();
    let mut curves = Vec::with_capacity(n);
    for r in results {
        curves.push(r?);
    }
    // merge samples on the same orbit: identical fitted pole and area
    let fingerprints: Vec<(SpherePoint, f64)> = curves
        .iter()
        .map(|c| (fit_pole(c), crate::sphere::enclosed_area(c).map(|a| a.left_area).unwrap_or(0.0)))
        .collect();
    let w0 = FOUR_PI / n as f64;
    let mut members: Vec<FamilyMember> = Vec::new();
    let mut kept: Vec<(SpherePoint, f64)> = Vec::new();
    for (k, curve) in curves.into_iter().enumerate() {
        let fp = fingerprints[k];
        if let Some(j) = kept
            .iter()
            .position(|(p, a)| geodesic_distance(p, &fp.0) < 1e-6 && (a - fp.1).abs() < 1e-8)
        {
            members[j].weight += w0;
        } else {
            kept.push(fp);
            members.push(FamilyMember {
                geometry: MemberGeometry::Polyline(curve),
                weight: w0,
                lineage: k as u64,
            });
        }
    }
    let mut fam = GeodesicFamily { members, total_mass: FOUR_PI, grid: None };
    fam.renormalize();
    Ok(fam)
}

/// Best-fit oriented great-circle pole of a closed curve (smallest principal
/// axis of the node cloud, oriented along the traversal sense).
pub fn fit_pole(curve: &SphereCurve) -> SpherePoint {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    for p in curve.nodes() {
        let v = p.coords();
        m += v * v.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let k = eig.eigenvalues.imin();
    let mut axis: Vec3 = eig.eigenvectors.column(k).into();
    // orient with the traversal
    let n = curve.len();
    let mut sense = 0.0;
    for i in 0..n {
        let (a, b) = curve.arc(i);
        sense += a.cross(&b).dot(&axis);
    }
    if sense * (curve.orientation() as f64) < 0.0 {
        axis = -axis;
    }
    SpherePoint::project(axis).expect("fit pole")
}

/// Snap residual and replacement of every member by its best-fit great
/// circle; weights, lineage and the grid are preserved.
pub fn snap_to_great_circles(fam: &GeodesicFamily) -> Result<(GeodesicFamily, f64), CroftonError> {
    let mut worst: f64 = 0.0;
    let mut members = Vec::with_capacity(fam.members.len());
    for m in &fam.members {
        match &m.geometry {
            MemberGeometry::GreatCircle(p) => members.push(FamilyMember {
                geometry: MemberGeometry::GreatCircle(*p),
                weight: m.weight,
                lineage: m.lineage,
            }),
            MemberGeometry::Polyline(c) => {
                let pole = fit_pole(c);
                for node in c.nodes() {
                    worst = worst.max(node.coords().dot(&pole.coords()).asin().abs());
                }
                members.push(FamilyMember {
                    geometry: MemberGeometry::GreatCircle(pole),
                    weight: m.weight,
                    lineage: m.lineage,
                });
            }
        }
    }
    Ok((
        GeodesicFamily { members, total_mass: fam.total_mass, grid: fam.grid.clone() },
        worst,
    ))
}

// -- spatial index -------------------------------------------------------------

/// Buckets of member indices by sphere cell, for probe-local candidate
/// queries. Cells are a z-slice x azimuth grid; a member is listed in every
/// cell within `margin` of its curve.
pub struct MemberIndex {
    z_bins: usize,
    az_bins: usize,
    cells: Vec<Vec<u32>>,
    margin: f64,
}

impl MemberIndex {
    pub fn build(fam: &GeodesicFamily, margin: f64) -> Self {
        let z_bins = 24;
        let az_bins = 48;
        let mut cells = vec![Vec::new(); z_bins * az_bins];
        let cell_of = |v: &Vec3| -> (usize, usize) {
            let iz = (((v.z + 1.0) / 2.0 * z_bins as f64) as usize).min(z_bins - 1);
            let az = v.y.atan2(v.x).rem_euclid(TWO_PI);
            let ia = ((az / TWO_PI * az_bins as f64) as usize).min(az_bins - 1);
            (iz, ia)
        };
        // conservative rasterization: sample each member densely and mark a
        // neighborhood of cells around every sample
        let dz = 2.0 / z_bins as f64;
        let daz = TWO_PI / az_bins as f64;
        let z_pad = (margin / dz).ceil() as isize + 1;
        for (k, m) in fam.members.iter().enumerate() {
            let curve = m.polyline(128);
            let mut seen = vec![false; z_bins * az_bins];
            for node in curve.nodes() {
                let v = node.coords();
                let (iz, ia) = cell_of(&v);
                let lat_r = (1.0 - v.z * v.z).sqrt().max(0.2);
                let az_pad = (margin / (daz * lat_r)).ceil() as isize + 1;
                for diz in -z_pad..=z_pad {
                    let z = iz as isize + diz;
                    if z < 0 || z >= z_bins as isize {
                        continue;
                    }
                    for dia in -az_pad..=az_pad {
                        let a = (ia as isize + dia).rem_euclid(az_bins as isize);
                        let idx = z as usize * az_bins + a as usize;
                        if !seen[idx] {
                            seen[idx] = true;
                            cells[idx].push(k as u32);
                        }
                    }
                }
            }
        }
        Self { z_bins, az_bins, cells, margin }
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Member indices possibly within `margin` of `x`.
    pub fn near(&self, x: &SpherePoint) -> &[u32] {
        let v = x.coords();
        let iz = (((v.z + 1.0) / 2.0 * self.z_bins as f64) as usize).min(self.z_bins - 1);
        let az = v.y.atan2(v.x).rem_euclid(TWO_PI);
        let ia = ((az / TWO_PI * self.az_bins as f64) as usize).min(self.az_bins - 1);
        &self.cells[iz * self.az_bins + ia]
    }
}

// -- crossing counts and Crofton length ----------------------------------------

/// Crossing count of a member with a polyline, via plane-side sign changes
/// for great circles and arc-arc tests otherwise. Returns
/// `(crossings, near_tangencies)`.
fn member_crossings(member: &FamilyMember, c: &SphereCurve, index: usize) -> Result<(usize, usize), CroftonError> {
    match &member.geometry {
        MemberGeometry::GreatCircle(pole) => {
            let u = pole.coords();
            let n = c.len();
            let last = if c.closed() { n } else { n - 1 };
            let mut crossings = 0;
            let mut grazes = 0;
            for i in 0..last {
                let a = c.nodes()[i].coords().dot(&u);
                let b = c.nodes()[(i + 1) % n].coords().dot(&u);
                // a whole arc on the member's great circle is non-generic
                if a.abs() < 1e-12 && b.abs() < 1e-12 {
                    return Err(CroftonError::NonGenericIncidence(index));
                }
                if a.signum() != b.signum() && a != 0.0 {
                    if a.abs().min(b.abs()) < 1e-9 {
                        grazes += 1;
                    }
                    crossings += 1;
                }
            }
            Ok((crossings, grazes))
        }
        MemberGeometry::Polyline(curve) => {
            match count_transverse_intersections(curve, c, DEFAULT_ANGLE_FLOOR) {
                Ok(rep) => Ok((rep.crossings, rep.near_tangencies)),
                Err(crate::sphere::SphereError::IndistinctCurves) => {
                    Err(CroftonError::NonGenericIncidence(index))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

/// Result of a Crofton length evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct CroftonLength {
    pub length: f64,
    pub crossings: usize,
    pub near_tangencies: usize,
}

/// Crofton length of a curve against a family:
/// `1/4 sum_i w_i #(gamma_i /\ c)`, with near-tangencies surfaced but never
/// counted.
pub fn crofton_length(fam: &GeodesicFamily, c: &SphereCurve) -> Result<CroftonLength, CroftonError> {
    let partials: Vec<Result<(f64, usize, usize), CroftonError>> = fam
        .members
        .par_iter()
        .enumerate()
        .map(|(i, m)| member_crossings(m, c, i).map(|(k, g)| (m.weight * k as f64, k, g)))
        .collect();
    let mut length = 0.0;
    let mut crossings = 0;
    let mut grazes = 0;
    for p in partials {
        let (wk, k, g) = p?;
        length += wk;
        crossings += k;
        grazes += g;
    }
    Ok(CroftonLength { length: 0.25 * length, crossings, near_tangencies: grazes })
}

// -- reconstruction --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMode {
    DeterministicWeights,
    MonteCarlo,
}

/// Probe and density parameters of the reconstruction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Probe half-length (radians), in `[0.005, 0.05]`.
    pub probe_half_length: f64,
    pub min_members: usize,
    pub mode: ReconstructionMode,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            probe_half_length: 0.02,
            min_members: 1000,
            mode: ReconstructionMode::DeterministicWeights,
        }
    }
}

/// Short round-geodesic probe through `x` in direction `v` (open polyline).
pub fn probe_segment(x: &SpherePoint, v: &Vec3, eps: f64) -> SphereCurve {
    let dir = x.project_tangent(*v).normalize();
    let nodes: Vec<SpherePoint> = (0..=8)
        .map(|i| {
            let s = -eps + 2.0 * eps * i as f64 / 8.0;
            exp_map(x, dir * s)
        })
        .collect();
    SphereCurve::new(nodes, false, 1).expect("probe")
}

/// Shared internals of the reconstructed-metric kernels.
struct CroftonCore {
    fam: Arc<GeodesicFamily>,
    index: MemberIndex,
    eps: f64,
}

impl CroftonCore {
    /// Plain counting estimator: `crofton_length(probe) / (2 eps)`.
    fn counting_value(&self, x: &SpherePoint, dir: &Vec3) -> f64 {
        let probe = probe_segment(x, dir, self.eps);
        let mut mass = 0.0;
        for &k in self.index.near(x) {
            let m = &self.fam.members[k as usize];
            if let Ok((cross, _)) = member_crossings(m, &probe, k as usize) {
                mass += m.weight * cross as f64;
            }
        }
        0.25 * mass / (2.0 * self.eps)
    }

    /// Sub-cell estimator over the structured lattice: integrates the
    /// lattice measure of {members separating the probe endpoints} with
    /// linear clipping of the side fields in each cell.
    fn structured_value(&self, grid: &PoleGrid, x: &SpherePoint, dir: &Vec3) -> f64 {
        let a_end = exp_map(x, dir * (-self.eps)).coords();
        let b_end = exp_map(x, dir * self.eps).coords();
        let rows = grid.rows;
        let cols = grid.cols;
        let mut s_a = vec![f64::NAN; rows * cols];
        let mut s_b = vec![f64::NAN; rows * cols];
        let mut cells: Vec<u32> = Vec::new();
        for &k in self.index.near(x) {
            let m = &self.fam.members[k as usize];
            let idx = m.lineage as usize;
            s_a[idx] = m.signed_side(&a_end);
            s_b[idx] = m.signed_side(&b_end);
            // register the (up to) 4 cells having this node as a corner;
            // cells are keyed by their lower-left node (a, b), b wrapping
            let a0 = idx / cols;
            let b0 = idx % cols;
            for da in 0..2usize {
                if a0 < da || a0 - da + 1 >= rows {
                    continue;
                }
                for db in 0..2usize {
                    let b = (b0 + cols - db) % cols;
                    cells.push(((a0 - da) * cols + b) as u32);
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();

        // far members keep both endpoints strictly on one side
        let far = |v: f64| if v.is_nan() { 1.0 } else { v };
        let mut mass = 0.0;
        for &cell in &cells {
            let idx = cell as usize;
            let a0 = idx / cols;
            let b0 = idx % cols;
            let b1 = (b0 + 1) % cols;
            let c = [a0 * cols + b0, a0 * cols + b1, (a0 + 1) * cols + b0, (a0 + 1) * cols + b1];
            let sa = [far(s_a[c[0]]), far(s_a[c[1]]), far(s_a[c[2]]), far(s_a[c[3]])];
            let sb = [far(s_b[c[0]]), far(s_b[c[1]]), far(s_b[c[2]]), far(s_b[c[3]])];
            if sa.iter().zip(&sb).all(|(p, q)| p * q > 0.0) {
                continue;
            }
            let frac = crossing_fraction(&sa, &sb);
            if frac > 0.0 {
                let w = 0.25
                    * (self.fam.members[c[0]].weight
                        + self.fam.members[c[1]].weight
                        + self.fam.members[c[2]].weight
                        + self.fam.members[c[3]].weight);
                mass += frac * w;
            }
        }
        0.25 * mass / (2.0 * self.eps)
    }
}

/// Fraction of the unit cell where the bilinear side fields separate the
/// probe endpoints (`s_a` and `s_b` of opposite signs), with the fields
/// treated as linear: the region is clipped by two half-planes.
fn crossing_fraction(sa: &[f64; 4], sb: &[f64; 4]) -> f64 {
    // corners in (u, v) order: (0,0), (1,0), (0,1), (1,1)
    let area1 = clipped_area(sa, 1.0, sb, -1.0);
    let area2 = clipped_area(sa, -1.0, sb, 1.0);
    (area1 + area2).clamp(0.0, 1.0)
}

/// Area of {p : sign1 * A(p) > 0 and sign2 * B(p) > 0} in the unit square,
/// with `A`, `B` the bilinear interpolants of the corner values (clipped as
/// if linear).
fn clipped_area(a: &[f64; 4], sign1: f64, b: &[f64; 4], sign2: f64) -> f64 {
    let mut poly: Vec<(f64, f64)> = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let corner_vals = |c: &[f64; 4], p: (f64, f64)| -> f64 {
        // bilinear interpolation from corners ordered (0,0),(1,0),(0,1),(1,1)
        let (u, v) = p;
        c[0] * (1.0 - u) * (1.0 - v) + c[1] * u * (1.0 - v) + c[2] * (1.0 - u) * v + c[3] * u * v
    };
    for (c, s) in [(a, sign1), (b, sign2)] {
        let mut next: Vec<(f64, f64)> = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let p = poly[i];
            let q = poly[(i + 1) % poly.len()];
            let fp = s * corner_vals(c, p);
            let fq = s * corner_vals(c, q);
            if fp >= 0.0 {
                next.push(p);
            }
            if (fp > 0.0 && fq < 0.0) || (fp < 0.0 && fq > 0.0) {
                let t = fp / (fp - fq);
                next.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
        poly = next;
        if poly.len() < 3 {
            return 0.0;
        }
    }
    // shoelace
    let mut area = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        area += p.0 * q.1 - q.0 * p.1;
    }
    0.5 * area.abs()
}

/// Metric kernel evaluating the Crofton probe formula against a family.
struct CroftonMetricKernel {
    core: CroftonCore,
    structured: bool,
}

impl MetricKernel for CroftonMetricKernel {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        let vt = x.project_tangent(*v);
        let n = vt.norm();
        if n < 1e-300 {
            return 0.0;
        }
        let dir = vt / n;
        let val = if self.structured {
            let grid = self.core.fam.grid.as_ref().expect("structured grid");
            self.core.structured_value(grid, x, &dir)
        } else {
            self.core.counting_value(x, &dir)
        };
        val * n
    }

    fn provenance(&self) -> Provenance {
        Provenance::CroftonReconstructed
    }

    fn smoothness_scale(&self) -> f64 {
        0.1
    }
}

/// Reconstructs the unique Finsler metric with the family's Crofton lengths:
/// `F(x, v) = crofton_length(probe through x along v) / (2 eps) * |v|`.
/// Structured families use the sub-cell lattice estimator; plain families
/// use Monte-Carlo probe counting (after a density audit).
pub fn reconstruct_metric(
    fam: &GeodesicFamily,
    cfg: &ReconstructionConfig,
) -> Result<FinslerMetric, CroftonError> {
    if !(0.005..=0.05).contains(&cfg.probe_half_length) {
        return Err(CroftonError::BadProbe(cfg.probe_half_length));
    }
    if fam.len() < cfg.min_members {
        return Err(CroftonError::TooFewMembers(fam.len(), cfg.min_members));
    }
    let structured = matches!(cfg.mode, ReconstructionMode::DeterministicWeights);
    if structured && fam.grid.is_none() {
        return Err(CroftonError::NotStructured);
    }
    let margin = 4.0 * cfg.probe_half_length + 0.25;
    let index = MemberIndex::build(fam, margin);
    let core = CroftonCore { fam: Arc::new(fam.clone()), index, eps: cfg.probe_half_length };

    if !structured {
        // density audit: every probe must see enough члены crossings
        let probes = crate::sphere::fibonacci_sphere(16);
        for x in &probes {
            let (e1, _) = x.tangent_frame();
            let probe = probe_segment(x, &e1, cfg.probe_half_length);
            let mut crossings = 0;
            for &k in core.index.near(x) {
                let m = &core.fam.members[k as usize];
                crossings += member_crossings(m, &probe, k as usize).map(|(c, _)| c).unwrap_or(0);
            }
            if crossings < 50 {
                return Err(CroftonError::InsufficientDensity { got: crossings, need: 50 });
            }
        }
    }
    Ok(FinslerMetric::new(CroftonMetricKernel { core, structured }))
}

/// Interpolates the family measure toward the round weights on the same
/// members: `w(tau) = (2 - tau) w(1) + (tau - 1) w_round`.
pub fn interpolate_measure(
    fam: &GeodesicFamily,
    round_weights: &[f64],
    tau: f64,
) -> Result<GeodesicFamily, CroftonError> {
    if !(1.0..=2.0).contains(&tau) {
        return Err(CroftonError::BadTau(tau));
    }
    if round_weights.len() != fam.members.len() {
        return Err(CroftonError::WeightMismatch(round_weights.len(), fam.members.len()));
    }
    let members = fam
        .members
        .iter()
        .zip(round_weights)
        .map(|(m, &wr)| FamilyMember {
            geometry: m.geometry.clone(),
            weight: (2.0 - tau) * m.weight + (tau - 1.0) * wr,
            lineage: m.lineage,
        })
        .collect();
    Ok(GeodesicFamily { members, total_mass: fam.total_mass, grid: fam.grid.clone() })
}

/// Round weights restated on a snapped great-circle family: the uniform
/// pole-area measure quadrature over the member poles, by kernel-normalized
/// cell masses (reciprocal kernel density), renormalized to `4 pi`.
pub fn round_weights(fam: &GeodesicFamily) -> Result<Vec<f64>, CroftonError> {
    let poles: Vec<SpherePoint> = fam
        .members
        .iter()
        .map(|m| m.pole().ok_or(CroftonError::NotGreatCircles))
        .collect::<Result<_, _>>()?;
    let n = poles.len();
    let spacing = (FOUR_PI / n as f64).sqrt();
    let h = 2.5 * spacing;
    let density: Vec<f64> = poles
        .par_iter()
        .map(|p| {
            let mut d = 0.0;
            for q in &poles {
                let t = geodesic_distance(p, q) / h;
                if t < 1.0 {
                    let w = 1.0 - t * t;
                    d += w * w * w;
                }
            }
            d
        })
        .collect();
    let mut weights: Vec<f64> = density.iter().map(|d| 1.0 / d).collect();
    let mass: f64 = weights.iter().sum();
    for w in &mut weights {
        *w *= FOUR_PI / mass;
    }
    Ok(weights)
}

// -- tabulated wrapper ----------------------------------------------------------

/// Smooth, fast interpolant of a metric: fiber Fourier series (even
/// harmonics) at lattice base points, blended with compact smooth weights
/// after parallel transport. Used to drive geodesic integration of
/// reconstructed metrics.
pub struct TabulatedMetric {
    nodes: Vec<SpherePoint>,
    frames: Vec<(Vec3, Vec3)>,
    norm_coef: Vec<Vec<(f64, f64)>>,
    dual_coef: Vec<Vec<(f64, f64)>>,
    blend_radius: f64,
    cell_index: Vec<Vec<u32>>,
    z_bins: usize,
    az_bins: usize,
    smoothness: f64,
}

const TAB_HARMONICS: usize = 8;

impl TabulatedMetric {
    pub fn build(metric: &FinslerMetric, node_count: usize) -> Self {
        let nodes = crate::sphere::fibonacci_sphere(node_count);
        let spacing = (FOUR_PI / node_count as f64).sqrt();
        let blend_radius = 1.6 * spacing;
        let samples = 64usize;
        let data: Vec<((Vec3, Vec3), (Vec<(f64, f64)>, Vec<(f64, f64)>))> = nodes
            .par_iter()
            .map(|x| {
                let frame = x.tangent_frame();
                let (e1, e2) = frame;
                let vals: Vec<f64> = (0..samples)
                    .map(|i| {
                        let phi = TWO_PI * i as f64 / samples as f64;
                        metric.eval(x, &(e1 * phi.cos() + e2 * phi.sin()))
                    })
                    .collect();
                // dual norm over the same sampled fiber
                let duals: Vec<f64> = (0..samples)
                    .map(|i| {
                        let theta = TWO_PI * i as f64 / samples as f64;
                        let om = (theta.cos(), theta.sin());
                        (0..samples)
                            .map(|j| {
                                let phi = TWO_PI * j as f64 / samples as f64;
                                (om.0 * phi.cos() + om.1 * phi.sin()) / vals[j]
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                (frame, (fourier_even(&vals, TAB_HARMONICS), fourier_even(&duals, TAB_HARMONICS)))
            })
            .collect();
        let mut frames = Vec::with_capacity(node_count);
        let mut norm_coef = Vec::with_capacity(node_count);
        let mut dual_coef = Vec::with_capacity(node_count);
        for (f, (nc, dc)) in data {
            frames.push(f);
            norm_coef.push(nc);
            dual_coef.push(dc);
        }
        // cell index over nodes
        let z_bins = 24;
        let az_bins = 48;
        let mut cell_index = vec![Vec::new(); z_bins * az_bins];
        for (k, p) in nodes.iter().enumerate() {
            let v = p.coords();
            let iz = (((v.z + 1.0) / 2.0 * z_bins as f64) as usize).min(z_bins - 1);
            let az = v.y.atan2(v.x).rem_euclid(TWO_PI);
            let ia = ((az / TWO_PI * az_bins as f64) as usize).min(az_bins - 1);
            // mark a city-block neighborhood to cover the blend radius
            let dz = 2.0 / z_bins as f64;
            let z_pad = (blend_radius / dz).ceil() as isize + 1;
            for diz in -z_pad..=z_pad {
                let z = iz as isize + diz;
                if z < 0 || z >= z_bins as isize {
                    continue;
                }
                let zc = -1.0 + (z as f64 + 0.5) * dz;
                let lat_r = (1.0 - zc * zc).sqrt().max(0.15);
                let daz = TWO_PI / az_bins as f64;
                let az_pad = (blend_radius / (daz * lat_r)).ceil() as isize + 1;
                for dia in -az_pad..=az_pad {
                    let a = (ia as isize + dia).rem_euclid(az_bins as isize);
                    cell_index[z as usize * az_bins + a as usize].push(k as u32);
                }
            }
        }
        Self {
            nodes,
            frames,
            norm_coef,
            dual_coef,
            blend_radius,
            cell_index,
            z_bins,
            az_bins,
            smoothness: spacing,
        }
    }

    fn candidates(&self, x: &SpherePoint) -> &[u32] {
        let v = x.coords();
        let iz = (((v.z + 1.0) / 2.0 * self.z_bins as f64) as usize).min(self.z_bins - 1);
        let az = v.y.atan2(v.x).rem_euclid(TWO_PI);
        let ia = ((az / TWO_PI * self.az_bins as f64) as usize).min(self.az_bins - 1);
        &self.cell_index[iz * self.az_bins + ia]
    }

    fn blend(&self, x: &SpherePoint, v: &Vec3, coef: &[Vec<(f64, f64)>]) -> f64 {
        let vn = v.norm();
        if vn < 1e-300 {
            return 0.0;
        }
        let dir = v / vn;
        let mut total_w = 0.0;
        let mut total = 0.0;
        for &k in self.candidates(x) {
            let node = &self.nodes[k as usize];
            let d = geodesic_distance(x, node);
            if d >= self.blend_radius {
                continue;
            }
            let t = d / self.blend_radius;
            let w = (1.0 - t * t).powi(3);
            // parallel-transport dir from x to the node
            let transported = transport(x, node, &dir);
            let (e1, e2) = self.frames[k as usize];
            let phi = transported.dot(&e2).atan2(transported.dot(&e1));
            total += w * fourier_eval(&coef[k as usize], phi);
            total_w += w;
        }
        if total_w <= 0.0 {
            // isolated fallback: nearest node
            let mut best = (f64::INFINITY, 0usize);
            for (k, node) in self.nodes.iter().enumerate() {
                let d = geodesic_distance(x, node);
                if d < best.0 {
                    best = (d, k);
                }
            }
            let transported = transport(x, &self.nodes[best.1], &dir);
            let (e1, e2) = self.frames[best.1];
            let phi = transported.dot(&e2).atan2(transported.dot(&e1));
            return fourier_eval(&coef[best.1], phi) * vn;
        }
        total / total_w * vn
    }
}

/// Rotates `v` (tangent at `from`) to the tangent plane at `to` about their
/// common axis.
fn transport(from: &SpherePoint, to: &SpherePoint, v: &Vec3) -> Vec3 {
    let a = from.coords();
    let b = to.coords();
    let axis = a.cross(&b);
    let s = axis.norm();
    if s < 1e-14 {
        return *v;
    }
    let axis = axis / s;
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    // Rodrigues rotation by the angle between a and b
    v * cos + axis.cross(v) * s + axis * (axis.dot(v)) * (1.0 - cos)
}

/// Even-harmonic Fourier coefficients `(a_k, b_k)` of `pi`-periodic fiber
/// samples: `f(phi) = a_0 + sum a_k cos(2k phi) + b_k sin(2k phi)`.
fn fourier_even(vals: &[f64], harmonics: usize) -> Vec<(f64, f64)> {
    let n = vals.len() as f64;
    let mut out = Vec::with_capacity(harmonics + 1);
    let mean = vals.iter().sum::<f64>() / n;
    out.push((mean, 0.0));
    for k in 1..=harmonics {
        let mut a = 0.0;
        let mut b = 0.0;
        for (j, &v) in vals.iter().enumerate() {
            let phi = TWO_PI * j as f64 / n;
            a += v * (2.0 * k as f64 * phi).cos();
            b += v * (2.0 * k as f64 * phi).sin();
        }
        out.push((2.0 * a / n, 2.0 * b / n));
    }
    out
}

fn fourier_eval(coef: &[(f64, f64)], phi: f64) -> f64 {
    let mut v = coef[0].0;
    for (k, &(a, b)) in coef.iter().enumerate().skip(1) {
        let arg = 2.0 * k as f64 * phi;
        v += a * arg.cos() + b * arg.sin();
    }
    v
}

impl MetricKernel for TabulatedMetric {
    fn eval(&self, x: &SpherePoint, v: &Vec3) -> f64 {
        self.blend(x, &x.project_tangent(*v), &self.norm_coef)
    }

    fn provenance(&self) -> Provenance {
        Provenance::CroftonReconstructed
    }

    fn smoothness_scale(&self) -> f64 {
        self.smoothness
    }

    fn dual_norm_hook(&self, x: &SpherePoint, xi: &Vec3) -> Option<f64> {
        Some(self.blend(x, &x.project_tangent(*xi), &self.dual_coef))
    }
}

/// Tabulates a metric into the smooth fast interpolant.
pub fn tabulate_metric(metric: &FinslerMetric, node_count: usize) -> FinslerMetric {
    FinslerMetric::new(TabulatedMetric::build(metric, node_count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{build_metric, EnvelopingFamily};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn round_family(n: usize) -> GeodesicFamily {
        family_from_metric(&FinslerMetric::round(), n, 1).unwrap()
    }

    #[test]
    fn structured_round_family_has_exact_mass() {
        let fam = round_family(2048);
        fam.validate().unwrap();
        assert!(fam.grid.is_some());
        let mass: f64 = fam.members.iter().map(|m| m.weight).sum();
        assert_abs_diff_eq!(mass, FOUR_PI, epsilon = 1e-9);
        assert!(fam.members.iter().all(|m| m.pole().is_some()));
    }

    #[test]
    fn crofton_length_of_equator_and_latitudes() {
        let fam = round_family(20_000);
        let ez = SpherePoint::new(Vec3::z()).unwrap();
        // the equator itself is a member direction: probe a tilted equator
        let pole = SpherePoint::project(Vec3::new(0.3, 0.2, 0.93)).unwrap();
        let eq = SphereCurve::great_circle(&pole, 512).unwrap();
        let got = crofton_length(&fam, &eq).unwrap();
        assert!(
            (got.length - TWO_PI).abs() / TWO_PI < 0.01,
            "equator length {:.5}",
            got.length
        );
        for colat in [0.5, 1.0, 1.3] {
            let c = SphereCurve::latitude_circle(&ez, colat, 512).unwrap();
            let got = crofton_length(&fam, &c).unwrap();
            let expect = TWO_PI * colat.sin();
            assert!(
                (got.length - expect).abs() / expect < 0.02,
                "latitude {colat}: {:.5} vs {expect:.5}",
                got.length
            );
        }
    }

    #[test]
    fn crofton_additivity_and_subdivision() {
        let fam = round_family(20_000);
        let curve = SphereCurve::from_closed_param(
            |t| {
                let z = 0.3 * (2.0 * t).sin();
                let r = (1.0 - z * z).sqrt();
                Vec3::new(r * t.cos(), r * t.sin(), z)
            },
            256,
        )
        .unwrap();
        let whole = crofton_length(&fam, &curve).unwrap().length;

        // split into two halves (open polylines)
        let nodes = curve.nodes();
        let half1 = SphereCurve::new(nodes[..129].to_vec(), false, 1).unwrap();
        let mut tail = nodes[128..].to_vec();
        tail.push(nodes[0]);
        let half2 = SphereCurve::new(tail, false, 1).unwrap();
        let a = crofton_length(&fam, &half1).unwrap().length;
        let b = crofton_length(&fam, &half2).unwrap().length;
        assert!((a + b - whole).abs() / whole < 0.01, "additivity {:.5} vs {whole:.5}", a + b);

        // doubling the node count barely moves the estimate
        let fine = crate::sphere::reparametrize_constant_speed(&curve, 512).unwrap();
        let fine_len = crofton_length(&fam, &fine).unwrap().length;
        assert!((fine_len - whole).abs() / whole < 0.005);
    }

    #[test]
    fn member_length_by_pair_counting() {
        // a member against the rest of its family: every pair crosses
        // exactly twice, so the length is 2 pi (1 - 1/n) exactly
        let fam = round_family(512);
        let target = fam.members[100].polyline(256);
        let rest = GeodesicFamily {
            members: fam
                .members
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 100)
                .map(|(_, m)| m.clone())
                .collect(),
            total_mass: fam.total_mass,
            grid: None,
        };
        let got = crofton_length(&rest, &target).unwrap();
        let expect = TWO_PI * (1.0 - 1.0 / fam.members.len() as f64);
        assert!(
            (got.length - expect).abs() / expect < 0.02,
            "member length {:.5} vs {expect:.5}",
            got.length
        );
    }

    #[test]
    fn non_generic_incidence_detected() {
        let fam = round_family(512);
        // the exact great circle of some member shares every arc with it
        let pole = fam.members[7].pole().unwrap();
        let clone = SphereCurve::great_circle(&pole, 256).unwrap();
        assert!(matches!(
            crofton_length(&fam, &clone),
            Err(CroftonError::NonGenericIncidence(_))
        ));
    }

    #[test]
    fn round_reconstruction_is_tight() {
        let fam = round_family(4096);
        let metric = reconstruct_metric(&fam, &ReconstructionConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let phi: f64 = rng.random_range(0.0..TWO_PI);
            let v = e1 * phi.cos() + e2 * phi.sin();
            worst = worst.max((metric.eval(&x, &v) - 1.0).abs());
        }
        assert!(worst < 0.01, "sup error vs round {worst:.4}");
    }

    #[test]
    fn reconstruction_is_even_and_homogeneous() {
        let fam = round_family(4096);
        let metric = reconstruct_metric(&fam, &ReconstructionConfig::default()).unwrap();
        let x = SpherePoint::project(Vec3::new(0.3, -0.5, 0.8)).unwrap();
        let (e1, e2) = x.tangent_frame();
        let v = e1 * 0.7 + e2 * 0.3;
        let f = metric.eval(&x, &v);
        assert_eq!(metric.eval(&x, &(-v)), f);
        assert_abs_diff_eq!(metric.eval(&x, &(v * 3.0)), 3.0 * f, epsilon = 1e-12);
    }

    #[test]
    fn enveloping_round_trip_reconstruction() {
        let center = SpherePoint::new(Vec3::z()).unwrap();
        let fam_env = EnvelopingFamily::single_bump(center, 0.03).unwrap().make_antipodal();
        let metric = build_metric(&fam_env).unwrap();
        let family = family_from_metric(&metric, 4096, 2).unwrap();
        family.validate().unwrap();
        let rec = reconstruct_metric(&family, &ReconstructionConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..120 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let phi: f64 = rng.random_range(0.0..TWO_PI);
            let v = e1 * phi.cos() + e2 * phi.sin();
            let truth = metric.eval(&x, &v);
            let got = rec.eval(&x, &v);
            worst = worst.max((got - truth).abs() / truth);
        }
        assert!(worst < 0.03, "round trip sup-relative error {worst:.4}");
    }

    #[test]
    fn monte_carlo_mode_density_audit() {
        // a sparse family cannot feed the counting estimator
        let fam = round_family(512);
        let cfg = ReconstructionConfig {
            mode: ReconstructionMode::MonteCarlo,
            min_members: 100,
            ..Default::default()
        };
        assert!(matches!(
            reconstruct_metric(&fam, &cfg),
            Err(CroftonError::InsufficientDensity { .. })
        ));
    }

    #[test]
    fn measure_interpolation_endpoints() {
        let fam = round_family(512);
        let (snapped, residual) = snap_to_great_circles(&fam).unwrap();
        assert!(residual < 1e-12);
        let target = round_weights(&snapped).unwrap();
        let at1 = interpolate_measure(&snapped, &target, 1.0).unwrap();
        for (m, o) in at1.members.iter().zip(&snapped.members) {
            assert_abs_diff_eq!(m.weight, o.weight, epsilon = 1e-15);
        }
        let at2 = interpolate_measure(&snapped, &target, 2.0).unwrap();
        for (m, &w) in at2.members.iter().zip(&target) {
            assert_abs_diff_eq!(m.weight, w, epsilon = 1e-15);
        }
        let mid = interpolate_measure(&snapped, &target, 1.5).unwrap();
        for ((m, o), &w) in mid.members.iter().zip(&snapped.members).zip(&target) {
            assert_abs_diff_eq!(m.weight, 0.5 * (o.weight + w), epsilon = 1e-15);
        }
        let mass: f64 = mid.members.iter().map(|m| m.weight).sum();
        assert_abs_diff_eq!(mass, FOUR_PI, epsilon = 1e-9);
    }

    #[test]
    fn round_weights_reproduce_uniform_lattice() {
        let fam = round_family(2048);
        let (snapped, _) = snap_to_great_circles(&fam).unwrap();
        let w = round_weights(&snapped).unwrap();
        // on the uniform lattice the kernel weights match the cell areas
        for (wi, m) in w.iter().zip(&snapped.members) {
            assert!(
                (wi - m.weight).abs() / m.weight < 0.2,
                "kde weight {wi:.5e} vs cell {:.5e}",
                m.weight
            );
        }
        let lengths_ok = {
            let interp = interpolate_measure(&snapped, &w, 2.0).unwrap();
            let pole = SpherePoint::project(Vec3::new(0.1, 0.9, 0.4)).unwrap();
            let c = SphereCurve::great_circle(&pole, 256).unwrap();
            let l = crofton_length(&interp, &c).unwrap().length;
            (l - TWO_PI).abs() / TWO_PI < 0.02
        };
        assert!(lengths_ok);
    }

    #[test]
    fn family_serialization_round_trip() {
        let fam = round_family(512);
        let js = serde_json::to_string(&fam).unwrap();
        assert!(js.contains("total_mass"));
        let back: GeodesicFamily = serde_json::from_str(&js).unwrap();
        back.validate().unwrap();
        assert_eq!(back.len(), fam.len());
        assert!(back.grid.is_some());
    }

    #[test]
    fn tabulated_metric_matches_source() {
        let center = SpherePoint::new(Vec3::z()).unwrap();
        let fam_env = EnvelopingFamily::single_bump(center, 0.03).unwrap();
        let metric = build_metric(&fam_env).unwrap();
        let tab = tabulate_metric(&metric, 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        let mut worst_dual: f64 = 0.0;
        for _ in 0..300 {
            let x = crate::finsler::random_sphere_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let phi: f64 = rng.random_range(0.0..TWO_PI);
            let v = e1 * phi.cos() + e2 * phi.sin();
            worst = worst.max((tab.eval(&x, &v) - metric.eval(&x, &v)).abs() / metric.eval(&x, &v));
            let fs = metric.dual_norm_fast(&x, &v);
            let fs_tab = tab.dual_norm_fast(&x, &v);
            worst_dual = worst_dual.max((fs_tab - fs).abs() / fs);
        }
        assert!(worst < 5e-3, "tabulated sup-relative error {worst:.2e}");
        assert!(worst_dual < 5e-3, "tabulated dual error {worst_dual:.2e}");
    }
}
