//! Exact and discrete geometry on the canonical round two-sphere.
//!
//! Points are unit vectors in `R^3`, curves are geodesic polylines (nodes
//! joined by minor great-circle arcs) and every predicate reduces to vector
//! algebra in the ambient space: no charts, no trigonometric branch cuts.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Machine tolerance for unit-norm checks.
pub const UNIT_TOL: f64 = 1e-12;
/// Tolerance for tangency of vectors to the sphere.
pub const TANGENT_TOL: f64 = 1e-10;
/// Maximum allowed gap (radians) between consecutive curve nodes.
pub const MAX_NODE_GAP: f64 = 0.2;
/// Default incidence-angle floor below which a crossing is flagged as a
/// near-tangency instead of being counted.
pub const DEFAULT_ANGLE_FLOOR: f64 = 1e-3;

pub const TWO_PI: f64 = std::f64::consts::TAU;
pub const FOUR_PI: f64 = 2.0 * std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum SphereError {
    #[error("vector of norm {0:.3e} cannot be normalized to a sphere point")]
    ZeroVector(f64),
    #[error("vector is not unit: |v| - 1 = {0:.3e}")]
    NotUnit(f64),
    #[error("direction is not tangent: dir.base = {0:.3e}")]
    NotTangent(f64),
    #[error("curve needs at least {min} nodes, got {got}")]
    TooFewNodes { min: usize, got: usize },
    #[error("node gap {gap:.4} at index {index} exceeds {MAX_NODE_GAP}")]
    GapTooLarge { index: usize, gap: f64 },
    #[error("adjacent nodes at index {0} are antipodal")]
    AntipodalNodes(usize),
    #[error("orientation must be +1 or -1, got {0}")]
    BadOrientation(i8),
    #[error("curve is not closed")]
    NotClosed,
    #[error("curve is not simple: {count} self-intersections, first near ({x:.4}, {y:.4}, {z:.4})")]
    SelfIntersection { count: usize, x: f64, y: f64, z: f64 },
    #[error("indistinct curves")]
    IndistinctCurves,
    #[error("curve collapsed: length {0:.3e} below threshold")]
    CurveCollapsed(f64),
    #[error("no admissible fan center for area computation")]
    NoFanCenter,
}

/// A point of the unit two-sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    /// Wraps a vector that must already be unit to within [`UNIT_TOL`].
    pub fn new(v: Vec3) -> Result<Self, SphereError> {
        let err = (v.norm() - 1.0).abs();
        if err > UNIT_TOL {
            return Err(SphereError::NotUnit(err));
        }
        Ok(Self(v))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn project(v: Vec3) -> Result<Self, SphereError> {
        let n = v.norm();
        if n < 1e-14 {
            return Err(SphereError::ZeroVector(n));
        }
        Ok(Self(v / n))
    }

    pub fn coords(&self) -> Vec3 {
        self.0
    }

    pub fn antipode(&self) -> Self {
        Self(-self.0)
    }

    /// Deterministic orthonormal frame of the tangent plane: Gram-Schmidt of
    /// the coordinate axis with the smallest component against the base point.
    pub fn tangent_frame(&self) -> (Vec3, Vec3) {
        let a = self.0.map(f64::abs);
        let k = if a.x <= a.y && a.x <= a.z {
            0
        } else if a.y <= a.z {
            1
        } else {
            2
        };
        let mut axis = Vec3::zeros();
        axis[k] = 1.0;
        let e1 = (axis - self.0 * self.0[k]).normalize();
        let e2 = self.0.cross(&e1);
        (e1, e2)
    }

    /// Projects an ambient vector onto the tangent plane at this point.
    pub fn project_tangent(&self, v: Vec3) -> Vec3 {
        v - self.0 * self.0.dot(&v)
    }
}

/// Great-circle distance `arccos(p.q)` in `[0, pi]`.
pub fn geodesic_distance(p: &SpherePoint, q: &SpherePoint) -> f64 {
    p.coords().dot(&q.coords()).clamp(-1.0, 1.0).acos()
}

/// Walks from `x` along the tangent direction `dir` (need not be unit) by
/// `|dir|` radians of arc.
pub fn exp_map(x: &SpherePoint, dir: Vec3) -> SpherePoint {
    let t = x.project_tangent(dir);
    let n = t.norm();
    if n < 1e-300 {
        return *x;
    }
    SpherePoint::project(x.coords() * n.cos() + (t / n) * n.sin()).expect("exp_map norm")
}

/// A tangent vector with its base point.
#[derive(Debug, Clone, Copy)]
pub struct TangentVector {
    base: SpherePoint,
    dir: Vec3,
}

impl TangentVector {
    pub fn new(base: SpherePoint, dir: Vec3) -> Result<Self, SphereError> {
        let t = dir.dot(&base.coords()).abs();
        if t > TANGENT_TOL {
            return Err(SphereError::NotTangent(t));
        }
        Ok(Self { base, dir })
    }

    /// Projects out any normal component instead of rejecting it.
    pub fn projected(base: SpherePoint, dir: Vec3) -> Self {
        Self { base, dir: base.project_tangent(dir) }
    }

    pub fn base(&self) -> SpherePoint {
        self.base
    }

    pub fn dir(&self) -> Vec3 {
        self.dir
    }
}

/// Areas of the two domains bounded by a simple closed curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainAreaPair {
    pub left_area: f64,
    pub right_area: f64,
}

/// An oriented geodesic polyline on the sphere.
///
/// `orientation = -1` means the logical traversal runs against the stored
/// node order; all oriented queries (left domain, tangents) honor it.
#[derive(Debug, Clone)]
pub struct SphereCurve {
    nodes: Vec<SpherePoint>,
    closed: bool,
    orientation: i8,
}

/// Outcome of counting crossings between two polylines.
#[derive(Debug, Clone)]
pub struct IntersectionReport {
    /// Transverse crossings (incidence angle at or above the floor).
    pub crossings: usize,
    /// Crossings shallower than the floor, surfaced but never counted.
    pub near_tangencies: usize,
    /// Locations of the counted crossings.
    pub points: Vec<SpherePoint>,
}

impl SphereCurve {
    pub fn new(nodes: Vec<SpherePoint>, closed: bool, orientation: i8) -> Result<Self, SphereError> {
        if orientation != 1 && orientation != -1 {
            return Err(SphereError::BadOrientation(orientation));
        }
        let min = if closed { 16 } else { 2 };
        if nodes.len() < min {
            return Err(SphereError::TooFewNodes { min, got: nodes.len() });
        }
        let m = nodes.len();
        let last = if closed { m } else { m - 1 };
        for i in 0..last {
            let a = nodes[i].coords();
            let b = nodes[(i + 1) % m].coords();
            let dot = a.dot(&b).clamp(-1.0, 1.0);
            if dot < -0.99 {
                return Err(SphereError::AntipodalNodes(i));
            }
            let gap = dot.acos();
            if gap > MAX_NODE_GAP {
                return Err(SphereError::GapTooLarge { index: i, gap });
            }
        }
        Ok(Self { nodes, closed, orientation })
    }

    /// Samples a closed parametric curve at `n` uniform parameters and
    /// projects each sample to the sphere.
    pub fn from_closed_param(f: impl Fn(f64) -> Vec3, n: usize) -> Result<Self, SphereError> {
        let nodes = (0..n)
            .map(|i| SpherePoint::project(f(TWO_PI * i as f64 / n as f64)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(nodes, true, 1)
    }

    /// The great circle with the given pole, traversed counterclockwise
    /// around it (pole side on the left).
    pub fn great_circle(pole: &SpherePoint, n: usize) -> Result<Self, SphereError> {
        let (e1, e2) = pole.tangent_frame();
        // e1, e2 span the circle's plane; ccw order around the pole is
        // (e1 -> e2) when (e1, e2, pole) is right-handed, i.e. e1 x e2 = pole.
        Self::from_closed_param(|t| e1 * t.cos() + e2 * t.sin(), n)
    }

    /// Latitude circle at the given colatitude around `axis`, traversed so
    /// the cap containing `axis` lies on the left.
    pub fn latitude_circle(axis: &SpherePoint, colatitude: f64, n: usize) -> Result<Self, SphereError> {
        let (e1, e2) = axis.tangent_frame();
        let (s, c) = colatitude.sin_cos();
        Self::from_closed_param(|t| axis.coords() * c + (e1 * t.cos() + e2 * t.sin()) * s, n)
    }

    pub fn nodes(&self) -> &[SpherePoint] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn orientation(&self) -> i8 {
        self.orientation
    }

    pub fn reversed(&self) -> Self {
        Self { nodes: self.nodes.clone(), closed: self.closed, orientation: -self.orientation }
    }

    /// The curve with every node replaced by its antipode (same orientation
    /// bookkeeping; the antipodal map reverses the left domain).
    pub fn antipodal_image(&self) -> Self {
        Self {
            nodes: self.nodes.iter().map(SpherePoint::antipode).collect(),
            closed: self.closed,
            orientation: self.orientation,
        }
    }

    /// Number of arcs of the polyline.
    pub fn arc_count(&self) -> usize {
        if self.closed {
            self.nodes.len()
        } else {
            self.nodes.len() - 1
        }
    }

    /// Endpoints of arc `i` in stored node order.
    pub fn arc(&self, i: usize) -> (Vec3, Vec3) {
        let m = self.nodes.len();
        (self.nodes[i].coords(), self.nodes[(i + 1) % m].coords())
    }

    /// Total great-circle length of the polyline.
    pub fn length(&self) -> f64 {
        (0..self.arc_count())
            .map(|i| {
                let (a, b) = self.arc(i);
                a.dot(&b).clamp(-1.0, 1.0).acos()
            })
            .sum()
    }

    /// Effective unit tangent at node `i` (central difference, honoring the
    /// stored orientation).
    pub fn unit_tangent(&self, i: usize) -> Vec3 {
        let m = self.nodes.len();
        let x = self.nodes[i];
        let (prev, next) = if self.closed {
            (self.nodes[(i + m - 1) % m], self.nodes[(i + 1) % m])
        } else if i == 0 {
            (self.nodes[0], self.nodes[1])
        } else if i == m - 1 {
            (self.nodes[m - 2], self.nodes[m - 1])
        } else {
            (self.nodes[i - 1], self.nodes[i + 1])
        };
        let d = x.project_tangent(next.coords() - prev.coords());
        let t = d.normalize() * self.orientation as f64;
        t
    }

    /// Geodesic-curvature vector at node `i` of a closed curve: the curvature
    /// of the small circle through the node and its two neighbors, directed
    /// toward the circle's near pole. Independent of orientation.
    pub fn curvature_vector(&self, i: usize) -> Vec3 {
        let m = self.nodes.len();
        let a = self.nodes[(i + m - 1) % m].coords();
        let b = self.nodes[i].coords();
        let c = self.nodes[(i + 1) % m].coords();
        let n = (b - a).cross(&(c - b));
        let nn = n.norm();
        if nn < 1e-300 {
            return Vec3::zeros();
        }
        let u = n / nn;
        let cos_psi = u.dot(&b).clamp(-1.0, 1.0);
        let sin2 = 1.0 - cos_psi * cos_psi;
        if sin2 < 1e-24 {
            return Vec3::zeros();
        }
        (u - b * cos_psi) * (cos_psi / sin2)
    }

    /// Signed geodesic curvature at node `i`: positive when the curve bends
    /// toward its left side.
    pub fn signed_curvature(&self, i: usize) -> f64 {
        let kv = self.curvature_vector(i);
        let left = self.nodes[i].coords().cross(&self.unit_tangent(i));
        kv.dot(&left)
    }

    /// Largest |geodesic curvature| over the nodes of a closed curve.
    pub fn max_abs_curvature(&self) -> f64 {
        (0..self.nodes.len())
            .map(|i| self.curvature_vector(i).norm())
            .fold(0.0, f64::max)
    }

    /// Checks that no two non-adjacent arcs intersect.
    pub fn is_simple(&self) -> bool {
        self.self_intersections(8).is_empty()
    }

    /// Self-intersection points (up to `cap` reported).
    pub fn self_intersections(&self, cap: usize) -> Vec<SpherePoint> {
        let m = self.arc_count();
        let mids = self.arc_midpoints_and_radii();
        let mut found = Vec::new();
        for i in 0..m {
            for j in (i + 2)..m {
                if self.closed && i == 0 && j == m - 1 {
                    continue;
                }
                if !arcs_may_touch(&mids[i], &mids[j]) {
                    continue;
                }
                let (a1, a2) = self.arc(i);
                let (b1, b2) = self.arc(j);
                for p in arc_arc_intersections(a1, a2, b1, b2) {
                    found.push(SpherePoint::project(p).expect("intersection point"));
                    if found.len() >= cap {
                        return found;
                    }
                }
            }
        }
        found
    }

    fn arc_midpoints_and_radii(&self) -> Vec<(Vec3, f64)> {
        (0..self.arc_count())
            .map(|i| {
                let (a, b) = self.arc(i);
                let mid = (a + b).normalize();
                let r = a.dot(&b).clamp(-1.0, 1.0).acos() * 0.5;
                (mid, r)
            })
            .collect()
    }

    /// Distance from a point to the polyline (minimum over arcs).
    pub fn distance_to(&self, x: &SpherePoint) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.arc_count() {
            let (a, b) = self.arc(i);
            best = best.min(point_arc_distance(x.coords(), a, b));
        }
        best
    }
}

/// Midpoint/half-length prefilter: arcs can only touch if their midpoints
/// are within the sum of half-lengths (plus slack).
fn arcs_may_touch(a: &(Vec3, f64), b: &(Vec3, f64)) -> bool {
    let d = a.0.dot(&b.0).clamp(-1.0, 1.0).acos();
    d <= a.1 + b.1 + 1e-9
}

/// Intersection points of two minor great-circle arcs (0, 1 or 2 points;
/// coincident arcs report none).
pub fn arc_arc_intersections(a1: Vec3, a2: Vec3, b1: Vec3, b2: Vec3) -> Vec<Vec3> {
    let na = a1.cross(&a2);
    let nb = b1.cross(&b2);
    let t = na.cross(&nb);
    let tn = t.norm();
    let mut out = Vec::new();
    if tn < 1e-14 * na.norm() * nb.norm() {
        return out; // same great circle: no transverse crossing
    }
    let t = t / tn;
    for cand in [t, -t] {
        if point_in_wedge(cand, a1, a2, na) && point_in_wedge(cand, b1, b2, nb) {
            out.push(cand);
        }
    }
    out
}

/// Whether a point on the arc's great circle lies between the endpoints.
fn point_in_wedge(x: Vec3, a: Vec3, b: Vec3, n: Vec3) -> bool {
    let tol = -1e-12;
    a.cross(&x).dot(&n) >= tol * n.norm_squared() && x.cross(&b).dot(&n) >= tol * n.norm_squared()
}

/// Distance from a unit vector to a minor arc.
pub fn point_arc_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    let n = a.cross(&b);
    let nn = n.norm();
    if nn < 1e-300 {
        return x.dot(&a).clamp(-1.0, 1.0).acos();
    }
    let n = n / nn;
    let foot = x - n * x.dot(&n);
    let fn_ = foot.norm();
    if fn_ > 1e-300 {
        let f = foot / fn_;
        if point_in_wedge(f, a, b, a.cross(&b)) {
            return x.dot(&n).clamp(-1.0, 1.0).asin().abs();
        }
    }
    let da = x.dot(&a).clamp(-1.0, 1.0).acos();
    let db = x.dot(&b).clamp(-1.0, 1.0).acos();
    da.min(db)
}

/// Directed Hausdorff distance from the nodes of `a` to the polyline `b`.
pub fn directed_hausdorff(a: &SphereCurve, b: &SphereCurve) -> f64 {
    a.nodes().iter().map(|x| b.distance_to(x)).fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between two polylines.
pub fn hausdorff(a: &SphereCurve, b: &SphereCurve) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

/// Signed spherical excess of the triangle `(c, p, q)` via the van Oosterom
/// & Strackee solid-angle formula; positive when `(c, p, q)` is
/// counterclockwise seen from outside the sphere.
pub fn signed_excess(c: Vec3, p: Vec3, q: Vec3) -> f64 {
    let det = c.dot(&p.cross(&q));
    let denom = 1.0 + c.dot(&p) + p.dot(&q) + q.dot(&c);
    2.0 * det.atan2(denom)
}

/// Area of the domains on the left and right of a simple closed curve.
///
/// The curve is fanned into signed spherical triangles from a well-separated
/// center; the signed sum determines the left area modulo `4 pi`, so the
/// choice of center does not affect the result, only its conditioning.
pub fn enclosed_area(c: &SphereCurve) -> Result<DomainAreaPair, SphereError> {
    if !c.closed() {
        return Err(SphereError::NotClosed);
    }
    let hits = c.self_intersections(1);
    if let Some(p) = hits.first() {
        let v = p.coords();
        return Err(SphereError::SelfIntersection { count: hits.len(), x: v.x, y: v.y, z: v.z });
    }
    let center = fan_center(c)?;
    let s: f64 = (0..c.arc_count())
        .map(|i| {
            let (p, q) = c.arc(i);
            signed_excess(center, p, q)
        })
        .sum();
    let s = if c.orientation() >= 0 { s } else { -s };
    let left = if s > 0.0 { s } else { s + FOUR_PI };
    Ok(DomainAreaPair { left_area: left, right_area: FOUR_PI - left })
}

/// Picks a fan center with every node at least 0.2 rad away from its
/// antipode: the node centroid when well-defined, otherwise the smallest
/// principal axis of the node cloud (robust near great circles), otherwise
/// their antipodes.
fn fan_center(c: &SphereCurve) -> Result<Vec3, SphereError> {
    let n = c.len() as f64;
    let sum: Vec3 = c.nodes().iter().map(|p| p.coords()).sum();
    let mut candidates = Vec::new();
    if sum.norm() > 0.2 * n {
        candidates.push(sum.normalize());
    }
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    for p in c.nodes() {
        let v = p.coords();
        m += v * v.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let k = eig.eigenvalues.imin();
    let axis: Vec3 = eig.eigenvectors.column(k).into();
    candidates.push(axis);
    candidates.push(-axis);
    if let Some(first) = candidates.first() {
        candidates.push(-*first);
    }
    for cand in candidates {
        let worst = c
            .nodes()
            .iter()
            .map(|p| p.coords().dot(&cand).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max);
        if worst < std::f64::consts::PI - 0.2 {
            return Ok(cand);
        }
    }
    Err(SphereError::NoFanCenter)
}

/// Counts transverse crossings of two closed simple polylines. Crossings
/// with incidence angle below `angle_floor` are surfaced as near-tangencies
/// and never counted.
pub fn count_transverse_intersections(
    a: &SphereCurve,
    b: &SphereCurve,
    angle_floor: f64,
) -> Result<IntersectionReport, SphereError> {
    if a.len() == b.len() {
        let same = a
            .nodes()
            .iter()
            .zip(b.nodes())
            .all(|(p, q)| (p.coords() - q.coords()).norm() < 1e-12);
        if same {
            return Err(SphereError::IndistinctCurves);
        }
    }
    let mids_a = a.arc_midpoints_and_radii();
    let mids_b = b.arc_midpoints_and_radii();
    let mut raw: Vec<(Vec3, f64)> = Vec::new();
    for i in 0..a.arc_count() {
        for j in 0..b.arc_count() {
            if !arcs_may_touch(&mids_a[i], &mids_b[j]) {
                continue;
            }
            let (a1, a2) = a.arc(i);
            let (b1, b2) = b.arc(j);
            let na = a1.cross(&a2);
            let nb = b1.cross(&b2);
            for p in arc_arc_intersections(a1, a2, b1, b2) {
                let ta = na.cross(&p);
                let tb = nb.cross(&p);
                let cross = ta.cross(&tb).norm() / (ta.norm() * tb.norm());
                let angle = cross.clamp(-1.0, 1.0).asin();
                raw.push((p, angle));
            }
        }
    }
    // Cluster candidate points: a crossing exactly at a shared node is seen
    // by both adjacent arcs.
    let mut crossings = 0usize;
    let mut near_tangencies = 0usize;
    let mut points = Vec::new();
    let mut used = vec![false; raw.len()];
    for i in 0..raw.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let (p, mut angle) = raw[i];
        for j in (i + 1)..raw.len() {
            if !used[j] && (raw[j].0 - p).norm() < 1e-6 {
                used[j] = true;
                angle = angle.max(raw[j].1);
            }
        }
        if angle < angle_floor {
            near_tangencies += 1;
        } else {
            crossings += 1;
            points.push(SpherePoint::project(p).expect("crossing point"));
        }
    }
    Ok(IntersectionReport { crossings, near_tangencies, points })
}

/// Resamples a closed curve to `n_nodes` nodes at equal arclength spacing
/// along the polyline, keeping the initial point and orientation.
pub fn reparametrize_constant_speed(c: &SphereCurve, n_nodes: usize) -> Result<SphereCurve, SphereError> {
    let total = c.length();
    if total < 1e-6 {
        return Err(SphereError::CurveCollapsed(total));
    }
    let m = c.arc_count();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let (a, b) = c.arc(i);
        cum.push(cum[i] + a.dot(&b).clamp(-1.0, 1.0).acos());
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut seg = 0usize;
    for j in 0..n_nodes {
        let target = total * j as f64 / n_nodes as f64;
        while seg + 1 < m && cum[seg + 1] < target {
            seg += 1;
        }
        let (a, b) = c.arc(seg);
        let seg_len = cum[seg + 1] - cum[seg];
        let lambda = if seg_len > 1e-300 { (target - cum[seg]) / seg_len } else { 0.0 };
        nodes.push(SpherePoint::project(slerp(a, b, lambda.clamp(0.0, 1.0))).expect("slerp"));
    }
    SphereCurve::new(nodes, true, c.orientation())
}

/// Quasi-uniform point set on the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<SpherePoint> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let az = golden * i as f64;
            SpherePoint::project(Vec3::new(r * az.cos(), r * az.sin(), z)).expect("lattice point")
        })
        .collect()
}

/// Spherical linear interpolation between unit vectors (minor arc).
pub fn slerp(a: Vec3, b: Vec3, lambda: f64) -> Vec3 {
    let g = a.dot(&b).clamp(-1.0, 1.0).acos();
    if g < 1e-9 {
        return (a * (1.0 - lambda) + b * lambda).normalize();
    }
    (a * ((1.0 - lambda) * g).sin() + b * (lambda * g).sin()) / g.sin()
}

// -- serialization ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CurveRepr {
    nodes: Vec<[f64; 3]>,
    closed: bool,
    orientation: i8,
}

impl Serialize for SphereCurve {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        CurveRepr {
            nodes: self.nodes.iter().map(|p| p.coords().into()).collect(),
            closed: self.closed,
            orientation: self.orientation,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for SphereCurve {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = CurveRepr::deserialize(de)?;
        let nodes = repr
            .nodes
            .into_iter()
            .map(|v| SpherePoint::project(Vec3::new(v[0], v[1], v[2])))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        SphereCurve::new(nodes, repr.closed, repr.orientation).map_err(serde::de::Error::custom)
    }
}

impl Serialize for SpherePoint {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let v: [f64; 3] = self.coords().into();
        v.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for SpherePoint {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = <[f64; 3]>::deserialize(de)?;
        SpherePoint::project(Vec3::new(v[0], v[1], v[2])).map_err(serde::de::Error::custom)
    }
}
