//! Curve-shortening flow of embedded curves on the round sphere.
//!
//! Explicit node-based stepping of `d gamma / dt = kappa n` with arclength
//! redistribution, on-sphere reprojection, and the parabolic step bound
//! `dt = safety * (min gap)^2`. Curves keep their node spacing as they
//! shrink by coarsening the node count (never below 64), which keeps
//! extinction reachable in bounded work.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::sphere::{
    count_transverse_intersections, enclosed_area, reparametrize_constant_speed, DomainAreaPair,
    SphereCurve, SpherePoint, Vec3, DEFAULT_ANGLE_FLOOR, TWO_PI,
};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("initial curve is not simple")]
    NotSimple,
    #[error("embeddedness lost at t = {t:.4} near ({x:.4}, {y:.4}, {z:.4})")]
    EmbeddednessLost { t: f64, x: f64, y: f64, z: f64 },
    #[error("balanced family member {index} went extinct at t = {t:.4}")]
    BalancedMemberExtinct { index: usize, t: f64 },
    #[error("area law degenerate: |D_0| = {0:.6} is balanced within tolerance")]
    AreaLawDegenerate(f64),
    #[error("curve error: {0}")]
    Sphere(#[from] crate::sphere::SphereError),
}

/// Stepping and stopping parameters of the flow.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowConfig {
    /// Working node count at the initial length (floor 64 as curves shrink).
    pub nodes: usize,
    /// Parabolic step safety factor, at most 0.5.
    pub safety: f64,
    /// Steps between arclength redistributions.
    pub redistribution_cadence: usize,
    /// Curvature threshold of the equator stopping test.
    pub kappa_tol: f64,
    /// Length tolerance of the equator stopping test.
    pub length_tol: f64,
    /// Hard time limit.
    pub t_max: f64,
    /// Flow-time interval between recorded states.
    pub record_dt: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            nodes: 512,
            safety: 0.4,
            redistribution_cadence: 10,
            kappa_tol: 1e-3,
            length_tol: 1e-3,
            t_max: 20.0,
            record_dt: 5e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        assert!(self.nodes >= 64, "node count must be at least 64");
        assert!(self.safety <= 0.5 && self.safety > 0.0, "safety factor in (0, 0.5]");
        Ok(())
    }
}

/// Length below which a curve is declared extinct rather than resolved.
pub const EXTINCTION_LENGTH: f64 = 0.05;

/// A recorded snapshot of the flow.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub curve: SphereCurve,
    pub t: f64,
    pub length: f64,
    pub areas: DomainAreaPair,
    pub max_abs_curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalStatus {
    ConvergedToEquator,
    Extinct,
    Running,
}

/// The recorded history of one flowed curve.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub records: Vec<FlowState>,
    pub status: TerminalStatus,
    /// Extinction time estimate (recorded stop time plus the area-law tail).
    pub extinction_time: Option<f64>,
}

struct Stepper {
    nodes: Vec<SpherePoint>,
    t: f64,
    initial_length: f64,
    initial_nodes: usize,
    steps_since_redistribution: usize,
}

impl Stepper {
    fn new(curve: &SphereCurve, cfg: &FlowConfig) -> Result<Self, FlowError> {
        let resampled = reparametrize_constant_speed(curve, cfg.nodes)?;
        let len = resampled.length();
        Ok(Self {
            nodes: resampled.nodes().to_vec(),
            t: 0.0,
            initial_length: len,
            initial_nodes: cfg.nodes,
            steps_since_redistribution: 0,
        })
    }

    fn curve(&self, orientation: i8) -> SphereCurve {
        SphereCurve::new(self.nodes.clone(), true, orientation).expect("flow state curve")
    }

    fn length(&self) -> f64 {
        let n = self.nodes.len();
        (0..n)
            .map(|i| {
                let a = self.nodes[i].coords();
                let b = self.nodes[(i + 1) % n].coords();
                a.dot(&b).clamp(-1.0, 1.0).acos()
            })
            .sum()
    }

    fn min_gap(&self) -> f64 {
        let n = self.nodes.len();
        (0..n)
            .map(|i| {
                let a = self.nodes[i].coords();
                let b = self.nodes[(i + 1) % n].coords();
                a.dot(&b).clamp(-1.0, 1.0).acos()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// One explicit Euler step of at most `dt_cap`; returns the step taken.
    fn step(&mut self, safety: f64, dt_cap: f64) -> f64 {
        let n = self.nodes.len();
        let gap = self.min_gap();
        let dt = (safety * gap * gap).min(dt_cap);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let a = self.nodes[(i + n - 1) % n].coords();
            let b = self.nodes[i].coords();
            let c = self.nodes[(i + 1) % n].coords();
            let kv = curvature_vector(a, b, c);
            next.push(SpherePoint::project(b + kv * dt).expect("flow step"));
        }
        self.nodes = next;
        self.t += dt;
        self.steps_since_redistribution += 1;
        dt
    }

    fn maybe_redistribute(&mut self, cadence: usize) {
        if self.steps_since_redistribution < cadence {
            return;
        }
        // uniform respacing at the current count (near-identity between
        // coarsenings, so the corner-cut area loss stays second order)
        let curve = self.curve(1);
        if let Ok(r) = reparametrize_constant_speed(&curve, self.nodes.len()) {
            self.nodes = r.nodes().to_vec();
        }
        // coarsen by exact stride-halving: a node subset cuts no corners
        let gap0 = self.initial_length / self.initial_nodes as f64;
        while self.nodes.len() >= 128 && self.length() / (self.nodes.len() as f64) < gap0 * 0.5 {
            self.nodes = self.nodes.iter().copied().step_by(2).collect();
        }
        self.steps_since_redistribution = 0;
    }

    fn max_abs_curvature(&self) -> f64 {
        let n = self.nodes.len();
        (0..n)
            .map(|i| {
                let a = self.nodes[(i + n - 1) % n].coords();
                let b = self.nodes[i].coords();
                let c = self.nodes[(i + 1) % n].coords();
                curvature_vector(a, b, c).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Geodesic-curvature vector at `b` from the circumscribed small circle
/// through `(a, b, c)`.
fn curvature_vector(a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
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

fn snapshot(st: &Stepper, orientation: i8) -> Result<FlowState, FlowError> {
    let curve = st.curve(orientation);
    let hits = curve.self_intersections(1);
    if let Some(p) = hits.first() {
        let v = p.coords();
        return Err(FlowError::EmbeddednessLost { t: st.t, x: v.x, y: v.y, z: v.z });
    }
    let areas = enclosed_area(&curve)?;
    Ok(FlowState {
        length: curve.length(),
        max_abs_curvature: st.max_abs_curvature(),
        areas,
        t: st.t,
        curve,
    })
}

/// Flows a closed simple curve by its geodesic curvature until it converges
/// to an equator, goes extinct, or hits the time limit. Embeddedness loss is
/// a numerical failure and aborts with the state location.
pub fn flow(curve: &SphereCurve, cfg: &FlowConfig) -> Result<FlowTrajectory, FlowError> {
    cfg.validate()?;
    if !curve.is_simple() {
        return Err(FlowError::NotSimple);
    }
    let orientation = curve.orientation();
    let mut st = Stepper::new(curve, cfg)?;
    let mut records = vec![snapshot(&st, orientation)?];
    let mut next_record = cfg.record_dt;

    loop {
        let last = records.last().expect("at least the initial record");
        // stopping conditions are evaluated on recorded states
        if last.max_abs_curvature < cfg.kappa_tol && (last.length - TWO_PI).abs() < cfg.length_tol {
            return Ok(FlowTrajectory {
                records,
                status: TerminalStatus::ConvergedToEquator,
                extinction_time: None,
            });
        }
        if last.length < EXTINCTION_LENGTH {
            let tail = last.areas.left_area.min(last.areas.right_area) / TWO_PI;
            let t_ext = last.t + tail;
            return Ok(FlowTrajectory {
                records,
                status: TerminalStatus::Extinct,
                extinction_time: Some(t_ext),
            });
        }
        if st.t >= cfg.t_max {
            return Ok(FlowTrajectory { records, status: TerminalStatus::Running, extinction_time: None });
        }

        while st.t < next_record.min(cfg.t_max) {
            st.step(cfg.safety, next_record.min(cfg.t_max) - st.t);
            st.maybe_redistribute(cfg.redistribution_cadence);
            if st.length() < EXTINCTION_LENGTH {
                break;
            }
        }
        next_record = st.t + cfg.record_dt;
        records.push(snapshot(&st, orientation)?);
    }
}

/// Largest relative deviation of the recorded left-domain area from the
/// exponential area law `(|D_0| - 2 pi) e^t + 2 pi`, over records with
/// area above `0.2`. Balanced inputs are rejected: the law degenerates to a
/// constant there.
pub fn area_law_residual(traj: &FlowTrajectory) -> Result<f64, FlowError> {
    let d0 = traj.records.first().map(|r| r.areas.left_area).unwrap_or(TWO_PI);
    if (d0 - TWO_PI).abs() < 0.05 {
        return Err(FlowError::AreaLawDegenerate(d0));
    }
    let mut worst: f64 = 0.0;
    for rec in &traj.records {
        let predicted = (d0 - TWO_PI) * rec.t.exp() + TWO_PI;
        if rec.areas.left_area.min(rec.areas.right_area) < 0.2 {
            continue;
        }
        worst = worst.max((rec.areas.left_area - predicted).abs() / predicted.abs());
    }
    Ok(worst)
}

/// Largest drift of the left-domain area from `2 pi` over a trajectory of a
/// balanced curve.
pub fn balance_drift(traj: &FlowTrajectory) -> f64 {
    traj.records
        .iter()
        .map(|r| (r.areas.left_area - TWO_PI).abs())
        .fold(0.0, f64::max)
}

/// Per-checkpoint snapshot of a synchronized family flow.
#[derive(Debug, Clone)]
pub struct FamilyCheckpoint {
    pub t: f64,
    /// `None` marks a member extinct before this checkpoint.
    pub curves: Vec<Option<SphereCurve>>,
    /// Pairwise transverse crossing counts among the surviving members
    /// (`None` when either member is gone).
    pub intersections: Vec<Vec<Option<usize>>>,
}

/// Flows every curve of a family to the common checkpoints on its own step
/// sequence (one pass per member, checkpoints landed exactly) and reports
/// the pairwise intersection pattern at each checkpoint. With
/// `declared_balanced`, any extinction aborts.
pub fn flow_family(
    curves: &[SphereCurve],
    checkpoints: &[f64],
    cfg: &FlowConfig,
    declared_balanced: bool,
) -> Result<Vec<FamilyCheckpoint>, FlowError> {
    cfg.validate()?;
    let per_member: Vec<Result<Vec<Option<SphereCurve>>, FlowError>> = curves
        .par_iter()
        .map(|c| flow_through_checkpoints(c, checkpoints, cfg))
        .collect();
    let mut snapshots = Vec::with_capacity(curves.len());
    for (index, r) in per_member.into_iter().enumerate() {
        let snaps = r?;
        if declared_balanced {
            if let Some(k) = snaps.iter().position(|s| s.is_none()) {
                return Err(FlowError::BalancedMemberExtinct { index, t: checkpoints[k] });
            }
        }
        snapshots.push(snaps);
    }

    let mut out = Vec::with_capacity(checkpoints.len());
    for (k, &t) in checkpoints.iter().enumerate() {
        let curves_k: Vec<Option<SphereCurve>> =
            snapshots.iter().map(|s| s[k].clone()).collect();
        let m = curves_k.len();
        let mut matrix = vec![vec![None; m]; m];
        for i in 0..m {
            for j in (i + 1)..m {
                if let (Some(a), Some(b)) = (&curves_k[i], &curves_k[j]) {
                    let rep = count_transverse_intersections(a, b, DEFAULT_ANGLE_FLOOR)?;
                    matrix[i][j] = Some(rep.crossings);
                    matrix[j][i] = Some(rep.crossings);
                }
            }
        }
        out.push(FamilyCheckpoint { t, curves: curves_k, intersections: matrix });
    }
    Ok(out)
}

/// Flows one curve through an increasing checkpoint list, reusing state
/// between consecutive checkpoints; returns the curve at each checkpoint or
/// `None` from the first checkpoint an extinct member misses.
pub fn flow_through_checkpoints(
    curve: &SphereCurve,
    checkpoints: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<Option<SphereCurve>>, FlowError> {
    if !curve.is_simple() {
        return Err(FlowError::NotSimple);
    }
    let orientation = curve.orientation();
    let mut st = Stepper::new(curve, cfg)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut extinct = false;
    for &t_target in checkpoints {
        if !extinct {
            while st.t < t_target {
                // a near-stationary curve no longer moves: skip ahead
                if st.max_abs_curvature() < 1e-7 {
                    st.t = t_target;
                    break;
                }
                st.step(cfg.safety, t_target - st.t);
                st.maybe_redistribute(cfg.redistribution_cadence);
                if st.length() < EXTINCTION_LENGTH {
                    extinct = true;
                    break;
                }
            }
        }
        if extinct {
            out.push(None);
        } else {
            let curve = st.curve(orientation);
            let hits = curve.self_intersections(1);
            if let Some(p) = hits.first() {
                let v = p.coords();
                return Err(FlowError::EmbeddednessLost { t: st.t, x: v.x, y: v.y, z: v.z });
            }
            out.push(Some(curve));
        }
    }
    Ok(out)
}

/// Flows a balanced curve until its curvature falls below `kappa_tol`
/// (equator convergence), returning the final curve.
pub fn flow_until_straight(curve: &SphereCurve, cfg: &FlowConfig) -> Result<SphereCurve, FlowError> {
    let traj = flow(curve, cfg)?;
    match traj.status {
        TerminalStatus::ConvergedToEquator => {
            Ok(traj.records.last().expect("converged record").curve.clone())
        }
        TerminalStatus::Extinct => Err(FlowError::BalancedMemberExtinct {
            index: 0,
            t: traj.extinction_time.unwrap_or(f64::NAN),
        }),
        TerminalStatus::Running => Err(FlowError::EmbeddednessLost {
            // not an embeddedness failure; reuse the location-free variant
            t: traj.records.last().map(|r| r.t).unwrap_or(f64::NAN),
            x: f64::NAN,
            y: f64::NAN,
            z: f64::NAN,
        }),
    }
}

/// Antipodally symmetric wavy equator: `z`-wave with an odd harmonic, so
/// `gamma(t + pi) = -gamma(t)` exactly and the curve is balanced.
pub fn antipodal_wavy_equator(amplitude: f64, harmonic: usize, n: usize) -> SphereCurve {
    assert!(harmonic % 2 == 1, "antipodal symmetry needs an odd harmonic");
    SphereCurve::from_closed_param(
        |t| {
            let z = amplitude * (harmonic as f64 * t).sin();
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * t.cos(), r * t.sin(), z)
        },
        n,
    )
    .expect("wavy equator")
}

/// Random smooth graph-type curve over a circle around a random axis:
/// simple by construction for small radial waves.
pub fn random_graph_curve(rng: &mut impl rand::Rng, n: usize) -> SphereCurve {
    let axis = crate::finsler::random_sphere_point(rng);
    let (e1, e2) = axis.tangent_frame();
    let colat0: f64 = rng.random_range(0.7..2.4);
    let amp_budget = 0.45_f64.min(colat0 - 0.25).min(std::f64::consts::PI - 0.25 - colat0);
    let a1: f64 = rng.random_range(-amp_budget / 2.0..amp_budget / 2.0);
    let a2: f64 = rng.random_range(-amp_budget / 3.0..amp_budget / 3.0);
    let a3: f64 = rng.random_range(-amp_budget / 4.0..amp_budget / 4.0);
    let p1: f64 = rng.random_range(0.0..TWO_PI);
    let p2: f64 = rng.random_range(0.0..TWO_PI);
    let p3: f64 = rng.random_range(0.0..TWO_PI);
    SphereCurve::from_closed_param(
        |t| {
            let colat = colat0
                + a1 * (t + p1).sin()
                + a2 * (2.0 * t + p2).sin()
                + a3 * (3.0 * t + p3).sin();
            let (s, c) = colat.sin_cos();
            axis.coords() * c + (e1 * t.cos() + e2 * t.sin()) * s
        },
        n,
    )
    .expect("random graph curve")
}
