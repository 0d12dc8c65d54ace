//! Geometry recovery: vertex positions and voxel parameters minimizing pixel
//! reprojection error against fixed cameras, with spatial relations imposed
//! by an escalating quadratic penalty.

mod init;
mod problem;

pub use init::{binding_rms, fit_binding, initialize_geometry, triangulate, triangulate_vertex, umeyama};
pub use problem::{GeometryProblem, GeometryState};

use crate::calib::Camera;
use crate::constraint::{spatial_residual, ConstraintStore, SpatialKind, VoxelBinding, VoxelId};
use crate::mesh::{Mesh, VertexId};
use crate::ImageId;
use nalgebra::{DMatrix, DVector, Point3};
use problem::Entity;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Residual rms below which a state counts as an exact fit.
const EXACT_FIT_RMS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("vertex {0} is bound to a voxel; move the voxel instead")]
    BoundVertex(VertexId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("point at infinity: {0}")]
    AtInfinity(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

impl SolverError {
    pub fn kind(&self) -> &'static str {
        match self {
            SolverError::NotReady(_) => "NotReady",
            SolverError::BoundVertex(_) => "BoundVertex",
            SolverError::NotFound(_) => "NotFound",
            SolverError::AtInfinity(_) => "AtInfinity",
            SolverError::InvalidOptions(_) => "InvalidOptions",
        }
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Relative cost change that ends a penalty stage.
    pub tolerance: f64,
    pub constraint_weight_schedule: Vec<f64>,
    pub damping_init: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iterations: 100, tolerance: 1e-10, constraint_weight_schedule: vec![1e2, 1e4, 1e6], damping_init: 1e-3 }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidOptions("max_iterations must be positive".into()));
        }
        if !(self.tolerance > 0.0) || !(self.damping_init > 0.0) {
            return Err(SolverError::InvalidOptions("tolerance and damping must be positive".into()));
        }
        let s = &self.constraint_weight_schedule;
        if s.is_empty() || s.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(SolverError::InvalidOptions("penalty schedule must be non-empty and positive".into()));
        }
        if s.windows(2).any(|w| w[1] < w[0]) {
            return Err(SolverError::InvalidOptions("penalty schedule must be non-decreasing".into()));
        }
        Ok(())
    }

    fn final_weight(&self) -> f64 {
        self.constraint_weight_schedule.last().copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub weight: f64,
    /// Penalized cost before the first step and after every accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest spatial residual at the end of the stage.
    pub max_violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Weighted squared pixel error plus the penalty at the last schedule weight.
    pub final_cost: f64,
    pub reprojection_cost: f64,
    pub rms_reprojection: f64,
    pub num_projections: usize,
    pub max_constraint_violation: BTreeMap<SpatialKind, f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Unweighted pixel rms over each vertex's usable projections.
    pub per_vertex_residuals: BTreeMap<VertexId, f64>,
    /// Pixel distance of each usable projection.
    pub projection_residuals: BTreeMap<crate::constraint::ConstraintId, f64>,
    pub under_determined: Vec<VertexId>,
    pub frozen_voxels: Vec<VoxelId>,
    /// Projections ignored because their image has no full camera.
    pub excluded_projections: Vec<crate::constraint::ConstraintId>,
    pub stages: Vec<StageReport>,
}

impl SolveReport {
    pub fn max_violation(&self) -> f64 {
        self.max_constraint_violation.values().copied().fold(0.0, f64::max)
    }
}

/// Read-only inputs to a solve.
#[derive(Clone, Copy, Debug)]
pub struct SolveProblem<'a> {
    pub cameras: &'a BTreeMap<ImageId, Camera>,
    pub mesh: &'a Mesh,
    pub store: &'a ConstraintStore,
    pub options: &'a SolveOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub positions: BTreeMap<VertexId, Point3<f64>>,
    pub bindings: Vec<VoxelBinding>,
    pub report: SolveReport,
}

impl SolveOutcome {
    /// Writes solved values into the mesh and the store's bindings.
    pub fn apply(&self, mesh: &mut Mesh, store: &mut ConstraintStore) {
        for b in &self.bindings {
            if let Some(slot) = store.binding_mut(b.voxel) {
                *slot = b.clone();
            }
        }
        for (v, p) in &self.positions {
            let _ = mesh.set_position(*v, *p);
        }
    }
}

fn all_positions(problem: &GeometryProblem, state: &GeometryState, mesh: &Mesh) -> BTreeMap<VertexId, Point3<f64>> {
    mesh.vertex_ids().map(|v| (v, problem.position(state, v))).collect()
}

/// Report at a given state; the penalty part uses `weight`.
fn report_for(problem: &GeometryProblem, state: &GeometryState, mesh: &Mesh, store: &ConstraintStore, weight: f64) -> SolveReport {
    let mut reprojection = 0.0;
    let mut per_vertex: BTreeMap<VertexId, (f64, usize)> = BTreeMap::new();
    let mut per_projection = BTreeMap::new();
    for o in problem.observations() {
        let x = problem.position(state, o.vertex);
        let cam = &problem.cameras[&o.image];
        let (u, _) = problem::project_with_jacobian(cam, &x);
        let e = (u - o.pixel).norm_squared();
        reprojection += o.sqrt_weight * o.sqrt_weight * e;
        per_projection.insert(o.constraint, e.sqrt());
        let slot = per_vertex.entry(o.vertex).or_insert((0.0, 0));
        slot.0 += e;
        slot.1 += 1;
    }
    let n = problem.num_projection_residuals();
    let r = problem.residuals(state, weight);
    // The penalty rows follow the projection rows.
    let penalty: f64 = r.rows(2 * n, r.len() - 2 * n).norm_squared();

    let mut probe = mesh.clone();
    for (v, p) in all_positions(problem, state, mesh) {
        let _ = probe.set_position(v, p);
    }
    let mut violation: BTreeMap<SpatialKind, f64> = BTreeMap::new();
    for c in store.spatials() {
        if let Some(g) = spatial_residual(&probe, c) {
            let e = violation.entry(c.kind).or_insert(0.0);
            *e = e.max(g.abs());
        }
    }
    SolveReport {
        final_cost: reprojection + penalty,
        reprojection_cost: reprojection,
        rms_reprojection: if n > 0 { (reprojection / (2 * n) as f64).sqrt() } else { 0.0 },
        num_projections: n,
        max_constraint_violation: violation,
        per_vertex_residuals: per_vertex.into_iter().map(|(v, (s, k))| (v, (s / k as f64).sqrt())).collect(),
        projection_residuals: per_projection,
        excluded_projections: problem.excluded.clone(),
        ..SolveReport::default()
    }
}

/// Evaluates residuals at the current geometry without changing anything.
pub fn evaluate_residuals(p: &SolveProblem<'_>) -> SolveReport {
    let problem = GeometryProblem::new(p.cameras, p.mesh, p.store);
    let state = problem.initial_state();
    let mut report = report_for(&problem, &state, p.mesh, p.store, p.options.final_weight());
    report.converged = true;
    report
}

fn solve_linear(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.lu().solve(b)
}

/// Levenberg-Marquardt at one penalty weight. Returns the final state.
fn run_stage(problem: &GeometryProblem, mut state: GeometryState, weight: f64, opts: &SolveOptions, lambda: &mut f64) -> (GeometryState, StageReport) {
    let (mut r, mut j) = problem.evaluate(&state, weight, true);
    let mut j = j.take().expect("requested");
    let mut cost = r.norm_squared();
    let mut costs = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        if cost.sqrt() <= EXACT_FIT_RMS * (r.len().max(1) as f64).sqrt() || problem.num_params() == 0 {
            converged = true;
            break;
        }
        iterations += 1;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let diag_max = jtj.diagonal().max();
        let mut accepted = false;
        while *lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += *lambda * jtj[(k, k)].max(1e-12 * diag_max);
            }
            let Some(delta) = solve_linear(a, &(-&g)) else {
                *lambda *= 4.0;
                continue;
            };
            let candidate = problem.retract(&state, &delta);
            let dims_ok = candidate.bindings.values().all(|b| b.spec.dims.iter().all(|d| *d > 0.0));
            let rc = problem.residuals(&candidate, weight);
            let c = rc.norm_squared();
            if dims_ok && c < cost {
                let rel = (cost - c) / cost;
                state = candidate;
                cost = c;
                costs.push(c);
                let (r2, j2) = problem.evaluate(&state, weight, true);
                r = r2;
                j = j2.expect("requested");
                *lambda = (*lambda / 3.0).max(1e-15);
                accepted = true;
                if rel < opts.tolerance {
                    converged = true;
                }
                break;
            }
            *lambda *= 4.0;
        }
        if !accepted {
            // No decrease reachable: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    (state, StageReport { weight, costs, iterations, converged, max_violation: 0.0 })
}

/// Minimizes reprojection error plus the penalized spatial residuals over
/// free vertices and voxel parameters. Variables with no determining
/// equations are frozen at their initial values and reported.
pub fn solve_geometry(p: &SolveProblem<'_>) -> Result<SolveOutcome> {
    p.options.validate()?;
    if !p.cameras.values().any(|c| c.is_full()) {
        return Err(SolverError::NotReady("no calibrated camera".into()));
    }
    let opts = p.options;
    let first_weight = opts.constraint_weight_schedule[0];

    let mut frozen: BTreeSet<Entity> = BTreeSet::new();
    let mut problem = GeometryProblem::with_frozen(p.cameras, p.mesh, p.store, &frozen);
    if problem.num_projection_residuals() == 0 {
        return Err(SolverError::NotReady("no projection constraint in a calibrated image".into()));
    }
    loop {
        let null = problem.null_entities(&problem.initial_state(), first_weight);
        if null.is_empty() {
            break;
        }
        frozen.extend(null);
        problem = GeometryProblem::with_frozen(p.cameras, p.mesh, p.store, &frozen);
    }

    let mut state = problem.initial_state();
    let mut stages = Vec::new();
    let mut lambda = opts.damping_init;
    for &w in &opts.constraint_weight_schedule {
        let (s, mut stage) = run_stage(&problem, state, w, opts, &mut lambda);
        state = s;
        stage.max_violation = report_for(&problem, &state, p.mesh, p.store, w).max_violation();
        stages.push(stage);
    }

    let mut report = report_for(&problem, &state, p.mesh, p.store, opts.final_weight());
    report.iterations = stages.iter().map(|s| s.iterations).sum();
    report.converged = stages.iter().all(|s| s.converged);
    report.stages = stages;
    let mut under = BTreeSet::new();
    let mut frozen_voxels = Vec::new();
    for e in &frozen {
        match e {
            Entity::Vertex(v) => {
                under.insert(*v);
            }
            Entity::Voxel(k) => {
                frozen_voxels.push(*k);
                if let Some(b) = p.store.binding(*k) {
                    under.extend(b.members.iter().copied());
                }
            }
        }
    }
    report.under_determined = under.into_iter().collect();
    report.frozen_voxels = frozen_voxels;
    Ok(SolveOutcome { positions: all_positions(&problem, &state, p.mesh), bindings: state.bindings.into_values().collect(), report })
}

/// Replaces the initial value of a free vertex.
pub fn nudge_vertex(mesh: &mut Mesh, store: &ConstraintStore, v: VertexId, position: Point3<f64>) -> Result<Point3<f64>> {
    let old = mesh.position(v).ok_or_else(|| SolverError::NotFound(format!("vertex {v}")))?;
    if store.binding_of(v).is_some() {
        return Err(SolverError::BoundVertex(v));
    }
    if !(position.x.is_finite() && position.y.is_finite() && position.z.is_finite()) {
        return Err(SolverError::InvalidOptions("position must be finite".into()));
    }
    mesh.set_position(v, position).map_err(|e| SolverError::NotFound(e.to_string()))?;
    Ok(old)
}
