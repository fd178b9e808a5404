//! Adjoint-based calibration of the control `u = (λ, A, R)`.
//!
//! The tracking cost
//!
//! ```text
//! J(y, u) = ∫₀ᵀ σ₁/(2N) Σᵢ ‖xᵢ − xᵢᵈᵃᵗᵃ‖² dt + σ₂/2 ‖u − u_ref‖²
//! ```
//!
//! is differentiated through the continuous adjoint system
//!
//! ```text
//! ξ₁ᵢ' = σ₁/N (xᵢ − xᵢᵈᵃᵗᵃ) − s/N Σⱼ (M_ij ∂ₓK_ij)ᵀ (ξ₂ᵢ − ξ₂ⱼ)
//! ξ₂ᵢ' = −ξ₁ᵢ + τ ξ₂ᵢ − s/N Σⱼ ∂ᵥM*_ij K_ij (ξ₂ᵢ − ξ₂ⱼ)
//! ```
//!
//! with `ξ(T) = 0`, integrated backward by the explicit midpoint rule. The
//! reduced gradient is `σ₂(u − u_ref) − ∫ Σᵢ (∂ᵤFᵢ)ᵀ ξ₂ᵢ dt`. A mini-batch
//! gradient restricts the tracking source to a window of the time grid while
//! keeping the state on the full horizon.

use log::{debug, info};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::model::{
    force_control_derivatives, force_position_jacobian, interaction_force, rotation_matrix, rotation_velocity_gradient,
    AdmissibleBox, ControlVector, ModelParams,
};
use crate::rng::{rng_for, Stream};
use crate::simulator::{simulate_free_steps, Trajectory};

/// Multipliers `(ξ₁, ξ₂)` on the state grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub dt: f64,
    pub xi1: Vec<Vec<Vec2>>,
    pub xi2: Vec<Vec<Vec2>>,
}

impl AdjointTrajectory {
    fn zeros(dt: f64, frames: usize, agents: usize) -> Self {
        AdjointTrajectory {
            dt,
            xi1: vec![vec![Vec2::ZERO; agents]; frames],
            xi2: vec![vec![Vec2::ZERO; agents]; frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.xi1.len()
    }
}

/// Half-open range `[start, end)` of grid intervals; interval `k` spans
/// `[t_k, t_{k+1}]`.
///
/// Every time point belongs to exactly one interval (`t_K` to the last one),
/// so disjoint batches that cover the grid partition the tracking source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub start: usize,
    pub end: usize,
}

impl MiniBatch {
    pub fn new(start: usize, end: usize, steps: usize) -> Result<Self> {
        if start >= end || end > steps {
            return Err(Error::Config(format!(
                "mini-batch [{start}, {end}) must be non-empty and within {steps} steps"
            )));
        }
        Ok(MiniBatch { start, end })
    }

    pub fn full(steps: usize) -> Self {
        MiniBatch {
            start: 0,
            end: steps.max(1),
        }
    }

    fn holds_interval(&self, interval: usize) -> bool {
        interval >= self.start && interval < self.end
    }

    /// Source weight at grid point `k` of a grid with `steps` intervals.
    fn grid_weight(&self, k: usize, steps: usize) -> f64 {
        let interval = k.min(steps.saturating_sub(1));
        if self.holds_interval(interval) {
            1.0
        } else {
            0.0
        }
    }
}

/// Contiguous batches of `batch_steps` intervals covering `steps` intervals;
/// the last block is shorter when `steps` is not a multiple.
pub fn partition_batches(steps: usize, batch_steps: usize) -> Vec<MiniBatch> {
    let len = batch_steps.max(1);
    let steps = steps.max(1);
    (0..steps)
        .step_by(len)
        .map(|start| MiniBatch {
            start,
            end: (start + len).min(steps),
        })
        .collect()
}

/// Draw `m` distinct batches from `partition` (all of them if `m` is larger),
/// returned in time order.
pub fn sample_batches<R: rand::Rng>(partition: &[MiniBatch], m: usize, rng: &mut R) -> Vec<MiniBatch> {
    if m >= partition.len() {
        return partition.to_vec();
    }
    let mut idx = sample(rng, partition.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| partition[k]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub u_ref: ControlVector,
    /// Per-component step sizes for `(λ, A, R)`.
    pub beta: [f64; 3],
    /// Stop once the relative change of the cost drops below this.
    pub epsilon_rel: f64,
    /// Mini-batches per iteration.
    pub minibatches: usize,
    /// Batch length in seconds; rounded to whole time steps.
    pub batch_length: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub bounds: AdmissibleBox,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adjoint: AdjointMethod,
}

impl CalibrationConfig {
    /// Settings of the archive-data runs: `σ = (1, 0)`, `β = (20, 4000, 4000)`,
    /// 50 one-step batches, 100 iterations.
    pub fn archive_defaults(dt: f64) -> Self {
        CalibrationConfig {
            sigma1: 1.0,
            sigma2: 0.0,
            u_ref: ControlVector::default(),
            beta: [20.0, 4000.0, 4000.0],
            epsilon_rel: 1e-2,
            minibatches: 50,
            batch_length: dt,
            max_iters: 100,
            bounds: AdmissibleBox::default(),
            seed: 0,
            adjoint: AdjointMethod::Discrete,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return Err(Error::Config("sigma1 and sigma2 must be non-negative".into()));
        }
        if !self.beta.iter().all(|b| *b > 0.0 && b.is_finite()) {
            return Err(Error::Config("beta must be positive componentwise".into()));
        }
        if !(self.epsilon_rel > 0.0 && self.epsilon_rel < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_rel = {} not in (0, 1)",
                self.epsilon_rel
            )));
        }
        if self.minibatches == 0 {
            return Err(Error::Config(
                "at least one mini-batch per iteration is required".into(),
            ));
        }
        if !(self.batch_length > 0.0) {
            return Err(Error::Config("batch_length must be positive".into()));
        }
        self.bounds.validate()
    }

    pub fn batch_steps(&self, dt: f64) -> usize {
        ((self.batch_length / dt).round() as usize).max(1)
    }
}

/// How the adjoint system is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointMethod {
    /// Reverse pass through the leap-frog map and the trapezoidal cost; the
    /// exact gradient of the discrete reduced cost.
    #[default]
    Discrete,
    /// Explicit midpoint integration of the continuous adjoint system; agrees
    /// with the discrete gradient up to `O(Δt)`.
    Continuous,
}

/// Switches for deliberately wrong adjoints, used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdjointOptions {
    /// Flip the sign of the velocity-coupling sums in the `ξ₂` equation.
    pub flip_velocity_coupling: bool,
}

#[inline]
fn trapezoid_weight(k: usize, steps: usize, dt: f64) -> f64 {
    if steps == 0 {
        0.0
    } else if k == 0 || k == steps {
        0.5 * dt
    } else {
        dt
    }
}

/// Tracking cost with the time integral evaluated by the trapezoidal rule on
/// the trajectory grid.
pub fn cost_functional(traj: &Trajectory, data: &Trajectory, u: ControlVector, cfg: &CalibrationConfig) -> Result<f64> {
    traj.check_compatible(data)?;
    let n = traj.n_agents().max(1) as f64;
    let steps = traj.steps();
    let mut integral = 0.0;
    for k in 0..traj.n_frames() {
        let w = trapezoid_weight(k, steps, traj.dt);
        if w == 0.0 {
            continue;
        }
        let mismatch: f64 = traj.positions[k]
            .iter()
            .zip(&data.positions[k])
            .map(|(x, xd)| (*x - *xd).norm_sq())
            .sum();
        integral += w * mismatch;
    }
    let du = [
        u.lambda - cfg.u_ref.lambda,
        u.attraction - cfg.u_ref.attraction,
        u.repulsion - cfg.u_ref.repulsion,
    ];
    let reg: f64 = du.iter().map(|d| d * d).sum();
    Ok(cfg.sigma1 / (2.0 * n) * integral + 0.5 * cfg.sigma2 * reg)
}

/// State, data and source weight at one evaluation time of the adjoint system.
pub struct AdjointPoint<'a> {
    pub positions: &'a [Vec2],
    pub velocities: &'a [Vec2],
    pub data: &'a [Vec2],
    /// Multiplier of the tracking source (1 inside the batch window, else 0).
    pub source_weight: f64,
}

/// Transposed interaction Jacobians applied to per-agent multipliers:
/// `((∂ₓG)ᵀ μ, (∂ᵥG)ᵀ μ)` where `Gᵢ = s/N Σⱼ M_ij K_ij`.
pub fn interaction_vjp(
    positions: &[Vec2],
    velocities: &[Vec2],
    mu: &[Vec2],
    params: &ModelParams,
    options: AdjointOptions,
) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    let n = positions.len();
    let scale = params.sign.value() / n.max(1) as f64;
    let coupling = if options.flip_velocity_coupling { -1.0 } else { 1.0 };
    let mut gx = vec![Vec2::ZERO; n];
    let mut gv = vec![Vec2::ZERO; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (xi, xj) = (positions[i], positions[j]);
            let (vi, vj) = (velocities[i], velocities[j]);
            let diff = mu[i] - mu[j];
            let m = rotation_matrix(vi, vj, params.lambda);
            let jac = force_position_jacobian(xi, xj, params).map_err(|_| Error::SingularSeparation { i, j })?;
            // ∂ₓK(x_j, x_i) at x_j equals ∂ₓK(x_i, x_j) at x_i, and M is
            // symmetric, so the pair (j, i) contributes the negated term.
            let pos_term = m.mul_mat(jac).tr_mul_vec(diff) * scale;
            gx[i] += pos_term;
            gx[j] -= pos_term;

            let k_ij = interaction_force(xi, xj, params).map_err(|_| Error::SingularSeparation { i, j })?;
            let g_i = rotation_velocity_gradient(vi, vj, params.lambda).contract(k_ij, diff);
            let g_j = rotation_velocity_gradient(vj, vi, params.lambda).contract(-k_ij, -diff);
            gv[i] += g_i * (coupling * scale);
            gv[j] += g_j * (coupling * scale);
        }
    }
    Ok((gx, gv))
}

/// `Σᵢ (∂ᵤGᵢ)ᵀ μᵢ`.
fn control_vjp(positions: &[Vec2], velocities: &[Vec2], mu: &[Vec2], params: &ModelParams) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (i, m) in mu.iter().enumerate() {
        if *m == Vec2::ZERO {
            continue;
        }
        let du = force_control_derivatives(i, positions, velocities, params)?;
        for c in 0..3 {
            out[c] += du[c].dot(*m);
        }
    }
    Ok(out)
}

/// `(ξ₁', ξ₂')` of the adjoint system at one time.
pub fn adjoint_rhs(
    at: &AdjointPoint<'_>,
    xi1: &[Vec2],
    xi2: &[Vec2],
    params: &ModelParams,
    sigma1: f64,
    options: AdjointOptions,
) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    let n = at.positions.len();
    let inv_n = 1.0 / n.max(1) as f64;
    let (gx, gv) = interaction_vjp(at.positions, at.velocities, xi2, params, options)?;
    let dxi1 = (0..n)
        .map(|i| (at.positions[i] - at.data[i]) * (at.source_weight * sigma1 * inv_n) - gx[i])
        .collect();
    let dxi2 = (0..n).map(|i| xi2[i] * params.tau - xi1[i] - gv[i]).collect();
    Ok((dxi1, dxi2))
}

fn midpoint(a: &[Vec2], b: &[Vec2]) -> Vec<Vec2> {
    a.iter().zip(b).map(|(p, q)| p.lerp(*q, 0.5)).collect()
}

fn axpy(x: &[Vec2], a: f64, y: &[Vec2]) -> Vec<Vec2> {
    x.iter().zip(y).map(|(p, q)| *p + *q * a).collect()
}

/// Integrate the adjoint system backward from `ξ(T) = 0` with the explicit
/// midpoint rule on the state grid. Half-step states are linear
/// interpolations of neighbouring grid values.
pub fn solve_adjoint(
    state: &Trajectory,
    data: &Trajectory,
    params: &ModelParams,
    sigma1: f64,
    batch: MiniBatch,
    options: AdjointOptions,
) -> Result<AdjointTrajectory> {
    state.check_compatible(data)?;
    let steps = state.steps();
    let n = state.n_agents();
    let dt = state.dt;
    let mut adj = AdjointTrajectory::zeros(dt, state.n_frames(), n);
    if steps == 0 || sigma1 == 0.0 {
        return Ok(adj);
    }
    // Past the batch window both the source and the terminal value vanish,
    // so the multipliers are zero there.
    let start = batch.end.min(steps);
    for k in (1..=start).rev() {
        let here = AdjointPoint {
            positions: &state.positions[k],
            velocities: &state.velocities[k],
            data: &data.positions[k],
            source_weight: batch.grid_weight(k, steps),
        };
        let (g1, g2) = adjoint_rhs(&here, &adj.xi1[k], &adj.xi2[k], params, sigma1, options)?;
        let mid1 = axpy(&adj.xi1[k], -0.5 * dt, &g1);
        let mid2 = axpy(&adj.xi2[k], -0.5 * dt, &g2);

        let xm = midpoint(&state.positions[k - 1], &state.positions[k]);
        let vm = midpoint(&state.velocities[k - 1], &state.velocities[k]);
        let dm = midpoint(&data.positions[k - 1], &data.positions[k]);
        let half = AdjointPoint {
            positions: &xm,
            velocities: &vm,
            data: &dm,
            source_weight: if batch.holds_interval(k - 1) { 1.0 } else { 0.0 },
        };
        let (h1, h2) = adjoint_rhs(&half, &mid1, &mid2, params, sigma1, options)?;
        adj.xi1[k - 1] = axpy(&adj.xi1[k], -dt, &h1);
        adj.xi2[k - 1] = axpy(&adj.xi2[k], -dt, &h2);
    }
    Ok(adj)
}

/// `σ₂(u − u_ref) − ∫₀ᵀ Σᵢ (∂ᵤFᵢ)ᵀ ξ₂ᵢ dt` with the trapezoidal rule.
pub fn reduced_gradient(
    state: &Trajectory,
    adjoint: &AdjointTrajectory,
    params: &ModelParams,
    cfg: &CalibrationConfig,
) -> Result<[f64; 3]> {
    if adjoint.n_frames() != state.n_frames() {
        return Err(Error::GridMismatch(
            "adjoint and state have different frame counts".into(),
        ));
    }
    let u = params.control();
    let mut grad = [
        cfg.sigma2 * (u.lambda - cfg.u_ref.lambda),
        cfg.sigma2 * (u.attraction - cfg.u_ref.attraction),
        cfg.sigma2 * (u.repulsion - cfg.u_ref.repulsion),
    ];
    let steps = state.steps();
    for k in 0..state.n_frames() {
        let w = trapezoid_weight(k, steps, state.dt);
        let xi2 = &adjoint.xi2[k];
        if w == 0.0 || xi2.iter().all(|v| *v == Vec2::ZERO) {
            continue;
        }
        for (i, xi) in xi2.iter().enumerate() {
            let du = force_control_derivatives(i, &state.positions[k], &state.velocities[k], params)?;
            for c in 0..3 {
                grad[c] -= w * du[c].dot(*xi);
            }
        }
    }
    Ok(grad)
}

/// Gradient of the batch-restricted discrete reduced cost, obtained by a
/// reverse sweep through each leap-frog step
///
/// ```text
/// y = x + Δt/2 v,  z = (v + Δt τ w)/(1 + Δt τ),  v⁺ = z + Δt G(y, z),  x⁺ = y + Δt/2 v⁺
/// ```
///
/// The sweep variables are discrete counterparts of `(ξ₁, −ξ₂)`.
pub fn discrete_adjoint_gradient(
    state: &Trajectory,
    data: &Trajectory,
    desired: &[Vec2],
    params: &ModelParams,
    cfg: &CalibrationConfig,
    batch: MiniBatch,
    options: AdjointOptions,
) -> Result<[f64; 3]> {
    state.check_compatible(data)?;
    let n = state.n_agents();
    if desired.len() != n {
        return Err(Error::GridMismatch(
            "desired velocities do not match the agent count".into(),
        ));
    }
    let u = params.control();
    let mut grad = [
        cfg.sigma2 * (u.lambda - cfg.u_ref.lambda),
        cfg.sigma2 * (u.attraction - cfg.u_ref.attraction),
        cfg.sigma2 * (u.repulsion - cfg.u_ref.repulsion),
    ];
    let steps = state.steps();
    if steps == 0 || cfg.sigma1 == 0.0 {
        return Ok(grad);
    }
    let h = state.dt;
    let c = cfg.sigma1 / n as f64;
    let relax = 1.0 / (1.0 + h * params.tau);
    let source = |k: usize| -> Vec<Vec2> {
        let w = trapezoid_weight(k, steps, h) * batch.grid_weight(k, steps) * c;
        state.positions[k]
            .iter()
            .zip(&data.positions[k])
            .map(|(x, d)| (*x - *d) * w)
            .collect()
    };
    let top = batch.end.min(steps);
    let mut p = source(top);
    let mut q = vec![Vec2::ZERO; n];
    for k in (0..top).rev() {
        let (x, v) = (&state.positions[k], &state.velocities[k]);
        let y: Vec<Vec2> = x.iter().zip(v).map(|(x, v)| *x + *v * (0.5 * h)).collect();
        let z: Vec<Vec2> = v
            .iter()
            .zip(desired)
            .map(|(v, w)| (*v + *w * (h * params.tau)) * relax)
            .collect();
        let v_plus: Vec<Vec2> = q.iter().zip(&p).map(|(q, p)| *q + *p * (0.5 * h)).collect();
        let (gx, gv) = interaction_vjp(&y, &z, &v_plus, params, options)?;
        let du = control_vjp(&y, &z, &v_plus, params)?;
        for c in 0..3 {
            grad[c] += h * du[c];
        }
        let src = source(k);
        for i in 0..n {
            let y_bar = p[i] + gx[i] * h;
            let z_bar = v_plus[i] + gv[i] * h;
            q[i] = z_bar * relax + y_bar * (0.5 * h);
            p[i] = y_bar + src[i];
        }
    }
    Ok(grad)
}

/// Reduced gradient of one batch with the configured adjoint method.
pub fn batch_gradient(
    state: &Trajectory,
    data: &Trajectory,
    desired: &[Vec2],
    params: &ModelParams,
    cfg: &CalibrationConfig,
    batch: MiniBatch,
    options: AdjointOptions,
) -> Result<[f64; 3]> {
    match cfg.adjoint {
        AdjointMethod::Discrete => discrete_adjoint_gradient(state, data, desired, params, cfg, batch, options),
        AdjointMethod::Continuous => {
            let adj = solve_adjoint(state, data, params, cfg.sigma1, batch, options)?;
            reduced_gradient(state, &adj, params, cfg)
        }
    }
}

/// Mean of the per-batch reduced gradients. Batches are solved in parallel and
/// summed in the given order.
pub fn minibatch_gradient(
    state: &Trajectory,
    data: &Trajectory,
    desired: &[Vec2],
    params: &ModelParams,
    cfg: &CalibrationConfig,
    batches: &[MiniBatch],
    options: AdjointOptions,
) -> Result<[f64; 3]> {
    if batches.is_empty() {
        return Err(Error::Config("no mini-batches to average".into()));
    }
    let per_batch: Vec<[f64; 3]> = batches
        .par_iter()
        .map(|b| batch_gradient(state, data, desired, params, cfg, *b, options))
        .collect::<Result<_>>()?;
    let m = per_batch.len() as f64;
    let mut mean = [0.0; 3];
    for g in &per_batch {
        for c in 0..3 {
            mean[c] += g[c];
        }
    }
    Ok(mean.map(|s| s / m))
}

/// `u − β ⊙ ∇Ĵ`, clamped onto the admissible box.
pub fn descent_step(u: ControlVector, gradient: [f64; 3], beta: [f64; 3], bounds: &AdmissibleBox) -> ControlVector {
    let a = u.to_array();
    let stepped = [
        a[0] - beta[0] * gradient[0],
        a[1] - beta[1] * gradient[1],
        a[2] - beta[2] * gradient[2],
    ];
    bounds.project(ControlVector::from_array(stepped))
}

/// Fixed inputs of a calibration run: the data, each agent's desired and
/// initial velocity, and the parameters that are not calibrated.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub data: Trajectory,
    pub desired: Vec<Vec2>,
    pub initial_velocities: Vec<Vec2>,
    pub params: ModelParams,
}

impl CalibrationProblem {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let n = self.data.n_agents();
        if self.desired.len() != n || self.initial_velocities.len() != n {
            return Err(Error::GridMismatch(format!(
                "{} agents in data but {} desired and {} initial velocities",
                n,
                self.desired.len(),
                self.initial_velocities.len()
            )));
        }
        self.params.validate()
    }

    /// Control-to-state map: initial positions from the first data frame.
    pub fn solve_state(&self, u: ControlVector) -> Result<Trajectory> {
        simulate_free_steps(
            &self.data.positions[0],
            &self.initial_velocities,
            &self.desired,
            &self.params.with_control(u),
            self.data.steps(),
            self.data.dt,
        )
    }

    /// Reduced cost `Ĵ(u)` and the state it was evaluated on.
    pub fn reduced_cost(&self, u: ControlVector, cfg: &CalibrationConfig) -> Result<(f64, Trajectory)> {
        let state = self.solve_state(u)?;
        let j = cost_functional(&state, &self.data, u, cfg)?;
        Ok((j, state))
    }

    /// Adjoint gradient of `Ĵ` over the full horizon.
    pub fn full_gradient(
        &self,
        u: ControlVector,
        cfg: &CalibrationConfig,
        options: AdjointOptions,
    ) -> Result<[f64; 3]> {
        let state = self.solve_state(u)?;
        let params = self.params.with_control(u);
        batch_gradient(
            &state,
            &self.data,
            &self.desired,
            &params,
            cfg,
            MiniBatch::full(state.steps()),
            options,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub u: ControlVector,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RelativeChange,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub history: Vec<IterationRecord>,
    pub u: ControlVector,
    pub cost: f64,
    pub trajectory: Trajectory,
    pub stop: StopReason,
}

/// Mini-batch projected steepest descent.
///
/// Each iteration solves the state for the current control, records its cost,
/// stops if the relative cost change fell below `epsilon_rel` (or the
/// iteration budget is spent), and otherwise averages adjoint gradients over
/// `m` randomly drawn batches and takes a projected step.
pub fn calibrate(
    problem: &CalibrationProblem,
    u0: ControlVector,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    calibrate_with(problem, u0, cfg, AdjointOptions::default())
}

pub fn calibrate_with(
    problem: &CalibrationProblem,
    u0: ControlVector,
    cfg: &CalibrationConfig,
    options: AdjointOptions,
) -> Result<CalibrationResult> {
    problem.validate()?;
    cfg.validate()?;
    let steps = problem.data.steps();
    let partition = partition_batches(steps, cfg.batch_steps(problem.data.dt));
    let mut rng = rng_for(cfg.seed, Stream::Batches);

    let mut u = cfg.bounds.project(u0);
    let mut history = Vec::with_capacity(cfg.max_iters + 1);
    let mut previous: Option<f64> = None;
    for iteration in 0..=cfg.max_iters {
        let (cost, state) = problem.reduced_cost(u, cfg)?;
        if !cost.is_finite() || !state.is_finite() {
            return Err(Error::NonFiniteCost {
                iteration,
                u: u.to_array(),
            });
        }
        history.push(IterationRecord { iteration, u, cost });
        info!(
            "iteration {iteration}: J = {cost:.6e}, u = ({:.5}, {:.5}, {:.5})",
            u.lambda, u.attraction, u.repulsion
        );

        let stop = match previous {
            Some(prev) if ((prev - cost) / prev).abs() < cfg.epsilon_rel => Some(StopReason::RelativeChange),
            _ if iteration == cfg.max_iters => Some(StopReason::MaxIterations),
            _ => None,
        };
        if let Some(stop) = stop {
            return Ok(CalibrationResult {
                history,
                u,
                cost,
                trajectory: state,
                stop,
            });
        }
        previous = Some(cost);

        let batches = sample_batches(&partition, cfg.minibatches, &mut rng);
        let params = problem.params.with_control(u);
        let grad = minibatch_gradient(&state, &problem.data, &problem.desired, &params, cfg, &batches, options)?;
        debug!("gradient {grad:?} from {} batches", batches.len());
        u = descent_step(u, grad, cfg.beta, &cfg.bounds);
    }
    unreachable!("loop returns at iteration max_iters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_free;

    fn cfg(sigma1: f64, sigma2: f64) -> CalibrationConfig {
        CalibrationConfig {
            sigma1,
            sigma2,
            u_ref: ControlVector::default(),
            beta: [1.0; 3],
            epsilon_rel: 1e-3,
            minibatches: 1,
            batch_length: 1.0,
            max_iters: 10,
            bounds: AdmissibleBox::default(),
            seed: 0,
            adjoint: AdjointMethod::Discrete,
        }
    }

    fn three_agents() -> (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>) {
        (
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.3, 0.4), Vec2::new(-0.2, 1.6)],
            vec![Vec2::new(0.7, 0.1), Vec2::new(-0.6, 0.2), Vec2::new(0.1, -0.8)],
            vec![Vec2::new(0.7, 0.0), Vec2::new(-0.7, 0.0), Vec2::new(0.0, -0.7)],
        )
    }

    #[test]
    fn identical_trajectories_cost_nothing() {
        let (x, v, w) = three_agents();
        let p = ModelParams::lane_study(0.4);
        let traj = simulate_free(&x, &v, &w, &p, 0.5, 0.01).unwrap();
        assert_eq!(cost_functional(&traj, &traj, p.control(), &cfg(1.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_cost_is_exact() {
        let dt = 0.1;
        let horizon = 2.0;
        let delta = Vec2::new(0.3, -0.4);
        let mut a = Trajectory::new(dt, vec![Vec2::ZERO], vec![Vec2::ZERO]);
        let mut b = Trajectory::new(dt, vec![delta], vec![Vec2::ZERO]);
        for _ in 0..20 {
            a.push(vec![Vec2::ZERO], vec![Vec2::ZERO]);
            b.push(vec![delta], vec![Vec2::ZERO]);
        }
        let j = cost_functional(&a, &b, ControlVector::default(), &cfg(1.0, 0.0)).unwrap();
        assert!((j - horizon * delta.norm_sq() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = Trajectory::new(0.1, vec![Vec2::ZERO], vec![Vec2::ZERO]);
        let mut b = a.clone();
        b.push(vec![Vec2::ZERO], vec![Vec2::ZERO]);
        assert!(matches!(
            cost_functional(&a, &b, ControlVector::default(), &cfg(1.0, 0.0)),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn zero_is_a_fixed_point_of_the_adjoint() {
        let (x, v, _) = three_agents();
        let zeros = vec![Vec2::ZERO; 3];
        let at = AdjointPoint {
            positions: &x,
            velocities: &v,
            data: &x,
            source_weight: 1.0,
        };
        let (a, b) = adjoint_rhs(
            &at,
            &zeros,
            &zeros,
            &ModelParams::lane_study(0.4),
            0.0,
            AdjointOptions::default(),
        )
        .unwrap();
        assert!(a.iter().chain(&b).all(|v| *v == Vec2::ZERO));
    }

    #[test]
    fn single_agent_adjoint_has_no_interaction() {
        let p = ModelParams::lane_study(0.4);
        let x = [Vec2::new(1.0, 2.0)];
        let xd = [Vec2::new(0.5, 2.5)];
        let v = [Vec2::new(0.7, 0.0)];
        let xi1 = [Vec2::new(0.2, -0.1)];
        let xi2 = [Vec2::new(-0.3, 0.4)];
        let at = AdjointPoint {
            positions: &x,
            velocities: &v,
            data: &xd,
            source_weight: 1.0,
        };
        let (a, b) = adjoint_rhs(&at, &xi1, &xi2, &p, 2.0, AdjointOptions::default()).unwrap();
        assert_eq!(a[0], (x[0] - xd[0]) * 2.0);
        assert_eq!(b[0], xi2[0] * p.tau - xi1[0]);
    }

    #[test]
    fn no_tracking_weight_means_zero_adjoint() {
        let (x, v, w) = three_agents();
        let p = ModelParams::lane_study(0.4);
        let traj = simulate_free(&x, &v, &w, &p, 0.3, 0.01).unwrap();
        let data = simulate_free(&x, &w, &w, &p, 0.3, 0.01).unwrap();
        let adj = solve_adjoint(
            &traj,
            &data,
            &p,
            0.0,
            MiniBatch::full(traj.steps()),
            AdjointOptions::default(),
        )
        .unwrap();
        assert!(adj.xi1.iter().chain(&adj.xi2).flatten().all(|v| *v == Vec2::ZERO));

        let adj = solve_adjoint(
            &traj,
            &data,
            &p,
            1.0,
            MiniBatch::full(traj.steps()),
            AdjointOptions::default(),
        )
        .unwrap();
        let last = adj.n_frames() - 1;
        assert!(adj.xi1[last].iter().chain(&adj.xi2[last]).all(|v| *v == Vec2::ZERO));
        assert!(adj.xi1[0].iter().any(|v| *v != Vec2::ZERO));
    }

    #[test]
    fn regularization_gradient_with_zero_adjoint() {
        let (x, v, w) = three_agents();
        let p = ModelParams::lane_study(0.4);
        let traj = simulate_free(&x, &v, &w, &p, 0.2, 0.01).unwrap();
        let mut c = cfg(0.0, 1.0);
        c.u_ref = ControlVector::new(p.lambda - 0.1, p.attraction, p.repulsion);
        let adj = solve_adjoint(
            &traj,
            &traj,
            &p,
            0.0,
            MiniBatch::full(traj.steps()),
            AdjointOptions::default(),
        )
        .unwrap();
        let g = reduced_gradient(&traj, &adj, &p, &c).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-15 && g[1] == 0.0 && g[2] == 0.0);
        let g = reduced_gradient(&traj, &adj, &p, &cfg(0.0, 0.0)).unwrap();
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn descent_step_examples() {
        let b = AdmissibleBox::default();
        let u = ControlVector::new(0.0, 0.0, 40.0);
        assert_eq!(descent_step(u, [0.0; 3], [20.0, 4000.0, 4000.0], &b), u);
        let wide = AdmissibleBox {
            epsilon: 1e-3,
            a_max: 1e3,
            r_max: 1e3,
        };
        let stepped = descent_step(u, [0.01, -0.001, 0.002], [20.0, 4000.0, 4000.0], &wide);
        assert!((stepped.attraction - 4.0).abs() < 1e-12);
        assert!((stepped.repulsion - 32.0).abs() < 1e-12);
        // λ pre-clamp is −0.2, inside the box
        assert!((stepped.lambda + 0.2).abs() < 1e-12);
        let clamped = descent_step(u, [1.0, 0.0, 0.0], [20.0, 1.0, 1.0], &b);
        assert_eq!(clamped.lambda, -1.0 + 1e-3);
    }

    #[test]
    fn partition_covers_grid() {
        let p = partition_batches(10, 3);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], MiniBatch { start: 0, end: 3 });
        assert_eq!(p[3], MiniBatch { start: 9, end: 10 });
        for k in 0..=10 {
            let owners = p.iter().filter(|b| b.grid_weight(k, 10) > 0.0).count();
            assert_eq!(owners, 1, "grid point {k}");
        }
    }

    #[test]
    fn sampling_is_reproducible_and_distinct() {
        let p = partition_batches(1280, 1);
        let a = sample_batches(&p, 50, &mut rng_for(9, Stream::Batches));
        let b = sample_batches(&p, 50, &mut rng_for(9, Stream::Batches));
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|w| w[0].start < w[1].start));
        assert_eq!(sample_batches(&p[..3], 50, &mut rng_for(9, Stream::Batches)).len(), 3);
    }

    #[test]
    fn batch_bounds_checked() {
        assert!(MiniBatch::new(3, 3, 10).is_err());
        assert!(MiniBatch::new(0, 11, 10).is_err());
        assert!(MiniBatch::new(2, 5, 10).is_ok());
    }
}
