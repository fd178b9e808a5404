//! Adjoint gradient versus central finite differences of the reduced cost on
//! small random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{AdjointMethod, AdjointOptions, CalibrationConfig, CalibrationProblem};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::model::{AdmissibleBox, ControlVector, ModelParams};
use crate::rng::{rng_for, Stream};
use crate::simulator::simulate_free;

/// Minimum |sin| of the angle between any two initial velocities, keeping
/// instances away from the parallel-velocity kink of the rotation angle.
const MIN_SINE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_params")]
    pub params: ModelParams,
    /// Control that generates the synthetic data.
    #[serde(default = "default_u_data")]
    pub u_data: ControlVector,
    /// Control at which both gradients are evaluated.
    #[serde(default = "default_u_eval")]
    pub u_eval: ControlVector,
    #[serde(default = "one")]
    pub sigma1: f64,
    #[serde(default)]
    pub sigma2: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub adjoint: AdjointMethod,
}

fn default_agents() -> usize {
    5
}
fn default_horizon() -> f64 {
    0.5
}
fn default_dt() -> f64 {
    1e-3
}
fn default_params() -> ModelParams {
    ModelParams::lane_study(0.4)
}
fn default_u_data() -> ControlVector {
    ControlVector::new(0.25, 5.0, 20.0)
}
fn default_u_eval() -> ControlVector {
    ControlVector::new(0.1, 3.5, 26.0)
}
fn one() -> f64 {
    1.0
}
fn default_fd_step() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-4
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            seed: 0,
            agents: default_agents(),
            horizon: default_horizon(),
            dt: default_dt(),
            params: default_params(),
            u_data: default_u_data(),
            u_eval: default_u_eval(),
            sigma1: 1.0,
            sigma2: 0.0,
            fd_step: default_fd_step(),
            tolerance: default_tolerance(),
            adjoint: AdjointMethod::Discrete,
        }
    }
}

impl GradCheckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.agents < 2 {
            return Err(Error::Config("gradient check needs at least 2 agents".into()));
        }
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::Config("dt and T must be positive".into()));
        }
        if !(self.fd_step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config("fd_step and tolerance must be positive".into()));
        }
        self.params.validate()
    }

    /// Cost settings: tracking weight `σ₁`, Tikhonov weight `σ₂` around the
    /// evaluation point's origin, full-horizon batch.
    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            u_ref: ControlVector::default(),
            beta: [1.0; 3],
            epsilon_rel: 1e-6,
            minibatches: 1,
            batch_length: self.horizon,
            max_iters: 0,
            bounds: AdmissibleBox::default(),
            seed: self.seed,
            adjoint: self.adjoint,
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Vec2 {
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    Vec2::new(phi.cos(), phi.sin())
}

/// Random instance: positions in a square with pairwise separations of at
/// least 0.5 m, pairwise non-parallel initial velocities, random desired
/// velocities, and data generated by `u_data` from the same initial state.
pub fn random_problem(spec: &GradCheckSpec) -> Result<CalibrationProblem> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Stream::Instance);
    let n = spec.agents;
    let side = 1.5 * (n as f64).sqrt() + 1.0;
    let mut x0: Vec<Vec2> = Vec::with_capacity(n);
    while x0.len() < n {
        let mut placed = false;
        for _ in 0..10_000 {
            let p = Vec2::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            if x0.iter().all(|q| (*q - p).norm() >= 0.5) {
                x0.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SpawnFailed {
                group: "gradcheck".into(),
                agent: x0.len(),
                min_separation: 0.5,
                attempts: 10_000,
            });
        }
    }
    let mut v0: Vec<Vec2> = Vec::with_capacity(n);
    while v0.len() < n {
        let v = random_direction(&mut rng) * rng.gen_range(0.5..1.0);
        if v0.iter().all(|u| u.cross(v).abs() >= MIN_SINE * u.norm() * v.norm()) {
            v0.push(v);
        }
    }
    let desired: Vec<Vec2> = (0..n).map(|_| random_direction(&mut rng) * 0.7).collect();
    let data = simulate_free(
        &x0,
        &v0,
        &desired,
        &spec.params.with_control(spec.u_data),
        spec.horizon,
        spec.dt,
    )?;
    Ok(CalibrationProblem {
        data,
        desired,
        initial_velocities: v0,
        params: spec.params,
    })
}

/// Central differences of the reduced cost, step `h·max(1, |u_k|)`.
pub fn finite_difference_gradient(
    problem: &CalibrationProblem,
    u: ControlVector,
    cfg: &CalibrationConfig,
    h: f64,
) -> Result<[f64; 3]> {
    let base = u.to_array();
    let mut g = [0.0; 3];
    for k in 0..3 {
        let step = h * base[k].abs().max(1.0);
        let mut plus = base;
        let mut minus = base;
        plus[k] += step;
        minus[k] -= step;
        let (jp, _) = problem.reduced_cost(ControlVector::from_array(plus), cfg)?;
        let (jm, _) = problem.reduced_cost(ControlVector::from_array(minus), cfg)?;
        g[k] = (jp - jm) / (2.0 * step);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub adjoint: [f64; 3],
    pub finite_difference: [f64; 3],
    pub rel_error: [f64; 3],
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10}{:>24}{:>24}{:>14}\n",
            "component", "adjoint", "finite diff", "rel error"
        );
        for (k, name) in ["lambda", "A", "R"].iter().enumerate() {
            s += &format!(
                "{:<10}{:>24.15e}{:>24.15e}{:>14.3e}\n",
                name, self.adjoint[k], self.finite_difference[k], self.rel_error[k]
            );
        }
        s += &format!("max relative error {:.3e}\n", self.max_rel_error);
        s
    }
}

/// Relative error `|a − f| / max(|f|, floor)` with a floor taken from the
/// gradient's overall scale, so a near-zero component is not judged on noise.
pub fn compare(adjoint: [f64; 3], fd: [f64; 3]) -> GradCheckReport {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    let mut rel = [0.0; 3];
    for k in 0..3 {
        rel[k] = (adjoint[k] - fd[k]).abs() / fd[k].abs().max(floor);
    }
    GradCheckReport {
        adjoint,
        finite_difference: fd,
        rel_error: rel,
        max_rel_error: rel.iter().fold(0.0, |m, v| m.max(*v)),
    }
}

/// Compare on an existing instance with the given adjoint method.
pub fn check_problem(
    problem: &CalibrationProblem,
    spec: &GradCheckSpec,
    method: AdjointMethod,
    options: AdjointOptions,
) -> Result<GradCheckReport> {
    let cfg = CalibrationConfig {
        adjoint: method,
        ..spec.calibration_config()
    };
    let adjoint = problem.full_gradient(spec.u_eval, &cfg, options)?;
    let fd = finite_difference_gradient(problem, spec.u_eval, &cfg, spec.fd_step)?;
    Ok(compare(adjoint, fd))
}

pub fn run_gradcheck(spec: &GradCheckSpec, options: AdjointOptions) -> Result<GradCheckReport> {
    check_problem(&random_problem(spec)?, spec, spec.adjoint, options)
}
