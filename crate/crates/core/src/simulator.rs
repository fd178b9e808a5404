//! Time integration of the state system with boundary handling.
//!
//! One step of the integrator is a half drift, an implicit relaxation towards
//! the desired velocity, an explicit interaction kick evaluated at the
//! half-step state, and a second half drift. Boundaries are applied after each
//! step: reflective edges first, then periodic wrap.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, Vec2};
use crate::model::{interaction_terms, ModelParams};
use crate::rng::{rng_for, Stream};

/// Attempts per agent before rejection sampling gives up.
pub const SPAWN_RETRIES: usize = 10_000;

/// Positions and velocities on the uniform grid `t_k = k·dt`, `k = 0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// `positions[k][i]`
    pub positions: Vec<Vec<Vec2>>,
    /// `velocities[k][i]`
    pub velocities: Vec<Vec<Vec2>>,
}

impl Trajectory {
    pub fn new(dt: f64, positions: Vec<Vec2>, velocities: Vec<Vec2>) -> Self {
        Trajectory {
            dt,
            positions: vec![positions],
            velocities: vec![velocities],
        }
    }

    pub fn push(&mut self, positions: Vec<Vec2>, velocities: Vec<Vec2>) {
        self.positions.push(positions);
        self.velocities.push(velocities);
    }

    pub fn n_frames(&self) -> usize {
        self.positions.len()
    }

    /// Number of time steps `K`.
    pub fn steps(&self) -> usize {
        self.n_frames().saturating_sub(1)
    }

    pub fn n_agents(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(self.velocities.iter())
            .all(|frame| frame.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::GridMismatch(format!("dt = {} must be positive", self.dt)));
        }
        if self.velocities.len() != self.positions.len() {
            return Err(Error::GridMismatch(
                "positions and velocities have different frame counts".into(),
            ));
        }
        let n = self.n_agents();
        if self
            .positions
            .iter()
            .chain(self.velocities.iter())
            .any(|frame| frame.len() != n)
        {
            return Err(Error::GridMismatch("inconsistent agent count across frames".into()));
        }
        Ok(())
    }

    /// Check that `other` lives on the same grid with the same agents.
    pub fn check_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.n_frames() != other.n_frames() {
            return Err(Error::GridMismatch(format!(
                "{} frames vs {} frames",
                self.n_frames(),
                other.n_frames()
            )));
        }
        if self.n_agents() != other.n_agents() {
            return Err(Error::GridMismatch(format!(
                "{} agents vs {} agents",
                self.n_agents(),
                other.n_agents()
            )));
        }
        if (self.dt - other.dt).abs() > 1e-12 * self.dt.max(other.dt) {
            return Err(Error::GridMismatch(format!("dt {} vs {}", self.dt, other.dt)));
        }
        Ok(())
    }
}

/// Number of steps the `while t < T` loop takes.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidScenario(format!("time step {dt} must be positive")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidScenario(format!(
            "horizon {horizon} must be non-negative"
        )));
    }
    Ok(((horizon / dt) - 1e-9).ceil().max(0.0) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Outward normal velocity is flipped inwards.
    Reflective,
    /// Agents leaving through this edge re-enter through the opposite one.
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundaries {
    pub left: EdgeKind,
    pub right: EdgeKind,
    pub bottom: EdgeKind,
    pub top: EdgeKind,
}

impl Boundaries {
    /// Walls on top and bottom, periodic in the walking direction.
    pub const CORRIDOR: Boundaries = Boundaries {
        left: EdgeKind::Periodic,
        right: EdgeKind::Periodic,
        bottom: EdgeKind::Reflective,
        top: EdgeKind::Reflective,
    };

    /// Periodic top and bottom, walls left and right.
    pub const VERTICAL_CORRIDOR: Boundaries = Boundaries {
        left: EdgeKind::Reflective,
        right: EdgeKind::Reflective,
        bottom: EdgeKind::Periodic,
        top: EdgeKind::Periodic,
    };

    /// `(lower, upper)` edge kinds along `axis`.
    fn axis(&self, axis: usize) -> (EdgeKind, EdgeKind) {
        if axis == 0 {
            (self.left, self.right)
        } else {
            (self.bottom, self.top)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..2 {
            let (lo, hi) = self.axis(axis);
            if (lo == EdgeKind::Periodic) != (hi == EdgeKind::Periodic) {
                return Err(Error::InvalidScenario(format!(
                    "periodic edges must come in pairs (axis {})",
                    if axis == 0 { "x" } else { "y" }
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub count: usize,
    pub desired: Vec2,
    /// Spawn rectangle; the whole domain when absent.
    #[serde(default)]
    pub spawn: Option<Rect>,
    /// Per-group override of the domain boundaries.
    #[serde(default)]
    pub boundaries: Option<Boundaries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub domain: Rect,
    pub boundaries: Boundaries,
    pub groups: Vec<Group>,
    /// Minimum initial separation between agents (the body diameter).
    pub diameter: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    /// Group index of every agent; agents are numbered group by group.
    pub fn group_of_agents(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| std::iter::repeat_n(g, group.count))
            .collect()
    }

    pub fn desired_velocities(&self) -> Vec<Vec2> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.desired, g.count))
            .collect()
    }

    fn boundaries_of(&self, group: usize) -> Boundaries {
        self.groups[group].boundaries.unwrap_or(self.boundaries)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.domain.is_valid() {
            return Err(Error::InvalidScenario("domain must have positive area".into()));
        }
        if !(self.diameter >= 0.0) {
            return Err(Error::InvalidScenario("body diameter must be non-negative".into()));
        }
        self.boundaries.validate()?;
        for g in &self.groups {
            if let Some(b) = g.boundaries {
                b.validate()?;
            }
            if let Some(spawn) = g.spawn {
                if !spawn.is_valid() || !self.domain.contains_rect(&spawn) {
                    return Err(Error::InvalidScenario(format!(
                        "spawn region of group '{}' must be a non-empty rectangle inside the domain",
                        g.name
                    )));
                }
            }
            if !g.desired.is_finite() {
                return Err(Error::InvalidScenario(format!(
                    "group '{}' has a non-finite desired velocity",
                    g.name
                )));
            }
        }
        Ok(())
    }
}

/// Initial state: uniform positions in each group's spawn region, resampled
/// until every pair is at least one body diameter apart, and velocities equal
/// to the desired velocities.
pub fn init_scenario(scenario: &Scenario) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    scenario.validate()?;
    let mut rng = rng_for(scenario.seed, Stream::Init);
    let mut positions: Vec<Vec2> = Vec::with_capacity(scenario.n_agents());
    let min_sq = scenario.diameter * scenario.diameter;
    for group in &scenario.groups {
        let region = group.spawn.unwrap_or(scenario.domain);
        for agent in 0..group.count {
            let mut placed = false;
            for _ in 0..SPAWN_RETRIES {
                let p = Vec2::new(
                    rng.gen_range(region.x_min..=region.x_max),
                    rng.gen_range(region.y_min..=region.y_max),
                );
                if positions.iter().all(|q| {
                    let d2 = (*q - p).norm_sq();
                    d2 >= min_sq && d2 > 0.0
                }) {
                    positions.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::SpawnFailed {
                    group: group.name.clone(),
                    agent,
                    min_separation: scenario.diameter,
                    attempts: SPAWN_RETRIES,
                });
            }
        }
    }
    Ok((positions, scenario.desired_velocities()))
}

/// One step of the leap-frog variant:
///
/// ```text
/// x' = x + dt/2 v
/// v' = (v + dt τ w) / (1 + dt τ)
/// v⁺ = v' + dt · s/N Σ M(v'_i, v'_j) K(x'_i, x'_j)
/// x⁺ = x' + dt/2 v⁺
/// ```
pub fn leapfrog_step(
    positions: &[Vec2],
    velocities: &[Vec2],
    desired: &[Vec2],
    params: &ModelParams,
    dt: f64,
) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    let half: Vec<Vec2> = positions
        .iter()
        .zip(velocities)
        .map(|(x, v)| *x + *v * (0.5 * dt))
        .collect();
    let relax = 1.0 + dt * params.tau;
    let relaxed: Vec<Vec2> = velocities
        .iter()
        .zip(desired)
        .map(|(v, w)| (*v + *w * (dt * params.tau)) / relax)
        .collect();
    let kick = interaction_terms(&half, &relaxed, params)?;
    let new_v: Vec<Vec2> = relaxed.iter().zip(&kick).map(|(v, f)| *v + *f * dt).collect();
    let new_x = half.iter().zip(&new_v).map(|(x, v)| *x + *v * (0.5 * dt)).collect();
    Ok((new_x, new_v))
}

/// Apply reflective then periodic boundary rules in place.
///
/// A reflective edge flips the wall-normal velocity inwards when the agent is
/// outside or would cross the edge within the next `dt`; an agent already
/// outside is mirrored back in. A periodic edge shifts the agent by the domain
/// extent, keeping its overshoot past the exit edge.
pub fn enforce_boundaries(positions: &mut [Vec2], velocities: &mut [Vec2], scenario: &Scenario, dt: f64) {
    let groups = scenario.group_of_agents();
    let domain = scenario.domain;
    for i in 0..positions.len() {
        let bounds = scenario.boundaries_of(groups.get(i).copied().unwrap_or(0));
        let x = &mut positions[i];
        let v = &mut velocities[i];
        for axis in 0..2 {
            let (lo_kind, hi_kind) = bounds.axis(axis);
            let lo = domain.lower(axis);
            let hi = domain.upper(axis);
            let (mut p, mut u) = (x.get(axis), v.get(axis));
            if hi_kind == EdgeKind::Reflective {
                if p > hi {
                    p = (2.0 * hi - p).max(lo);
                    u = -u.abs();
                } else if u > 0.0 && p + dt * u > hi {
                    u = -u;
                }
            }
            if lo_kind == EdgeKind::Reflective {
                if p < lo {
                    p = (2.0 * lo - p).min(hi);
                    u = u.abs();
                } else if u < 0.0 && p + dt * u < lo {
                    u = -u;
                }
            }
            if lo_kind == EdgeKind::Periodic {
                let width = hi - lo;
                if p > hi {
                    p -= width * ((p - lo) / width).floor();
                } else if p < lo {
                    p += width * ((hi - p) / width).floor();
                }
            }
            x.set(axis, p);
            v.set(axis, u);
        }
    }
}

/// Run the scenario to time `horizon` with boundary handling after each step.
pub fn simulate(scenario: &Scenario, params: &ModelParams, horizon: f64, dt: f64) -> Result<Trajectory> {
    params.validate()?;
    let steps = step_count(horizon, dt)?;
    let (x0, v0) = init_scenario(scenario)?;
    let desired = scenario.desired_velocities();
    let mut traj = Trajectory::new(dt, x0, v0);
    traj.positions.reserve(steps);
    traj.velocities.reserve(steps);
    for k in 0..steps {
        let (mut x, mut v) = leapfrog_step(&traj.positions[k], &traj.velocities[k], &desired, params, dt)?;
        enforce_boundaries(&mut x, &mut v, scenario, dt);
        traj.push(x, v);
    }
    debug!("simulated {} agents for {} steps", scenario.n_agents(), steps);
    Ok(traj)
}

/// Integrate the unbounded state system from a given initial state. This is
/// the control-to-state map used for calibration, where no walls are modeled.
pub fn simulate_free(
    x0: &[Vec2],
    v0: &[Vec2],
    desired: &[Vec2],
    params: &ModelParams,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    simulate_free_steps(x0, v0, desired, params, steps, dt)
}

pub fn simulate_free_steps(
    x0: &[Vec2],
    v0: &[Vec2],
    desired: &[Vec2],
    params: &ModelParams,
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    if x0.len() != v0.len() || x0.len() != desired.len() {
        return Err(Error::GridMismatch(
            "initial state and desired velocities differ in length".into(),
        ));
    }
    let mut traj = Trajectory::new(dt, x0.to_vec(), v0.to_vec());
    for k in 0..steps {
        let (x, v) = leapfrog_step(&traj.positions[k], &traj.velocities[k], desired, params, dt)?;
        traj.push(x, v);
    }
    Ok(traj)
}

/// Count clusters in a set of coordinates: sorted values separated by more
/// than `gap` start a new cluster.
pub fn lane_count(coords: &[f64], gap: f64) -> usize {
    if coords.is_empty() {
        return 0;
    }
    let mut sorted = coords.to_vec();
    sorted.sort_by(f64::total_cmp);
    1 + sorted.windows(2).filter(|w| w[1] - w[0] > gap).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InteractionSign;

    fn free_params() -> ModelParams {
        let mut p = ModelParams::lane_study(0.4);
        p.attraction = 0.0;
        p.repulsion = 0.0;
        p
    }

    fn corridor(seed: u64) -> Scenario {
        Scenario {
            domain: Rect::new(-6.0, 6.0, 0.0, 4.2),
            boundaries: Boundaries::CORRIDOR,
            groups: vec![
                Group {
                    name: "blue".into(),
                    count: 40,
                    desired: Vec2::new(0.7, 0.0),
                    spawn: None,
                    boundaries: None,
                },
                Group {
                    name: "red".into(),
                    count: 40,
                    desired: Vec2::new(-0.7, 0.0),
                    spawn: None,
                    boundaries: None,
                },
            ],
            diameter: 0.2,
            seed,
        }
    }

    #[test]
    fn single_agent_starts_at_desired_velocity() {
        let mut s = corridor(1);
        s.groups.truncate(1);
        s.groups[0].count = 1;
        let (x, v) = init_scenario(&s).unwrap();
        assert_eq!(x.len(), 1);
        assert_eq!(v, vec![Vec2::new(0.7, 0.0)]);
    }

    #[test]
    fn init_is_deterministic_and_separated() {
        let s = corridor(7);
        let (a, _) = init_scenario(&s).unwrap();
        let (b, _) = init_scenario(&s).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert!(s.domain.contains(a[i]));
            for j in (i + 1)..a.len() {
                assert!((a[i] - a[j]).norm() >= 0.2);
            }
        }
        let (c, _) = init_scenario(&corridor(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn overcrowded_spawn_fails() {
        let mut s = corridor(1);
        s.groups[0].spawn = Some(Rect::new(0.0, 0.5, 0.0, 0.5));
        s.diameter = 0.4;
        assert!(matches!(init_scenario(&s), Err(Error::SpawnFailed { .. })));
    }

    #[test]
    fn unpaired_periodic_edge_rejected() {
        let mut s = corridor(1);
        s.boundaries.left = EdgeKind::Reflective;
        assert!(matches!(s.validate(), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn relaxation_from_rest() {
        let dt = 0.00625;
        let (_, v) = leapfrog_step(
            &[Vec2::ZERO],
            &[Vec2::ZERO],
            &[Vec2::new(0.7, 0.0)],
            &ModelParams::lane_study(0.4),
            dt,
        )
        .unwrap();
        let expected = 0.7 * dt / (1.0 + dt);
        assert_eq!(v[0], Vec2::new(expected, 0.0));
        assert!((v[0].x - 0.0043478).abs() < 1e-7);
    }

    #[test]
    fn desired_velocity_is_a_fixed_point() {
        let p = free_params();
        let w = vec![Vec2::new(0.7, 0.0), Vec2::new(-0.3, 0.5)];
        let mut x = vec![Vec2::new(0.0, 0.0), Vec2::new(3.0, 1.0)];
        let mut v = w.clone();
        let dt = 0.01;
        for _ in 0..100 {
            let x_prev = x.clone();
            (x, v) = leapfrog_step(&x, &v, &w, &p, dt).unwrap();
            for i in 0..2 {
                assert!((v[i] - w[i]).norm() < 1e-15);
                assert!((x[i] - (x_prev[i] + w[i] * dt)).norm() < 1e-14);
            }
        }
    }

    /// Stage-by-stage evaluation of the update with a naive pair loop.
    fn step_oracle(x: &[Vec2], v: &[Vec2], w: &[Vec2], p: &ModelParams, dt: f64) -> (Vec<Vec2>, Vec<Vec2>) {
        let n = x.len();
        let mut xh = vec![Vec2::ZERO; n];
        let mut vr = vec![Vec2::ZERO; n];
        for i in 0..n {
            xh[i] = Vec2::new(x[i].x + dt / 2.0 * v[i].x, x[i].y + dt / 2.0 * v[i].y);
            vr[i] = Vec2::new(
                (v[i].x + dt * p.tau * w[i].x) / (1.0 + dt * p.tau),
                (v[i].y + dt * p.tau * w[i].y) / (1.0 + dt * p.tau),
            );
        }
        let mut xn = vec![Vec2::ZERO; n];
        let mut vn = vec![Vec2::ZERO; n];
        for i in 0..n {
            let mut sum = Vec2::ZERO;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = xh[i].x - xh[j].x;
                let dy = xh[i].y - xh[j].y;
                let s = (dx * dx + dy * dy).sqrt();
                let mag = p.attraction / p.attraction_range * ((p.diameter - s) / p.attraction_range).exp()
                    - p.repulsion / p.repulsion_range * ((p.diameter - s) / p.repulsion_range).exp();
                let (kx, ky) = (mag * dx / s, mag * dy / s);
                let (ni, nj) = (vr[i].norm(), vr[j].norm());
                let alpha = if ni > 0.0 && nj > 0.0 {
                    p.lambda
                        * ((vr[i].x * vr[j].x + vr[i].y * vr[j].y) / (ni * nj))
                            .clamp(-1.0, 1.0)
                            .acos()
                } else {
                    0.0
                };
                sum.x += alpha.cos() * kx - alpha.sin() * ky;
                sum.y += alpha.sin() * kx + alpha.cos() * ky;
            }
            let sign = p.sign.value();
            vn[i] = Vec2::new(
                vr[i].x + dt * sign * sum.x / n as f64,
                vr[i].y + dt * sign * sum.y / n as f64,
            );
            xn[i] = Vec2::new(xh[i].x + dt / 2.0 * vn[i].x, xh[i].y + dt / 2.0 * vn[i].y);
        }
        (xn, vn)
    }

    #[test]
    fn step_matches_stage_oracle() {
        let x = vec![Vec2::new(0.1, 0.2), Vec2::new(0.9, -0.3)];
        let v = vec![Vec2::new(0.6, 0.1), Vec2::new(-0.5, 0.3)];
        let w = vec![Vec2::new(0.7, 0.0), Vec2::new(-0.7, 0.0)];
        for sign in [InteractionSign::Subtract, InteractionSign::Add] {
            let mut p = ModelParams::lane_study(0.4);
            p.sign = sign;
            let (xa, va) = leapfrog_step(&x, &v, &w, &p, 0.00625).unwrap();
            let (xb, vb) = step_oracle(&x, &v, &w, &p, 0.00625);
            for i in 0..2 {
                assert!((xa[i] - xb[i]).norm() < 1e-14, "{:?} {:?}", xa[i], xb[i]);
                assert!((va[i] - vb[i]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn periodic_wrap_keeps_overshoot() {
        let s = corridor(1);
        let mut x = vec![Vec2::new(6.01, 2.0)];
        let mut v = vec![Vec2::new(0.7, 0.0)];
        enforce_boundaries(&mut x, &mut v, &s, 0.00625);
        assert!((x[0].x - (-6.0 + 0.01)).abs() < 1e-12);
        assert_eq!(v[0], Vec2::new(0.7, 0.0));
        // a red agent leaving on the left re-enters on the right
        let mut x = vec![Vec2::ZERO; 41];
        let mut v = vec![Vec2::ZERO; 41];
        x[40] = Vec2::new(-6.05, 1.0);
        enforce_boundaries(&mut x, &mut v, &s, 0.00625);
        assert!((x[40].x - 5.95).abs() < 1e-12);
    }

    #[test]
    fn reflective_flips_normal_component() {
        let s = corridor(1);
        let mut x = vec![Vec2::new(0.0, 4.199)];
        let mut v = vec![Vec2::new(0.3, 0.2)];
        enforce_boundaries(&mut x, &mut v, &s, 0.00625);
        assert_eq!(v[0], Vec2::new(0.3, -0.2));
        assert_eq!(x[0], Vec2::new(0.0, 4.199));

        let mut x = vec![Vec2::new(0.0, -0.01)];
        let mut v = vec![Vec2::new(0.3, -0.2)];
        enforce_boundaries(&mut x, &mut v, &s, 0.00625);
        assert!(s.domain.contains(x[0]));
        assert!(v[0].y > 0.0);
    }

    #[test]
    fn interior_inward_agent_untouched() {
        let s = corridor(1);
        let mut x = vec![Vec2::new(1.0, 2.0)];
        let mut v = vec![Vec2::new(0.3, -0.2)];
        enforce_boundaries(&mut x, &mut v, &s, 0.00625);
        assert_eq!((x[0], v[0]), (Vec2::new(1.0, 2.0), Vec2::new(0.3, -0.2)));
    }

    #[test]
    fn zero_horizon_keeps_initial_state_only() {
        let traj = simulate(&corridor(3), &ModelParams::lane_study(0.4), 0.0, 0.00625).unwrap();
        assert_eq!(traj.n_frames(), 1);
        assert_eq!(traj.n_agents(), 80);
    }

    #[test]
    fn free_agents_move_in_straight_lines() {
        let s = Scenario {
            domain: Rect::new(-10.0, 10.0, -10.0, 10.0),
            boundaries: Boundaries::CORRIDOR,
            groups: vec![
                Group {
                    name: "a".into(),
                    count: 1,
                    desired: Vec2::new(0.7, 0.0),
                    spawn: Some(Rect::new(-6.0, -5.0, -1.0, 1.0)),
                    boundaries: None,
                },
                Group {
                    name: "b".into(),
                    count: 1,
                    desired: Vec2::new(0.0, 0.5),
                    spawn: Some(Rect::new(2.0, 3.0, -6.0, -5.0)),
                    boundaries: None,
                },
            ],
            diameter: 0.4,
            seed: 5,
        };
        let dt = 0.00625;
        let traj = simulate(&s, &free_params(), 5.0, dt).unwrap();
        let x0 = traj.positions[0].clone();
        let w = s.desired_velocities();
        for k in 0..traj.n_frames() {
            for i in 0..2 {
                let exact = x0[i] + w[i] * traj.time(k);
                assert!((traj.positions[k][i] - exact).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn step_count_matches_grid() {
        assert_eq!(step_count(35.0, 0.00625).unwrap(), 5600);
        assert_eq!(step_count(8.0, 0.00625).unwrap(), 1280);
        assert_eq!(step_count(0.0, 0.1).unwrap(), 0);
        assert!(step_count(1.0, 0.0).is_err());
    }

    #[test]
    fn lane_count_clusters() {
        assert_eq!(lane_count(&[], 0.2), 0);
        assert_eq!(lane_count(&[0.1, 0.2, 0.25, 1.0, 1.1, 3.0], 0.2), 3);
    }
}
