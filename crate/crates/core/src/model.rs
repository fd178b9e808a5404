//! Right-hand side of the anisotropic interaction model and its derivatives.
//!
//! Agent `i` with position `x_i`, velocity `v_i` and desired velocity `w_i`
//! obeys
//!
//! ```text
//! x_i' = v_i
//! v_i' = τ (w_i − v_i) + s/N Σ_{j≠i} M(v_i, v_j) K(x_i, x_j)
//! ```
//!
//! where `M` rotates the pairwise force by `α_ij = λ arccos(v̂_i·v̂_j)`, `K` is a
//! Morse-type radial force shifted outward by the body diameter `d`, and the
//! sign `s` is `−1` for the standard model (short-range repulsion). Every
//! function here is pure; the derivative routines feed the adjoint solver and
//! the reduced gradient in [`crate::calibration`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat2, Vec2};

/// Velocities with norm below this are treated as zero (the `else` branch of
/// the rotation angle).
pub const ZERO_VELOCITY: f64 = 1e-12;

/// Relative threshold on `|v_i × v_j| / (‖v_i‖‖v_j‖)` below which two
/// velocities count as parallel and the angle gradient is set to zero.
pub const PARALLEL_TOLERANCE: f64 = 1e-9;

/// Separations below this are rejected as coincident positions.
pub const MIN_SEPARATION: f64 = 1e-12;

/// Sign in front of the interaction sum in the velocity equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionSign {
    /// `v' = τ(w − v) − (1/N) Σ M K`: repulsive at short range.
    #[default]
    Subtract,
    /// `v' = τ(w − v) + (1/N) Σ M K`, the kick exactly as written in the
    /// discrete leap-frog update. Kept for sign-sensitivity experiments.
    Add,
}

impl InteractionSign {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            InteractionSign::Subtract => -1.0,
            InteractionSign::Add => 1.0,
        }
    }
}

/// Physical parameters shared by all agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Collision-avoidance scaling of the rotation angle, `|λ| ≤ 1`.
    pub lambda: f64,
    /// Relaxation rate towards the desired velocity (1/s).
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Attractive amplitude `A`.
    #[serde(rename = "A")]
    pub attraction: f64,
    /// Repulsive amplitude `R`.
    #[serde(rename = "R")]
    pub repulsion: f64,
    /// Attractive range `a` (m).
    #[serde(rename = "a")]
    pub attraction_range: f64,
    /// Repulsive range `r` (m).
    #[serde(rename = "r")]
    pub repulsion_range: f64,
    /// Body diameter `d` (m).
    #[serde(rename = "d")]
    pub diameter: f64,
    #[serde(default)]
    pub sign: InteractionSign,
}

fn default_tau() -> f64 {
    1.0
}

impl ModelParams {
    /// Corridor parameter set of the lane-formation study.
    pub fn lane_study(diameter: f64) -> Self {
        ModelParams {
            lambda: 0.25,
            tau: 1.0,
            attraction: 5.0,
            repulsion: 20.0,
            attraction_range: 2.0,
            repulsion_range: 0.5,
            diameter,
            sign: InteractionSign::Subtract,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.lambda,
            self.tau,
            self.attraction,
            self.repulsion,
            self.attraction_range,
            self.repulsion_range,
            self.diameter,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        if self.attraction_range <= 0.0 || self.repulsion_range <= 0.0 {
            return Err(Error::InvalidParams("ranges a and r must be positive".into()));
        }
        if self.attraction < 0.0 || self.repulsion < 0.0 {
            return Err(Error::InvalidParams("amplitudes A and R must be non-negative".into()));
        }
        if self.diameter < 0.0 {
            return Err(Error::InvalidParams("body diameter must be non-negative".into()));
        }
        if self.lambda.abs() > 1.0 {
            return Err(Error::InvalidParams(format!(
                "|lambda| = {} exceeds 1",
                self.lambda.abs()
            )));
        }
        if self.tau < 0.0 {
            return Err(Error::InvalidParams("tau must be non-negative".into()));
        }
        Ok(())
    }

    pub fn control(&self) -> ControlVector {
        ControlVector {
            lambda: self.lambda,
            attraction: self.attraction,
            repulsion: self.repulsion,
        }
    }

    pub fn with_control(mut self, u: ControlVector) -> Self {
        self.lambda = u.lambda;
        self.attraction = u.attraction;
        self.repulsion = u.repulsion;
        self
    }
}

/// The calibrated parameters `u = (λ, A, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlVector {
    pub lambda: f64,
    #[serde(rename = "A")]
    pub attraction: f64,
    #[serde(rename = "R")]
    pub repulsion: f64,
}

impl ControlVector {
    pub const fn new(lambda: f64, attraction: f64, repulsion: f64) -> Self {
        ControlVector {
            lambda,
            attraction,
            repulsion,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.lambda, self.attraction, self.repulsion]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        ControlVector::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Admissible set `[−1+ε, 1−ε] × [0, A_max] × [0, R_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleBox {
    pub epsilon: f64,
    pub a_max: f64,
    pub r_max: f64,
}

impl Default for AdmissibleBox {
    fn default() -> Self {
        AdmissibleBox {
            epsilon: 1e-3,
            a_max: 100.0,
            r_max: 100.0,
        }
    }
}

impl AdmissibleBox {
    pub fn lower(&self) -> [f64; 3] {
        [-1.0 + self.epsilon, 0.0, 0.0]
    }

    pub fn upper(&self) -> [f64; 3] {
        [1.0 - self.epsilon, self.a_max, self.r_max]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("box epsilon {} not in (0, 1)", self.epsilon)));
        }
        if !(self.a_max > 0.0 && self.r_max > 0.0) {
            return Err(Error::Config("A_max and R_max must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, u: ControlVector) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        u.to_array()
            .iter()
            .zip(lo.iter().zip(hi.iter()))
            .all(|(v, (l, h))| v >= l && v <= h)
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, u: ControlVector) -> ControlVector {
        let (lo, hi) = (self.lower(), self.upper());
        let mut a = u.to_array();
        for k in 0..3 {
            a[k] = a[k].clamp(lo[k], hi[k]);
        }
        ControlVector::from_array(a)
    }
}

#[inline]
fn both_moving(v_i: Vec2, v_j: Vec2) -> bool {
    v_i.norm() >= ZERO_VELOCITY && v_j.norm() >= ZERO_VELOCITY
}

/// `arccos(v̂_i·v̂_j)` with the cosine clamped to `[−1, 1]`, or `None` in the
/// zero-velocity branch.
#[inline]
pub fn heading_angle(v_i: Vec2, v_j: Vec2) -> Option<f64> {
    if !both_moving(v_i, v_j) {
        return None;
    }
    let c = v_i.dot(v_j) / (v_i.norm() * v_j.norm());
    Some(c.clamp(-1.0, 1.0).acos())
}

/// Rotation angle `α_ij = λ arccos(v̂_i·v̂_j)`, zero if either velocity vanishes.
#[inline]
pub fn rotation_angle(v_i: Vec2, v_j: Vec2, lambda: f64) -> f64 {
    heading_angle(v_i, v_j).map_or(0.0, |phi| lambda * phi)
}

/// Rotation `M(v_i, v_j)` by [`rotation_angle`]. Symmetric in its two velocity
/// arguments.
#[inline]
pub fn rotation_matrix(v_i: Vec2, v_j: Vec2, lambda: f64) -> Mat2 {
    Mat2::rotation(rotation_angle(v_i, v_j, lambda))
}

/// `dM/dα` for a rotation by `alpha`.
#[inline]
pub fn rotation_matrix_angle_derivative(alpha: f64) -> Mat2 {
    let (s, c) = alpha.sin_cos();
    Mat2::new(-s, -c, c, -s)
}

/// Radial profile `φ(s) = (A/a) e^{(d−s)/a} − (R/r) e^{(d−s)/r}` of the force.
/// Negative values push agents apart once the model's minus sign is applied.
#[inline]
pub fn radial_coefficient(separation: f64, p: &ModelParams) -> f64 {
    let ea = ((p.diameter - separation) / p.attraction_range).exp();
    let er = ((p.diameter - separation) / p.repulsion_range).exp();
    p.attraction / p.attraction_range * ea - p.repulsion / p.repulsion_range * er
}

/// `dφ/ds`.
#[inline]
pub fn radial_coefficient_derivative(separation: f64, p: &ModelParams) -> f64 {
    let a = p.attraction_range;
    let r = p.repulsion_range;
    let ea = ((p.diameter - separation) / a).exp();
    let er = ((p.diameter - separation) / r).exp();
    -p.attraction / (a * a) * ea + p.repulsion / (r * r) * er
}

#[inline]
fn separation(x_i: Vec2, x_j: Vec2, i: usize, j: usize) -> Result<(f64, Vec2)> {
    let diff = x_i - x_j;
    let s = diff.norm();
    if !(s >= MIN_SEPARATION) {
        return Err(Error::SingularSeparation { i, j });
    }
    Ok((s, diff / s))
}

/// Pairwise force `K(d, x_i, x_j) = φ(‖x_i − x_j‖) (x_i − x_j)/‖x_i − x_j‖`.
pub fn interaction_force(x_i: Vec2, x_j: Vec2, p: &ModelParams) -> Result<Vec2> {
    let (s, e) = separation(x_i, x_j, 0, 1)?;
    Ok(e * radial_coefficient(s, p))
}

/// Jacobian `∂K(x_i, x_j)/∂x_i = φ'(s) e eᵀ + φ(s)/s (I − e eᵀ)` with
/// `e = (x_i − x_j)/s`. Because `K` depends on `x_i − x_j` only and is odd in
/// it, `∂_{x_i}K(x_i,x_j) = −∂_{x_i}K(x_j,x_i)`.
pub fn force_position_jacobian(x_i: Vec2, x_j: Vec2, p: &ModelParams) -> Result<Mat2> {
    let (s, e) = separation(x_i, x_j, 0, 1)?;
    Ok(radial_jacobian(s, e, p))
}

#[inline]
fn radial_jacobian(s: f64, e: Vec2, p: &ModelParams) -> Mat2 {
    let phi = radial_coefficient(s, p);
    let dphi = radial_coefficient_derivative(s, p);
    let eet = Mat2::outer(e, e);
    let tangential = Mat2::IDENTITY + eet.scale(-1.0);
    eet.scale(dphi) + tangential.scale(phi / s)
}

/// Interaction part `s/N Σ_{j≠i} M(v_i,v_j) K(x_i,x_j)` of agent `i`'s
/// acceleration.
pub fn interaction_sum(i: usize, positions: &[Vec2], velocities: &[Vec2], p: &ModelParams) -> Result<Vec2> {
    let n = positions.len();
    let mut acc = Vec2::ZERO;
    for j in 0..n {
        if j == i {
            continue;
        }
        let (s, e) = separation(positions[i], positions[j], i, j)?;
        let k = e * radial_coefficient(s, p);
        acc += rotation_matrix(velocities[i], velocities[j], p.lambda).mul_vec(k);
    }
    Ok(acc * (p.sign.value() / n as f64))
}

/// Acceleration of agent `i`: `τ(w_i − v_i) + s/N Σ_{j≠i} M K`.
pub fn acceleration(
    i: usize,
    positions: &[Vec2],
    velocities: &[Vec2],
    desired: &[Vec2],
    p: &ModelParams,
) -> Result<Vec2> {
    let relax = (desired[i] - velocities[i]) * p.tau;
    Ok(relax + interaction_sum(i, positions, velocities, p)?)
}

/// Interaction sums of all agents at once, visiting each pair a single time
/// (`M_ij = M_ji`, `K_ij = −K_ji`).
pub fn interaction_terms(positions: &[Vec2], velocities: &[Vec2], p: &ModelParams) -> Result<Vec<Vec2>> {
    let n = positions.len();
    let mut out = vec![Vec2::ZERO; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (s, e) = separation(positions[i], positions[j], i, j)?;
            let k = e * radial_coefficient(s, p);
            let mk = rotation_matrix(velocities[i], velocities[j], p.lambda).mul_vec(k);
            out[i] += mk;
            out[j] -= mk;
        }
    }
    let scale = p.sign.value() / n.max(1) as f64;
    for a in &mut out {
        *a = *a * scale;
    }
    Ok(out)
}

/// Gradients of `α(v_i, v_j)` with respect to `v_i` and `v_j`.
///
/// Zero in the zero-velocity branch and when the velocities are (anti)parallel,
/// where `arccos` is not differentiable. Elsewhere `‖∂α/∂v_i‖ = |λ|/‖v_i‖`.
pub fn alpha_velocity_gradient(v_i: Vec2, v_j: Vec2, lambda: f64) -> (Vec2, Vec2) {
    if !both_moving(v_i, v_j) {
        return (Vec2::ZERO, Vec2::ZERO);
    }
    let ni = v_i.norm();
    let nj = v_j.norm();
    let cross = v_i.cross(v_j);
    if cross.abs() < PARALLEL_TOLERANCE * ni * nj {
        return (Vec2::ZERO, Vec2::ZERO);
    }
    // sqrt(‖v_i‖²‖v_j‖² − ⟨v_i,v_j⟩²) = |v_i × v_j|
    let root = cross.abs();
    let dot = v_i.dot(v_j);
    let grad_i = (v_j - v_i * (dot / (ni * ni))) * (-lambda / root);
    let grad_j = (v_i - v_j * (dot / (nj * nj))) * (-lambda / root);
    (grad_i, grad_j)
}

/// The 2×2×2 tensor `∂M(v_i,v_j)/∂v_i` together with its axis-swapped dual.
///
/// `primal[r][c]` is the gradient (over the two components of `v_i`) of the
/// matrix entry `M_rc`. `dual[a][b]` holds `(primal[b][0][a], primal[b][1][a])`,
/// so `dual[a]` read as a 2×2 matrix is `∂M/∂(v_i)_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityGradientTensor {
    pub primal: [[Vec2; 2]; 2],
    pub dual: [[Vec2; 2]; 2],
}

impl VelocityGradientTensor {
    pub const ZERO: VelocityGradientTensor = VelocityGradientTensor {
        primal: [[Vec2::ZERO; 2]; 2],
        dual: [[Vec2::ZERO; 2]; 2],
    };

    pub fn from_primal(primal: [[Vec2; 2]; 2]) -> Self {
        let mut dual = [[Vec2::ZERO; 2]; 2];
        for (a, row) in dual.iter_mut().enumerate() {
            for (b, entry) in row.iter_mut().enumerate() {
                *entry = Vec2::new(primal[b][0].get(a), primal[b][1].get(a));
            }
        }
        VelocityGradientTensor { primal, dual }
    }

    /// Directional derivative `(∂M·h) k` of `v_i ↦ M(v_i, v_j) k` along `h`.
    pub fn apply(&self, k: Vec2, h: Vec2) -> Vec2 {
        let mut out = Vec2::ZERO;
        for r in 0..2 {
            let mut acc = 0.0;
            for c in 0..2 {
                acc += self.primal[r][c].dot(h) * k.get(c);
            }
            out.set(r, acc);
        }
        out
    }

    /// Dual contraction `∂M*·k·ξ`: component `a` is `ξᵀ (∂M/∂(v_i)_a) k`,
    /// i.e. the transpose of [`apply`](Self::apply) in `h`.
    pub fn contract(&self, k: Vec2, xi: Vec2) -> Vec2 {
        let mut out = Vec2::ZERO;
        for a in 0..2 {
            let mut acc = 0.0;
            for b in 0..2 {
                acc += xi.get(b) * self.dual[a][b].dot(k);
            }
            out.set(a, acc);
        }
        out
    }
}

/// `∂M(v_i, v_j)/∂v_i` built from `dM/dα ⊗ ∂α/∂v_i`.
pub fn rotation_velocity_gradient(v_i: Vec2, v_j: Vec2, lambda: f64) -> VelocityGradientTensor {
    let (grad_i, _) = alpha_velocity_gradient(v_i, v_j, lambda);
    if grad_i == Vec2::ZERO {
        return VelocityGradientTensor::ZERO;
    }
    let dm = rotation_matrix_angle_derivative(rotation_angle(v_i, v_j, lambda));
    let mut primal = [[Vec2::ZERO; 2]; 2];
    for (r, row) in primal.iter_mut().enumerate() {
        for (c, entry) in row.iter_mut().enumerate() {
            *entry = grad_i * dm.m[r][c];
        }
    }
    VelocityGradientTensor::from_primal(primal)
}

/// Partial derivatives of agent `i`'s acceleration with respect to
/// `(λ, A, R)`, in that order.
pub fn force_control_derivatives(
    i: usize,
    positions: &[Vec2],
    velocities: &[Vec2],
    p: &ModelParams,
) -> Result<[Vec2; 3]> {
    let n = positions.len();
    let mut d_lambda = Vec2::ZERO;
    let mut d_a = Vec2::ZERO;
    let mut d_r = Vec2::ZERO;
    for j in 0..n {
        if j == i {
            continue;
        }
        let (s, e) = separation(positions[i], positions[j], i, j)?;
        let heading = heading_angle(velocities[i], velocities[j]);
        let alpha = heading.map_or(0.0, |phi| p.lambda * phi);
        let m = Mat2::rotation(alpha);
        let ea = ((p.diameter - s) / p.attraction_range).exp() / p.attraction_range;
        let er = ((p.diameter - s) / p.repulsion_range).exp() / p.repulsion_range;
        if let Some(phi) = heading {
            let k = e * radial_coefficient(s, p);
            d_lambda += rotation_matrix_angle_derivative(alpha).mul_vec(k) * phi;
        }
        let me = m.mul_vec(e);
        d_a += me * ea;
        d_r -= me * er;
    }
    let scale = p.sign.value() / n as f64;
    Ok([d_lambda * scale, d_a * scale, d_r * scale])
}
