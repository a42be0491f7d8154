//! Receding-horizon control with learned lifted linear dynamics.
//!
//! Every solve works in the frame of the current robot pose, which is how the
//! models were trained. The lifted states are eliminated through the
//! dynamics, leaving a QP in the commands alone whose Hessian depends only on
//! the model and the weights; it is factored once per controller. Obstacle
//! clearance is handled by linearizing the signed distance of every body
//! circle about an incumbent trajectory and re-solving for a few rounds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{from_frame, to_frame, wrap, BodyCircle, ConvexPolytope, Point2, Pose2};
use crate::plant::{Command, CommandBox, State};
use crate::qp::{solve_qp_factored, QpFactor, QpProblem, QpSolution};
use crate::sysid::LinearDynamics;
use crate::{COMMAND_DIM, STATE_DIM};

/// Diagonal added to the command Hessian so it stays positive definite.
const REGULARIZATION: f64 = 1e-8;
/// Curvature of the slack variables of a softened solve.
const SLACK_CURVATURE: f64 = 1.0;
/// Rounds stop early once the commands move less than this.
const SQP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon in steps.
    pub horizon: usize,
    /// Step of the prediction model (seconds).
    pub dt: f64,
    /// Tracking weight on the 6-dim state error.
    pub tracking_weight: [[f64; 6]; 6],
    /// Weight on consecutive command differences.
    pub smoothness_weight: [[f64; 3]; 3],
    /// Limits on the body-frame command.
    pub command_box: CommandBox,
    /// Decay rate of the discrete barrier constraint; `None` disables it.
    pub gamma: Option<f64>,
    pub sqp_iters: usize,
    /// Bound on the pose change between rounds (meters and radians).
    pub trust_radius: f64,
    /// Required clearance between body circles and obstacles (meters).
    pub safety_margin: f64,
    /// Plant steps between solves; the first `solve_stride` commands are held.
    pub solve_stride: usize,
    /// Circle/obstacle pairs farther apart than this along the whole
    /// incumbent are left out of the QP (meters).
    pub activation_distance: f64,
    /// Weight of the L1 penalty when clearance constraints are softened.
    pub soft_penalty: f64,
}

fn diag6(d: [f64; 6]) -> [[f64; 6]; 6] {
    let mut m = [[0.0; 6]; 6];
    for i in 0..6 {
        m[i][i] = d[i];
    }
    m
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            dt: 0.02,
            tracking_weight: diag6([10.0, 10.0, 2.0, 0.5, 0.5, 0.5]),
            smoothness_weight: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            command_box: CommandBox::default(),
            gamma: None,
            sqp_iters: 3,
            trust_radius: 0.3,
            safety_margin: 0.02,
            solve_stride: 5,
            activation_distance: 1.0,
            soft_penalty: 1e3,
        }
    }
}

fn to_dmatrix<const N: usize>(m: &[[f64; N]; N]) -> DMatrix<f64> {
    DMatrix::from_fn(N, N, |r, c| m[r][c])
}

fn check_weight(name: &str, m: &DMatrix<f64>, definite: bool) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{name} has non-finite entries")));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    let floor = -1e-12 * m.amax().max(1.0);
    if definite && min_eig <= 0.0 {
        return Err(Error::Config(format!("{name} must be positive definite (min eigenvalue {min_eig})")));
    }
    if min_eig < floor {
        return Err(Error::Config(format!("{name} must be positive semidefinite (min eigenvalue {min_eig})")));
    }
    Ok(())
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("MPC dt must be positive, got {}", self.dt)));
        }
        check_weight("tracking weight", &to_dmatrix(&self.tracking_weight), false)?;
        check_weight("smoothness weight", &to_dmatrix(&self.smoothness_weight), true)?;
        self.command_box.validate()?;
        if let Some(g) = self.gamma {
            check_gamma(g)?;
        }
        if self.sqp_iters == 0 {
            return Err(Error::Config("sqp_iters must be at least 1".into()));
        }
        if !(self.trust_radius > 0.0) || !self.trust_radius.is_finite() {
            return Err(Error::Config(format!("trust radius must be positive, got {}", self.trust_radius)));
        }
        if !(self.safety_margin >= 0.0) || !self.safety_margin.is_finite() {
            return Err(Error::Config(format!("safety margin must be non-negative, got {}", self.safety_margin)));
        }
        if self.solve_stride == 0 || self.solve_stride > self.horizon {
            return Err(Error::Config(format!(
                "solve stride must lie in 1..={}, got {}",
                self.horizon, self.solve_stride
            )));
        }
        if !(self.activation_distance > 0.0) {
            return Err(Error::Config("activation distance must be positive".into()));
        }
        if !(self.soft_penalty > 0.0) || !self.soft_penalty.is_finite() {
            return Err(Error::Config("soft penalty must be positive".into()));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("CBF gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// One receding-horizon instance, expressed in the frame of the current pose.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    /// World pose of the local frame (the current robot pose).
    pub frame: Pose2,
    /// Current state in the local frame (zero pose).
    pub current: State,
    /// Current lifted state.
    pub phi0: DVector<f64>,
    /// Reference states `x̂_1..x̂_H` in the local frame.
    pub reference: Vec<State>,
    /// Obstacles in the local frame.
    pub obstacles: Vec<ConvexPolytope>,
    pub circles: Vec<BodyCircle>,
    /// Incumbent states `x̄_1..x̄_H` for the first linearization.
    pub warm_start: Option<Vec<State>>,
}

/// Heading `theta` shifted by a multiple of 2π to lie within π of `near`.
fn unwrap_near(theta: f64, near: f64) -> f64 {
    near + wrap(theta - near)
}

/// Reference states from `H + 1` local poses (the first being the start):
/// pose `k` with finite-difference velocities, headings unwrapped along the
/// sequence starting near zero.
pub fn reference_states(poses: &[Pose2], dt: f64) -> Vec<State> {
    let mut prev = match poses.first() {
        Some(p) => (p.px, p.py, wrap(p.theta)),
        None => return Vec::new(),
    };
    poses[1..]
        .iter()
        .map(|p| {
            let theta = unwrap_near(p.theta, prev.2);
            let s = State {
                px: p.px,
                py: p.py,
                theta,
                vx: (p.px - prev.0) / dt,
                vy: (p.py - prev.1) / dt,
                omega: (theta - prev.2) / dt,
            };
            prev = (p.px, p.py, theta);
            s
        })
        .collect()
}

fn localize_unwrapped(states: impl Iterator<Item = State>, frame: &Pose2) -> Vec<State> {
    let mut prev = 0.0;
    states
        .map(|s| {
            let mut l = to_frame(&s, frame);
            l.theta = unwrap_near(l.theta, prev);
            prev = l.theta;
            l
        })
        .collect()
}

impl MpcProblem {
    /// Builds the local-frame problem from world-frame inputs.
    ///
    /// `history` is chronological and ends at the current state; `reference`
    /// holds `H + 1` poses starting at the current projection on the path.
    /// A previous solution is shifted by `shift` steps (the steps elapsed
    /// since it was computed), holding its final state over the tail.
    pub fn from_world(
        model: &LinearDynamics,
        history: &[State],
        reference: &[Pose2],
        obstacles: &[ConvexPolytope],
        circles: &[BodyCircle],
        dt: f64,
        previous: Option<(&MpcSolution, usize)>,
    ) -> Result<Self> {
        let current = *history
            .last()
            .ok_or_else(|| Error::Argument("MPC needs the current state".into()))?;
        if reference.len() < 2 {
            return Err(Error::Argument("reference needs at least two poses".into()));
        }
        let frame = current.pose();
        let keep = model.lift.history_len().min(history.len());
        let local_history = localize_unwrapped(history[history.len() - keep..].iter().rev().copied(), &frame);
        let local_history: Vec<State> = local_history.into_iter().rev().collect();
        let phi0 = model.lift(&local_history)?;
        let local_poses: Vec<Pose2> = reference
            .iter()
            .map(|p| {
                let q = frame.point_to_local(&p.position());
                Pose2 {
                    px: q.x,
                    py: q.y,
                    theta: wrap(p.theta - frame.theta),
                }
            })
            .collect();
        let h = reference.len() - 1;
        let warm_start = previous.map(|(sol, shift)| {
            let world = sol.world_states();
            let n = world.len();
            localize_unwrapped((0..h).map(|k| world[(k + shift).min(n - 1)]), &frame)
        });
        Ok(Self {
            frame,
            current: to_frame(&current, &frame),
            phi0,
            reference: reference_states(&local_poses, dt),
            obstacles: obstacles.iter().map(|o| o.to_frame(&frame)).collect(),
            circles: circles.to_vec(),
            warm_start,
        })
    }

    fn validate(&self, lifted_dim: usize, horizon: usize) -> Result<()> {
        if self.phi0.len() != lifted_dim {
            return Err(Error::Argument(format!(
                "lifted state has dimension {}, model expects {lifted_dim}",
                self.phi0.len()
            )));
        }
        if self.reference.len() != horizon {
            return Err(Error::Argument(format!(
                "reference has {} states, horizon is {horizon}",
                self.reference.len()
            )));
        }
        if let Some(w) = &self.warm_start {
            if w.len() != horizon {
                return Err(Error::Argument(format!("warm start has {} states, horizon is {horizon}", w.len())));
            }
        }
        if self.phi0.iter().any(|v| !v.is_finite()) || self.reference.iter().any(|s| !s.is_finite()) {
            return Err(Error::Argument("non-finite MPC input".into()));
        }
        Ok(())
    }
}

/// What a QP row constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    CommandBound,
    TrustRegion,
    Clearance { obstacle: usize, circle: usize },
}

/// `Σ c·x_k + Σ c·u_k >= rhs` over predicted states `x_1..x_H` and commands
/// `u_0..u_{H-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub kind: RowKind,
    pub state_terms: Vec<(usize, [f64; 6])>,
    pub command_terms: Vec<(usize, [f64; 3])>,
    pub rhs: f64,
}

impl LinearRow {
    /// Left-hand side at the given trajectory (`states[k - 1]` is `x_k`).
    pub fn lhs(&self, states: &[State], commands: &[Command]) -> f64 {
        let s: f64 = self
            .state_terms
            .iter()
            .map(|(k, c)| dot(c, &states[k - 1].to_array()))
            .sum();
        let u: f64 = self
            .command_terms
            .iter()
            .map(|(k, c)| dot(c, &commands[*k].to_array()))
            .sum();
        s + u
    }

    /// Step whose slack softens this row, if it is a clearance row.
    fn slack_step(&self) -> Option<usize> {
        match self.kind {
            RowKind::Clearance { .. } => self.state_terms.iter().map(|(k, _)| *k).max(),
            _ => None,
        }
    }
}

fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine model `ĥ(x_k) = offset + gradient · (px, py, θ)_k` of the clearance
/// of one body circle to one obstacle, minus the safety margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearanceTerm {
    pub obstacle: usize,
    pub circle: usize,
    pub step: usize,
    pub offset: f64,
    pub gradient: [f64; 3],
    /// Measured `ĥ` at the current state.
    pub initial: f64,
}

impl ClearanceTerm {
    fn coeffs(&self, scale: f64) -> [f64; 6] {
        [
            scale * self.gradient[0],
            scale * self.gradient[1],
            scale * self.gradient[2],
            0.0,
            0.0,
            0.0,
        ]
    }

    fn kind(&self) -> RowKind {
        RowKind::Clearance {
            obstacle: self.obstacle,
            circle: self.circle,
        }
    }
}

/// Clearance `sd - r` of a circle at `pose` and its gradient with respect
/// to `(px, py, θ)`.
fn circle_clearance(poly: &ConvexPolytope, circle: &BodyCircle, pose: [f64; 3]) -> (f64, [f64; 3]) {
    let (s, c) = pose[2].sin_cos();
    let center = Point2::new(pose[0] + c * circle.offset_x, pose[1] + s * circle.offset_x);
    let sd = poly.signed_distance(&center);
    let g = sd.gradient;
    let dtheta = circle.offset_x * (-g.x * s + g.y * c);
    (sd.distance - circle.radius, [g.x, g.y, dtheta])
}

fn pose_of(s: &State) -> [f64; 3] {
    [s.px, s.py, s.theta]
}

/// Linearized clearances about the incumbent `x̄_1..x̄_H`.
///
/// A circle/obstacle pair is kept for the whole horizon when it comes
/// within `activation` of the obstacle anywhere along the incumbent or at
/// the current state.
pub fn linearize_clearances(
    obstacles: &[ConvexPolytope],
    circles: &[BodyCircle],
    current: &State,
    incumbent: &[State],
    margin: f64,
    activation: f64,
) -> Vec<ClearanceTerm> {
    let mut terms = Vec::new();
    for (i, poly) in obstacles.iter().enumerate() {
        for (c, circle) in circles.iter().enumerate() {
            let (g0, _) = circle_clearance(poly, circle, pose_of(current));
            let lin: Vec<(f64, [f64; 3])> = incumbent
                .iter()
                .map(|s| circle_clearance(poly, circle, pose_of(s)))
                .collect();
            let closest = lin.iter().map(|(g, _)| *g).fold(g0, f64::min);
            if closest > activation {
                continue;
            }
            for (k, ((g, grad), s)) in lin.iter().zip(incumbent).enumerate() {
                let at = pose_of(s);
                let offset = g - margin - dot(grad, &at);
                terms.push(ClearanceTerm {
                    obstacle: i,
                    circle: c,
                    step: k + 1,
                    offset,
                    gradient: *grad,
                    initial: g0 - margin,
                });
            }
        }
    }
    terms
}

/// Plain per-step clearance rows `ĥ(x_k) >= 0`.
pub fn clearance_rows(terms: &[ClearanceTerm]) -> Vec<LinearRow> {
    terms
        .iter()
        .map(|t| LinearRow {
            kind: t.kind(),
            state_terms: vec![(t.step, t.coeffs(1.0))],
            command_terms: Vec::new(),
            rhs: -t.offset,
        })
        .collect()
}

/// Discrete barrier rows `ĥ_{k+1} - γ ĥ_k >= 0`, chained from the measured
/// clearance at the current state: `ĥ_1 >= γ ĥ_0`.
pub fn cbf_tighten(terms: &[ClearanceTerm], gamma: f64) -> Result<Vec<LinearRow>> {
    check_gamma(gamma)?;
    let index: HashMap<(usize, usize, usize), &ClearanceTerm> =
        terms.iter().map(|t| ((t.obstacle, t.circle, t.step), t)).collect();
    terms
        .iter()
        .map(|t| {
            if t.step <= 1 {
                return Ok(LinearRow {
                    kind: t.kind(),
                    state_terms: vec![(t.step, t.coeffs(1.0))],
                    command_terms: Vec::new(),
                    rhs: gamma * t.initial - t.offset,
                });
            }
            let prev = index.get(&(t.obstacle, t.circle, t.step - 1)).ok_or_else(|| {
                Error::Argument(format!(
                    "clearance pair ({}, {}) has no term at step {}",
                    t.obstacle,
                    t.circle,
                    t.step - 1
                ))
            })?;
            Ok(LinearRow {
                kind: t.kind(),
                state_terms: vec![(t.step, t.coeffs(1.0)), (prev.step, prev.coeffs(-gamma))],
                command_terms: Vec::new(),
                rhs: -t.offset + gamma * prev.offset,
            })
        })
        .collect()
}

/// Six rows per step keeping the body-frame command `R(-θ̄_k) u_k` in the
/// box, with the heading taken from the linearization.
fn command_rows(bounds: &CommandBox, headings: &[f64]) -> Vec<LinearRow> {
    let mut rows = Vec::with_capacity(6 * headings.len());
    for (k, theta) in headings.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let axes = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        for (i, a) in axes.iter().enumerate() {
            rows.push(LinearRow {
                kind: RowKind::CommandBound,
                state_terms: Vec::new(),
                command_terms: vec![(k, *a)],
                rhs: bounds.lower[i],
            });
            rows.push(LinearRow {
                kind: RowKind::CommandBound,
                state_terms: Vec::new(),
                command_terms: vec![(k, [-a[0], -a[1], -a[2]])],
                rhs: -bounds.upper[i],
            });
        }
    }
    rows
}

/// Box of half-width `radius` on the pose of every step around `incumbent`.
fn trust_rows(incumbent: &[State], radius: f64) -> Vec<LinearRow> {
    let mut rows = Vec::with_capacity(6 * incumbent.len());
    for (k, s) in incumbent.iter().enumerate() {
        for (i, v) in pose_of(s).iter().enumerate() {
            let mut up = [0.0; 6];
            up[i] = 1.0;
            let mut down = [0.0; 6];
            down[i] = -1.0;
            rows.push(LinearRow {
                kind: RowKind::TrustRegion,
                state_terms: vec![(k + 1, up)],
                command_terms: Vec::new(),
                rhs: v - radius,
            });
            rows.push(LinearRow {
                kind: RowKind::TrustRegion,
                state_terms: vec![(k + 1, down)],
                command_terms: Vec::new(),
                rhs: -v - radius,
            });
        }
    }
    rows
}

/// Options of one QP build.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BuildOptions {
    pub trust_region: bool,
    /// Soften clearance rows with one non-negative slack per step.
    pub soft: bool,
}

/// A convex QP of one round, kept in structured form.
///
/// [`MpcQp::to_dense`] states it over lifted states and commands with the
/// dynamics as equalities; the controller solves the equivalent condensed
/// problem over the commands alone.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcQp {
    pub horizon: usize,
    pub phi0: DVector<f64>,
    /// `x̂_1..x̂_H` as arrays.
    pub reference: Vec<[f64; 6]>,
    pub rows: Vec<LinearRow>,
    pub soft: bool,
    pub soft_penalty: f64,
}

/// Builds the QP of one round linearized about `x̄_1..x̄_H`.
pub fn build_qp(
    model: &LinearDynamics,
    problem: &MpcProblem,
    config: &MpcConfig,
    linearization: &[State],
    options: BuildOptions,
) -> Result<MpcQp> {
    let h = config.horizon;
    problem.validate(model.lifted_dim(), h)?;
    if linearization.len() != h {
        return Err(Error::Argument(format!(
            "linearization has {} states, horizon is {h}",
            linearization.len()
        )));
    }
    let headings: Vec<f64> = std::iter::once(problem.current.theta)
        .chain(linearization[..h - 1].iter().map(|s| s.theta))
        .collect();
    let mut rows = command_rows(&config.command_box, &headings);
    if options.trust_region {
        rows.extend(trust_rows(linearization, config.trust_radius));
    }
    let terms = linearize_clearances(
        &problem.obstacles,
        &problem.circles,
        &problem.current,
        linearization,
        config.safety_margin,
        config.activation_distance,
    );
    match config.gamma {
        Some(gamma) => rows.extend(cbf_tighten(&terms, gamma)?),
        None => rows.extend(clearance_rows(&terms)),
    }
    Ok(MpcQp {
        horizon: h,
        phi0: problem.phi0.clone(),
        reference: problem.reference.iter().map(State::to_array).collect(),
        rows,
        soft: options.soft,
        soft_penalty: config.soft_penalty,
    })
}

/// Adds the smoothness term `Σ_{k<H-1} (u_{k+1}-u_k)^T R (u_{k+1}-u_k)`,
/// scaled by 2, to the command block starting at `offset`.
fn add_smoothness(hess: &mut DMatrix<f64>, offset: usize, horizon: usize, r: &DMatrix<f64>) {
    let m = COMMAND_DIM;
    for k in 0..horizon.saturating_sub(1) {
        let (a, b) = (offset + k * m, offset + (k + 1) * m);
        for i in 0..m {
            for j in 0..m {
                let w = 2.0 * r[(i, j)];
                hess[(a + i, a + j)] += w;
                hess[(b + i, b + j)] += w;
                hess[(a + i, b + j)] -= w;
                hess[(b + i, a + j)] -= w;
            }
        }
    }
}

impl MpcQp {
    pub fn num_slacks(&self) -> usize {
        if self.soft {
            self.horizon
        } else {
            0
        }
    }

    /// The QP over `z = [φ_1..φ_H, u_0..u_{H-1}, s]` with the dynamics as
    /// equality rows.
    pub fn to_dense(&self, model: &LinearDynamics, config: &MpcConfig) -> QpProblem {
        let (h, p, m) = (self.horizon, model.lifted_dim(), COMMAND_DIM);
        let ns = self.num_slacks();
        let (u0, s0) = (p * h, p * h + m * h);
        let n = s0 + ns;
        let weight = to_dmatrix(&config.tracking_weight);
        let mut hess = DMatrix::zeros(n, n);
        let mut lin = DVector::zeros(n);
        for k in 0..h {
            let base = k * p;
            hess.view_mut((base, base), (STATE_DIM, STATE_DIM)).copy_from(&(&weight * 2.0));
            let xr = DVector::from_row_slice(&self.reference[k]);
            lin.rows_mut(base, STATE_DIM).copy_from(&(&weight * xr * -2.0));
        }
        add_smoothness(&mut hess, u0, h, &to_dmatrix(&config.smoothness_weight));
        for i in u0..s0 {
            hess[(i, i)] += REGULARIZATION;
        }
        for i in s0..n {
            hess[(i, i)] = SLACK_CURVATURE;
            lin[i] = self.soft_penalty;
        }

        let mut eq = DMatrix::zeros(p * h, n);
        let mut eq_rhs = DVector::zeros(p * h);
        for k in 0..h {
            let r = k * p;
            eq.view_mut((r, k * p), (p, p)).fill_with_identity();
            if k > 0 {
                eq.view_mut((r, (k - 1) * p), (p, p)).copy_from(&(-&model.a));
            } else {
                eq_rhs.rows_mut(0, p).copy_from(&(&model.a * &self.phi0));
            }
            eq.view_mut((r, u0 + k * m), (p, m)).copy_from(&(-&model.b));
        }

        let nrows = self.rows.len() + ns;
        let mut ineq = DMatrix::zeros(nrows, n);
        let mut ineq_rhs = DVector::zeros(nrows);
        for (r, row) in self.rows.iter().enumerate() {
            for (k, c) in &row.state_terms {
                for (i, v) in c.iter().enumerate() {
                    ineq[(r, (k - 1) * p + i)] += v;
                }
            }
            for (k, c) in &row.command_terms {
                for (i, v) in c.iter().enumerate() {
                    ineq[(r, u0 + k * m + i)] += v;
                }
            }
            if self.soft {
                if let Some(k) = row.slack_step() {
                    ineq[(r, s0 + k - 1)] = 1.0;
                }
            }
            ineq_rhs[r] = row.rhs;
        }
        for j in 0..ns {
            ineq[(self.rows.len() + j, s0 + j)] = 1.0;
        }
        QpProblem::new(hess, lin)
            .with_equalities(eq, eq_rhs)
            .with_inequalities(ineq, ineq_rhs)
    }
}

/// Model quantities that do not change between solves.
#[derive(Debug, Clone)]
struct Condensed {
    /// Block `k - 1` holds `S A^k`.
    free: DMatrix<f64>,
    /// `x = f + Γ U`, block lower triangular with blocks `S A^i B`.
    gamma: DMatrix<f64>,
    /// `P̄ Γ`.
    weighted_gamma: DMatrix<f64>,
    factor: QpFactor,
    soft_factor: QpFactor,
}

impl Condensed {
    fn new(model: &LinearDynamics, config: &MpcConfig) -> Result<Self> {
        let (h, p, m) = (config.horizon, model.lifted_dim(), COMMAND_DIM);
        let mut power = DMatrix::zeros(STATE_DIM, p);
        power.view_mut((0, 0), (STATE_DIM, STATE_DIM)).fill_with_identity();
        let mut markov = Vec::with_capacity(h);
        let mut free = DMatrix::zeros(STATE_DIM * h, p);
        for k in 0..h {
            markov.push(&power * &model.b);
            power = &power * &model.a;
            free.view_mut((k * STATE_DIM, 0), (STATE_DIM, p)).copy_from(&power);
        }
        let mut gamma = DMatrix::zeros(STATE_DIM * h, m * h);
        for k in 0..h {
            for j in 0..=k {
                gamma
                    .view_mut((k * STATE_DIM, j * m), (STATE_DIM, m))
                    .copy_from(&markov[k - j]);
            }
        }
        let weight = to_dmatrix(&config.tracking_weight);
        let mut weighted_gamma = DMatrix::zeros(STATE_DIM * h, m * h);
        for k in 0..h {
            let rows = gamma.view((k * STATE_DIM, 0), (STATE_DIM, m * h));
            weighted_gamma
                .view_mut((k * STATE_DIM, 0), (STATE_DIM, m * h))
                .copy_from(&(&weight * rows));
        }
        let mut hess = gamma.transpose() * &weighted_gamma * 2.0;
        add_smoothness(&mut hess, 0, h, &to_dmatrix(&config.smoothness_weight));
        for i in 0..m * h {
            hess[(i, i)] += REGULARIZATION;
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        if hess.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: 0,
                message: "condensed MPC Hessian is not finite (unstable model?)".into(),
            });
        }
        let factor = QpFactor::new(&hess).map_err(|e| Error::MpcFailure(format!("condensed Hessian: {e}")))?;
        let soft_factor = factor.extended(&vec![SLACK_CURVATURE; h]).map_err(Error::from)?;
        Ok(Self {
            free,
            gamma,
            weighted_gamma,
            factor,
            soft_factor,
        })
    }

    /// Free response `f = [S A^k φ_0]_k`.
    fn free_response(&self, phi0: &DVector<f64>) -> DVector<f64> {
        &self.free * phi0
    }

    /// The condensed QP over `[U, s]`.
    fn condense(&self, qp: &MpcQp, free: &DVector<f64>) -> QpProblem {
        let h = qp.horizon;
        let nu = COMMAND_DIM * h;
        let ns = qp.num_slacks();
        let n = nu + ns;
        let xr = DVector::from_iterator(STATE_DIM * h, qp.reference.iter().flatten().copied());
        let mut lin = DVector::zeros(n);
        lin.rows_mut(0, nu)
            .copy_from(&(self.weighted_gamma.transpose() * (free - xr) * 2.0));
        for i in nu..n {
            lin[i] = qp.soft_penalty;
        }
        let hess = if qp.soft {
            self.soft_factor.hessian().clone()
        } else {
            self.factor.hessian().clone()
        };

        let nrows = qp.rows.len() + ns;
        let mut ineq = DMatrix::zeros(nrows, n);
        let mut rhs = DVector::zeros(nrows);
        for (r, row) in qp.rows.iter().enumerate() {
            let mut b = row.rhs;
            for (k, c) in &row.state_terms {
                let base = (k - 1) * STATE_DIM;
                for (i, v) in c.iter().enumerate() {
                    if *v == 0.0 {
                        continue;
                    }
                    b -= v * free[base + i];
                    let g = self.gamma.row(base + i);
                    // Γ is block lower triangular: only commands 0..k matter.
                    for j in 0..k * COMMAND_DIM {
                        ineq[(r, j)] += v * g[j];
                    }
                }
            }
            for (k, c) in &row.command_terms {
                for (i, v) in c.iter().enumerate() {
                    ineq[(r, k * COMMAND_DIM + i)] += v;
                }
            }
            if qp.soft {
                if let Some(k) = row.slack_step() {
                    ineq[(r, nu + k - 1)] = 1.0;
                }
            }
            rhs[r] = b;
        }
        for j in 0..ns {
            ineq[(qp.rows.len() + j, nu + j)] = 1.0;
        }
        QpProblem::new(hess, lin).with_inequalities(ineq, rhs)
    }

    fn factor(&self, soft: bool) -> &QpFactor {
        if soft {
            &self.soft_factor
        } else {
            &self.factor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// Clearance constraints had to be softened.
    SoftenedFeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::SoftenedFeasible => "softened",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Body-frame commands `u_0..u_{H-1}`, projected onto the command box.
    pub commands: Vec<Command>,
    /// Commands in the local frame, as the model consumes them.
    pub frame_commands: Vec<Command>,
    /// Predicted states `x_1..x_H` in the local frame.
    pub predicted: Vec<State>,
    /// Predicted lifted states `φ_0..φ_H`.
    pub lifted: Vec<DVector<f64>>,
    pub frame: Pose2,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub max_violation: f64,
    /// Largest `|φ_{k+1} - A φ_k - B u_k|_inf` along the prediction.
    pub equality_residual: f64,
    /// Smallest predicted circle clearance (infinite without obstacles).
    pub min_clearance: f64,
    pub rounds: usize,
    pub qp_iterations: usize,
    pub wall_time: f64,
}

impl MpcSolution {
    /// Predicted states in the world frame.
    pub fn world_states(&self) -> Vec<State> {
        self.predicted.iter().map(|s| from_frame(s, &self.frame)).collect()
    }
}

/// Controller for one model and configuration; the condensed Hessian and
/// its factor are computed once.
#[derive(Debug, Clone)]
pub struct MpcController {
    config: MpcConfig,
    model: LinearDynamics,
    condensed: Condensed,
}

struct Round {
    commands: DVector<f64>,
    solution: QpSolution,
    problem: QpProblem,
    rounds: usize,
    iterations: usize,
}

impl MpcController {
    pub fn new(model: LinearDynamics, config: MpcConfig) -> Result<Self> {
        config.validate()?;
        let p = model.lifted_dim();
        if model.a.shape() != (p, p) || model.b.shape() != (p, COMMAND_DIM) || p < STATE_DIM {
            return Err(Error::Argument(format!(
                "model matrices {:?}/{:?} are not a lifted linear system",
                model.a.shape(),
                model.b.shape()
            )));
        }
        let condensed = Condensed::new(&model, &config)?;
        Ok(Self {
            config,
            model,
            condensed,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn model(&self) -> &LinearDynamics {
        &self.model
    }

    /// Predicted states `x_1..x_H` for stacked commands `U`.
    fn states_from(&self, free: &DVector<f64>, u: &DVector<f64>) -> Vec<State> {
        let x = free + &self.condensed.gamma * u;
        x.as_slice().chunks(STATE_DIM).map(State::from_array).collect()
    }

    fn run_sqp(&self, problem: &MpcProblem, free: &DVector<f64>, soft: bool) -> std::result::Result<Round, Error> {
        let cfg = &self.config;
        let nu = COMMAND_DIM * cfg.horizon;
        let mut incumbent = problem.warm_start.clone().unwrap_or_else(|| problem.reference.clone());
        let mut best: Option<Round> = None;
        let mut iterations = 0;
        for round in 0..cfg.sqp_iters {
            let options = BuildOptions {
                trust_region: round > 0,
                soft,
            };
            let qp = build_qp(&self.model, problem, cfg, &incumbent, options)?;
            let condensed = self.condensed.condense(&qp, free);
            let sol = solve_qp_factored(&condensed, self.condensed.factor(soft))?;
            iterations += sol.iterations;
            let u = sol.z.rows(0, nu).into_owned();
            let change = best.as_ref().map_or(f64::INFINITY, |b| (&b.commands - &u).amax());
            incumbent = self.states_from(free, &u);
            best = Some(Round {
                commands: u,
                solution: sol,
                problem: condensed,
                rounds: round + 1,
                iterations,
            });
            if change < SQP_TOLERANCE {
                break;
            }
        }
        Ok(best.expect("at least one round"))
    }

    pub fn solve(&self, problem: &MpcProblem) -> Result<MpcSolution> {
        let start = Instant::now();
        let cfg = &self.config;
        problem.validate(self.model.lifted_dim(), cfg.horizon)?;
        let free = self.condensed.free_response(&problem.phi0);
        let (round, status) = match self.run_sqp(problem, &free, false) {
            Ok(r) => (r, SolveStatus::Optimal),
            Err(first) => match self.run_sqp(problem, &free, true) {
                Ok(r) => (r, SolveStatus::SoftenedFeasible),
                Err(e) => return Err(Error::MpcFailure(format!("{first}; softened retry: {e}"))),
            },
        };

        let h = cfg.horizon;
        let frame_commands: Vec<Command> = round
            .commands
            .as_slice()
            .chunks(COMMAND_DIM)
            .map(Command::from_array)
            .collect();
        let mut lifted = Vec::with_capacity(h + 1);
        lifted.push(problem.phi0.clone());
        let mut equality_residual: f64 = 0.0;
        for u in &frame_commands {
            let uv = Vector2::new(u.vhat_x, u.vhat_y);
            let uvec = DVector::from_row_slice(&[uv.x, uv.y, u.omega_hat]);
            let next = &self.model.a * lifted.last().unwrap() + &self.model.b * &uvec;
            let res = &next - &self.model.a * lifted.last().unwrap() - &self.model.b * &uvec;
            equality_residual = equality_residual.max(res.amax());
            lifted.push(next);
        }
        let predicted: Vec<State> = lifted[1..]
            .iter()
            .map(|phi| State::from_array(phi.rows(0, STATE_DIM).as_slice()))
            .collect();
        let commands = frame_commands
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let heading = if k == 0 { problem.current.theta } else { predicted[k - 1].theta };
                let body = Rotation2::new(-heading) * Vector2::new(u.vhat_x, u.vhat_y);
                cfg.command_box.clamp(&Command::new(body.x, body.y, u.omega_hat))
            })
            .collect();
        let objective = tracking_objective(cfg, &predicted, &problem.reference, &frame_commands);
        let min_clearance = min_clearance(&problem.obstacles, &problem.circles, &predicted);
        Ok(MpcSolution {
            commands,
            frame_commands,
            predicted,
            lifted,
            frame: problem.frame,
            objective,
            status,
            kkt_residual: round.solution.kkt_residual,
            max_violation: round.problem.max_violation(&round.solution.z),
            equality_residual,
            min_clearance,
            rounds: round.rounds,
            qp_iterations: round.iterations,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// `Σ_k |x_k - x̂_k|²_P + Σ_{k<H-1} |u_{k+1} - u_k|²_R`.
pub fn tracking_objective(config: &MpcConfig, states: &[State], reference: &[State], commands: &[Command]) -> f64 {
    let p = &config.tracking_weight;
    let r = &config.smoothness_weight;
    let mut j = 0.0;
    for (x, xr) in states.iter().zip(reference) {
        let (x, xr) = (x.to_array(), xr.to_array());
        let e: Vec<f64> = x.iter().zip(&xr).map(|(a, b)| a - b).collect();
        for a in 0..6 {
            for b in 0..6 {
                j += e[a] * p[a][b] * e[b];
            }
        }
    }
    for w in commands.windows(2) {
        let (u0, u1) = (w[0].to_array(), w[1].to_array());
        let d: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
        for a in 0..3 {
            for b in 0..3 {
                j += d[a] * r[a][b] * d[b];
            }
        }
    }
    j
}

/// Smallest clearance `sd - r` of any circle to any obstacle along `states`.
pub fn min_clearance(obstacles: &[ConvexPolytope], circles: &[BodyCircle], states: &[State]) -> f64 {
    let mut best = f64::INFINITY;
    for s in states {
        for poly in obstacles {
            for c in circles {
                best = best.min(circle_clearance(poly, c, pose_of(s)).0);
            }
        }
    }
    best
}

/// Solves one instance with a freshly built controller.
pub fn solve_mpc(model: &LinearDynamics, problem: &MpcProblem, config: &MpcConfig) -> Result<MpcSolution> {
    MpcController::new(model.clone(), config.clone())?.solve(problem)
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub index: usize,
    pub status: String,
    pub objective: f64,
    pub kkt_residual: f64,
    pub min_clearance: f64,
    pub wall_time: f64,
}

impl SolveRecord {
    pub fn from_solution(index: usize, sol: &MpcSolution) -> Self {
        Self {
            index,
            status: sol.status.to_string(),
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            min_clearance: sol.min_clearance,
            wall_time: sol.wall_time,
        }
    }

    pub fn failed(index: usize, wall_time: f64) -> Self {
        Self {
            index,
            status: "failed".into(),
            objective: f64::NAN,
            kkt_residual: f64::NAN,
            min_clearance: f64::NAN,
            wall_time,
        }
    }
}

pub const SOLVE_TRACE_HEADER: &str = "solve,status,objective,kkt_residual,min_clearance,wall_time";

/// Appends records as CSV rows under [`SOLVE_TRACE_HEADER`].
pub fn write_solve_trace(out: &mut String, records: &[SolveRecord]) {
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index, r.status, r.objective, r.kkt_residual, r.min_clearance, r.wall_time
        )
        .expect("string write");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::solve_qp;
    use crate::sysid::LiftSpec;

    /// Exact identity-lift model of the slip-free plant, expressed in the
    /// frame coordinates the controller uses.
    pub(crate) fn exact_model(dt: f64, tau_v: f64, tau_w: f64) -> LinearDynamics {
        let (gv, gw) = (dt / tau_v, dt / tau_w);
        let mut a = DMatrix::zeros(6, 6);
        let mut b = DMatrix::zeros(6, 3);
        for (p, v, k, g) in [(0, 3, 0, gv), (1, 4, 1, gv), (2, 5, 2, gw)] {
            a[(v, v)] = 1.0 - g;
            b[(v, k)] = g;
            a[(p, p)] = 1.0;
            a[(p, v)] = dt * (1.0 - g);
            b[(p, k)] = dt * g;
        }
        LinearDynamics {
            lift: LiftSpec::Identity,
            a,
            b,
        }
    }

    fn model() -> LinearDynamics {
        exact_model(0.02, 0.15, 0.10)
    }

    fn straight_problem(h: usize, speed: f64, dt: f64) -> MpcProblem {
        let poses: Vec<Pose2> = (0..=h).map(|k| Pose2::new(speed * dt * k as f64, 0.0, 0.0)).collect();
        MpcProblem::from_world(&model(), &[State::default()], &poses, &[], &BodyCircle::default_body(), dt, None)
            .unwrap()
    }

    fn small_config(h: usize) -> MpcConfig {
        MpcConfig {
            horizon: h,
            solve_stride: 1,
            ..MpcConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        let bad = [
            MpcConfig { horizon: 0, ..MpcConfig::default() },
            MpcConfig { gamma: Some(1.0), ..MpcConfig::default() },
            MpcConfig { gamma: Some(-0.1), ..MpcConfig::default() },
            MpcConfig { sqp_iters: 0, ..MpcConfig::default() },
            MpcConfig { solve_stride: 51, ..MpcConfig::default() },
            MpcConfig { smoothness_weight: [[0.0; 3]; 3], ..MpcConfig::default() },
            MpcConfig { tracking_weight: diag6([1.0, 1.0, -1.0, 0.0, 0.0, 0.0]), ..MpcConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn dense_dimensions_for_unit_horizon() {
        let cfg = small_config(1);
        let m = model();
        let prob = straight_problem(1, 0.0, 0.02);
        let qp = build_qp(&m, &prob, &cfg, &prob.reference, BuildOptions::default()).unwrap();
        let dense = qp.to_dense(&m, &cfg);
        assert_eq!(dense.num_vars(), 6 + 3);
        assert_eq!(dense.eq_matrix.nrows(), 6);
        assert_eq!(dense.ineq_matrix.nrows(), 6);
    }

    #[test]
    fn stationary_reference_gives_zero_command() {
        for h in [1, 10] {
            let cfg = small_config(h);
            let prob = straight_problem(h, 0.0, 0.02);
            let sol = solve_mpc(&model(), &prob, &cfg).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            for u in &sol.commands {
                assert!(u.to_array().iter().all(|v| v.abs() < 1e-9), "{u:?}");
            }
        }
    }

    #[test]
    fn condensed_matches_dense() {
        let cfg = small_config(8);
        let m = model();
        let mut prob = straight_problem(8, 0.6, 0.02);
        prob.current.vy = 0.2;
        prob.phi0 = DVector::from_row_slice(&prob.current.to_array());
        let obstacle = ConvexPolytope::rectangle(Point2::new(0.3, -1.0), Point2::new(0.6, -0.26)).unwrap();
        prob.obstacles = vec![obstacle];
        for soft in [false, true] {
            let qp = build_qp(&m, &prob, &cfg, &prob.reference, BuildOptions { trust_region: true, soft }).unwrap();
            let ctrl = MpcController::new(m.clone(), cfg.clone()).unwrap();
            let free = ctrl.condensed.free_response(&prob.phi0);
            let cond = ctrl.condensed.condense(&qp, &free);
            let a = solve_qp_factored(&cond, ctrl.condensed.factor(soft)).unwrap();
            let dense = qp.to_dense(&m, &cfg);
            let b = solve_qp(&dense).unwrap();
            let nu = 3 * 8;
            let bu = b.z.rows(6 * 8, nu);
            assert!((a.z.rows(0, nu) - bu).amax() < 1e-7, "soft={soft}");
            assert!(b.kkt_residual < 1e-6 && a.kkt_residual < 1e-6);
        }
    }

    #[test]
    fn touching_circle_gives_unit_gradient_row() {
        let cfg = MpcConfig {
            horizon: 1,
            solve_stride: 1,
            ..MpcConfig::default()
        };
        let m = model();
        let circle = BodyCircle::new(0.0, 0.25).unwrap();
        // Wall face at y = 0.27: clearance of the circle at the origin is 0.02.
        let wall = ConvexPolytope::rectangle(Point2::new(-1.0, 0.27), Point2::new(1.0, 1.0)).unwrap();
        let mut prob = straight_problem(1, 0.0, 0.02);
        prob.obstacles = vec![wall];
        prob.circles = vec![circle];
        let qp = build_qp(&m, &prob, &cfg, &prob.reference, BuildOptions::default()).unwrap();
        let clear: Vec<&LinearRow> = qp
            .rows
            .iter()
            .filter(|r| matches!(r.kind, RowKind::Clearance { .. }))
            .collect();
        assert_eq!(clear.len(), 1);
        let c = clear[0].state_terms[0].1;
        assert!(((c[0] * c[0] + c[1] * c[1]).sqrt() - 1.0).abs() < 1e-12);
        let lhs = clear[0].lhs(&prob.reference, &[Command::default()]);
        assert!((lhs - clear[0].rhs).abs() < 1e-12, "row should be active");
    }

    #[test]
    fn cbf_geometric_bound() {
        // Scalar chain with unit gradients: ĥ_k = x_k, offset 0, ĥ_0 = 1.
        let terms: Vec<ClearanceTerm> = (1..=6)
            .map(|k| ClearanceTerm {
                obstacle: 0,
                circle: 0,
                step: k,
                offset: 0.0,
                gradient: [1.0, 0.0, 0.0],
                initial: 1.0,
            })
            .collect();
        let rows = cbf_tighten(&terms, 0.6).unwrap();
        let at = |h: &[f64]| -> Vec<State> { h.iter().map(|v| State { px: *v, ..State::default() }).collect() };
        let tight: Vec<f64> = (1..=6).map(|k| 0.6f64.powi(k)).collect();
        let states = at(&tight);
        for r in &rows {
            assert!((r.lhs(&states, &[]) - r.rhs).abs() < 1e-12);
        }
        for k in 0..6 {
            let mut lower = tight.clone();
            lower[k] -= 1e-9;
            let states = at(&lower);
            assert!(rows.iter().any(|r| r.lhs(&states, &[]) < r.rhs), "step {k}");
        }
        assert!(matches!(cbf_tighten(&terms, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn cbf_with_zero_gamma_is_plain() {
        let terms: Vec<ClearanceTerm> = (1..=4)
            .map(|k| ClearanceTerm {
                obstacle: 0,
                circle: 1,
                step: k,
                offset: 0.1 * k as f64,
                gradient: [0.6, -0.8, 0.1],
                initial: 0.3,
            })
            .collect();
        let plain = clearance_rows(&terms);
        let cbf = cbf_tighten(&terms, 0.0).unwrap();
        let states: Vec<State> = (0..4)
            .map(|k| State::from_array(&[0.1 * k as f64, -0.3, 0.2 * k as f64, 0.0, 0.0, 0.0]))
            .collect();
        for (a, b) in plain.iter().zip(&cbf) {
            assert!((a.lhs(&states, &[]) - b.lhs(&states, &[])).abs() < 1e-15);
            assert_eq!(a.rhs, b.rhs);
        }
    }

    #[test]
    fn straight_line_tracking() {
        let cfg = MpcConfig::default();
        let prob = straight_problem(50, 0.5, 0.02);
        let sol = solve_mpc(&model(), &prob, &cfg).unwrap();
        let last = sol.predicted.last().unwrap();
        assert!(((last.px - 0.5).powi(2) + last.py.powi(2)).sqrt() <= 0.2);
        assert!(sol.equality_residual <= 1e-8);
        assert!(sol.kkt_residual <= 1e-6);
        assert!(sol.commands.iter().all(|u| cfg.command_box.contains(u, 1e-9)));
    }

    #[test]
    fn detours_around_obstacle() {
        let cfg = MpcConfig {
            sqp_iters: 6,
            ..MpcConfig::default()
        };
        // Block straddling the straight reference ahead.
        let block = ConvexPolytope::rectangle(Point2::new(0.7, -0.1), Point2::new(0.9, 0.3)).unwrap();
        let poses: Vec<Pose2> = (0..=50).map(|k| Pose2::new(0.03 * k as f64, 0.0, 0.0)).collect();
        let prob = MpcProblem::from_world(
            &model(),
            &[State::default()],
            &poses,
            std::slice::from_ref(&block),
            &BodyCircle::default_body(),
            0.02,
            None,
        )
        .unwrap();
        let plain = min_clearance(&[block], &BodyCircle::default_body(), &prob.reference);
        assert!(plain < 0.0, "reference should cross the obstacle");
        let sol = solve_mpc(&model(), &prob, &cfg).unwrap();
        assert!(sol.min_clearance >= -1e-6, "{}", sol.min_clearance);
    }

    #[test]
    fn warm_start_is_idempotent() {
        let cfg = MpcConfig {
            sqp_iters: 30,
            ..MpcConfig::default()
        };
        let block = ConvexPolytope::rectangle(Point2::new(0.5, 0.3), Point2::new(0.9, 0.8)).unwrap();
        let poses: Vec<Pose2> = (0..=50).map(|k| Pose2::new(0.02 * k as f64, 0.02 * k as f64, 0.8)).collect();
        let history = [State {
            vx: 0.3,
            ..State::default()
        }];
        let circles = BodyCircle::default_body();
        let prob =
            MpcProblem::from_world(&model(), &history, &poses, &[block.clone()], &circles, 0.02, None).unwrap();
        let ctrl = MpcController::new(model(), cfg).unwrap();
        let first = ctrl.solve(&prob).unwrap();
        let again = MpcProblem::from_world(
            &model(),
            &history,
            &poses,
            &[block],
            &circles,
            0.02,
            Some((&first, 0)),
        )
        .unwrap();
        let second = ctrl.solve(&again).unwrap();
        for (a, b) in first.frame_commands.iter().zip(&second.frame_commands) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn reference_velocities_and_unwrapping() {
        let poses = [
            Pose2::new(0.0, 0.0, 3.1),
            Pose2::new(0.01, 0.0, -3.1),
            Pose2::new(0.02, 0.0, -3.0),
        ];
        let r = reference_states(&poses, 0.02);
        assert_eq!(r.len(), 2);
        assert!((r[0].vx - 0.5).abs() < 1e-12);
        assert!(r[0].theta > 3.1 && r[1].theta > r[0].theta);
        assert!((r[0].omega - (2.0 * std::f64::consts::PI - 6.2) / 0.02).abs() < 1e-9);
    }

    #[test]
    fn problem_dimension_errors() {
        let cfg = small_config(5);
        let mut prob = straight_problem(5, 0.1, 0.02);
        prob.phi0 = DVector::zeros(7);
        assert!(matches!(solve_mpc(&model(), &prob, &cfg), Err(Error::Argument(_))));
        let prob = straight_problem(4, 0.1, 0.02);
        assert!(matches!(solve_mpc(&model(), &prob, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn solve_trace_rows() {
        let prob = straight_problem(10, 0.2, 0.02);
        let sol = solve_mpc(&model(), &prob, &small_config(10)).unwrap();
        let mut out = String::from(SOLVE_TRACE_HEADER);
        out.push('\n');
        write_solve_trace(&mut out, &[SolveRecord::from_solution(0, &sol), SolveRecord::failed(1, 0.0)]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,optimal,"));
        assert!(lines[2].starts_with("1,failed,NaN"));
    }
}
