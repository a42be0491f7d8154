//! Deterministic nonlinear surrogate of a velocity-tracking legged robot.
//!
//! The closed loop is modelled at the level a navigation stack sees it: body
//! frame velocity commands go in, the base pose and world-frame velocities come
//! out. Velocities follow the rotated command through a first-order lag; the
//! forward channel loses authority while turning (slip), which couples state
//! and command multiplicatively and keeps the plant genuinely nonlinear.

use nalgebra::{Rotation2, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};

/// Lower clamp of the slip factor `1 - κ|ω|`.
const MIN_SLIP_FACTOR: f64 = 0.3;

/// Robot state `[px, py, θ, vx, vy, ω]`; planar velocity is world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl State {
    pub fn to_array(&self) -> [f64; 6] {
        [self.px, self.py, self.theta, self.vx, self.vy, self.omega]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            px: a[0],
            py: a[1],
            theta: a[2],
            vx: a[3],
            vy: a[4],
            omega: a[5],
        }
    }

    pub fn at_pose(pose: &Pose2) -> Self {
        Self {
            px: pose.px,
            py: pose.py,
            theta: pose.theta,
            ..Self::default()
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2 {
            px: self.px,
            py: self.py,
            theta: self.theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Velocity command `[v̂x, v̂y, ω̂]` in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub vhat_x: f64,
    pub vhat_y: f64,
    pub omega_hat: f64,
}

impl Command {
    pub fn new(vhat_x: f64, vhat_y: f64, omega_hat: f64) -> Self {
        Self {
            vhat_x,
            vhat_y,
            omega_hat,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.vhat_x, self.vhat_y, self.omega_hat]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rotates the planar part by `heading`; the turn rate is unchanged.
    ///
    /// Maps a body-frame command into a frame in which the body has the given
    /// heading.
    pub fn rotated(&self, heading: f64) -> Command {
        let v = Rotation2::new(heading) * Vector2::new(self.vhat_x, self.vhat_y);
        Command::new(v.x, v.y, self.omega_hat)
    }
}

/// Per-axis command limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Default for CommandBox {
    fn default() -> Self {
        Self {
            lower: [-1.0, -0.5, -1.0],
            upper: [1.0, 0.5, 1.0],
        }
    }
}

impl CommandBox {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.lower[i] <= self.upper[i]) || !self.lower[i].is_finite() || !self.upper[i].is_finite() {
                return Err(Error::Config(format!(
                    "command box axis {i} has bounds [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, cmd: &Command) -> Command {
        let a = cmd.to_array();
        Command::new(
            a[0].clamp(self.lower[0], self.upper[0]),
            a[1].clamp(self.lower[1], self.upper[1]),
            a[2].clamp(self.lower[2], self.upper[2]),
        )
    }

    pub fn contains(&self, cmd: &Command, tol: f64) -> bool {
        cmd.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] - tol && *v <= self.upper[i] + tol)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Command {
        let mut a = [0.0; 3];
        for (i, v) in a.iter_mut().enumerate() {
            *v = if self.upper[i] > self.lower[i] {
                rng.random_range(self.lower[i]..self.upper[i])
            } else {
                self.lower[i]
            };
        }
        Command::from_array(&a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Integration step (seconds).
    pub dt: f64,
    /// Velocity lag time constant (seconds).
    pub tau_v: f64,
    /// Turn-rate lag time constant (seconds).
    pub tau_omega: f64,
    /// Slip coupling: forward authority is scaled by `1 - kappa·|ω|`.
    pub kappa: f64,
    pub command_box: CommandBox,
    /// Standard deviations of additive velocity noise `[vx, vy, ω]`.
    pub noise_std: Option<[f64; 3]>,
    pub seed: u64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            dt: 0.02,
            tau_v: 0.15,
            tau_omega: 0.10,
            kappa: 0.3,
            command_box: CommandBox::default(),
            noise_std: None,
            seed: 0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("plant dt must be positive, got {}", self.dt)));
        }
        for (name, tau) in [("tau_v", self.tau_v), ("tau_omega", self.tau_omega)] {
            let gain = self.dt / tau;
            if !(gain > 0.0 && gain <= 1.0) {
                return Err(Error::Config(format!("dt/{name} must lie in (0, 1], got {gain}")));
            }
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if let Some(std) = self.noise_std {
            if std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return Err(Error::Config("noise standard deviations must be non-negative".into()));
            }
        }
        self.command_box.validate()
    }

    /// Same parameters with slip and noise disabled.
    ///
    /// With `kappa = 0` the update is linear in the state and the world-rotated
    /// command, so it is exactly representable by an identity-lift model.
    pub fn linearizable_mode(&self) -> PlantParams {
        PlantParams {
            kappa: 0.0,
            noise_std: None,
            ..self.clone()
        }
    }
}

/// Advances the plant by one step of `params.dt`.
///
/// Velocity is updated first and the pose integrates the new velocity.
pub fn step<R: Rng>(state: &State, cmd: &Command, params: &PlantParams, rng: &mut R) -> Result<State> {
    if !state.is_finite() || !cmd.is_finite() {
        return Err(Error::Domain(format!("non-finite plant input: {state:?}, {cmd:?}")));
    }
    let gain_v = params.dt / params.tau_v;
    let gain_w = params.dt / params.tau_omega;

    let slip = (1.0 - params.kappa * state.omega.abs()).clamp(MIN_SLIP_FACTOR, 1.0);
    let target = Rotation2::new(state.theta) * Vector2::new(cmd.vhat_x * slip, cmd.vhat_y);

    let mut vx = state.vx + gain_v * (target.x - state.vx);
    let mut vy = state.vy + gain_v * (target.y - state.vy);
    let mut omega = state.omega + gain_w * (cmd.omega_hat - state.omega);
    if let Some(std) = params.noise_std {
        for (v, s) in [&mut vx, &mut vy, &mut omega].into_iter().zip(std) {
            if s > 0.0 {
                // A finite positive std always yields a valid distribution.
                *v += Normal::new(0.0, s).expect("validated std").sample(rng);
            }
        }
    }

    Ok(State {
        px: state.px + params.dt * vx,
        py: state.py + params.dt * vy,
        theta: wrap(state.theta + params.dt * omega),
        vx,
        vy,
        omega,
    })
}

/// Rolls the plant out from `x0`, drawing noise from a stream seeded by
/// `params.seed`.
pub fn rollout(params: &PlantParams, x0: &State, commands: &[Command]) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rollout_with_rng(params, x0, commands, &mut rng)
}

pub fn rollout_with_rng<R: Rng>(
    params: &PlantParams,
    x0: &State,
    commands: &[Command],
    rng: &mut R,
) -> Result<Trajectory> {
    if commands.is_empty() {
        return Err(Error::Argument("rollout needs at least one command".into()));
    }
    params.validate()?;
    let mut states = Vec::with_capacity(commands.len() + 1);
    states.push(*x0);
    let mut x = *x0;
    for cmd in commands {
        x = step(&x, cmd, params, rng)?;
        states.push(x);
    }
    Trajectory::new(states, commands.to_vec(), params.dt)
}
