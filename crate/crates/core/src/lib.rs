//! Learned linear forward models and linear-constraint MPC for safe navigation
//! of velocity-commanded robots.
//!
//! The pipeline is: roll out a closed-loop [`plant`] under random commands,
//! cut the rollouts into localized windows ([`dataset`]), fit lifted linear
//! models by least squares ([`sysid`]), then steer the plant through obstacle
//! maps with an A* reference ([`planner`]) and a receding-horizon QP
//! controller ([`mpc`], [`qp`]) inside the closed-loop harness ([`nav`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod mpc;
pub mod nav;
pub mod planner;
pub mod plant;
pub mod qp;
pub mod sysid;

pub use error::{Error, Result};
pub use geometry::{BodyCircle, ConvexPolytope, Point2, Pose2};
pub use plant::{Command, CommandBox, PlantParams, State};

/// Dimension of the robot state `[px, py, theta, vx, vy, omega]`.
pub const STATE_DIM: usize = 6;
/// Dimension of the velocity command `[vhat_x, vhat_y, omega_hat]`.
pub const COMMAND_DIM: usize = 3;
