//! System identification: lifting dictionaries, least-squares operator
//! fits, the baseline model families, and prediction-error evaluation.

mod dmd;
mod eval;
mod lift;
mod models;

pub use dmd::{fit_snapshots, pinv_symmetric, Gram, DEFAULT_RCOND};
pub use eval::{prediction_error, window_errors, PredictionReport, DEFAULT_HORIZON, DEFAULT_SEQUENCES};
pub use lift::{lift, lift_with_command, LiftSpec, POLY3_DIM};
pub use models::{
    dmd_fit, dmd_fit_trajectories, fit_componentwise, fit_componentwise_trajectories, fit_model, predict,
    AxisModel, ComponentwiseModel, DynamicsModel, FitMode, FitOptions, IntegratorModel, KoopmanModel,
    LinearDynamics, MODEL_FORMAT_VERSION,
};
