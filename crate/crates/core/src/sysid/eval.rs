//! Multi-step prediction error over sampled validation windows.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::DynamicsModel;
use crate::dataset::{window_at, Trajectory, WindowRef};
use crate::error::{Error, Result};
use crate::geometry::wrap;
use crate::STATE_DIM;

/// Default number of sampled windows and prediction horizon.
pub const DEFAULT_SEQUENCES: usize = 10_000;
pub const DEFAULT_HORIZON: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub model: String,
    pub horizon: usize,
    pub samples: usize,
    /// `mean[k][i]`: mean absolute error of state entry `i` at step `k + 1`.
    pub mean: Vec<[f64; STATE_DIM]>,
    pub std: Vec<[f64; STATE_DIM]>,
    pub aggregate_mean: f64,
    pub aggregate_std: f64,
}

impl PredictionReport {
    /// Mean over states and the given (1-based, inclusive) steps.
    pub fn mean_over_steps(&self, steps: RangeInclusive<usize>) -> f64 {
        let (lo, hi) = (*steps.start(), *steps.end());
        assert!(lo >= 1 && hi <= self.horizon && lo <= hi, "step range out of bounds");
        let total: f64 = self.mean[lo - 1..hi].iter().flatten().sum();
        total / ((hi - lo + 1) * STATE_DIM) as f64
    }

    /// `step,state_index,mean_abs_err,std_abs_err` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,state_index,mean_abs_err,std_abs_err\n");
        for (k, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            for i in 0..STATE_DIM {
                writeln!(out, "{},{},{},{}", k + 1, i, m[i], s[i]).expect("string write");
            }
        }
        out
    }

    /// `mean(±std)` with two decimals.
    pub fn summary_cell(&self) -> String {
        format!("{:.2}(±{:.2})", self.aggregate_mean, self.aggregate_std)
    }
}

/// Absolute errors `|x_hat_k - x_k|` for steps `1..=horizon` of one window.
///
/// A model consuming `n` history states takes the first `n` states of the
/// window as observed history, so its errors at steps `1..n` are zero.
pub fn window_errors(
    model: &DynamicsModel,
    traj: &Trajectory,
    window: WindowRef,
    horizon: usize,
) -> Result<Vec<[f64; STATE_DIM]>> {
    let hist_len = model.history_len();
    if horizon == 0 || hist_len > horizon {
        return Err(Error::Argument(format!(
            "horizon {horizon} is too short for a model consuming {hist_len} states"
        )));
    }
    let w = window_at(traj, window.start, horizon)?;
    let current = hist_len - 1;
    let predicted = model.predict(&w.states[..hist_len], &w.commands[current..])?;
    let mut errors = vec![[0.0; STATE_DIM]; horizon];
    for (offset, pred) in predicted.iter().enumerate() {
        let step = current + offset + 1;
        let truth = w.states[step].to_array();
        let pred = pred.to_array();
        let e = &mut errors[step - 1];
        for i in 0..STATE_DIM {
            e[i] = if i == 2 {
                wrap(pred[i] - truth[i]).abs()
            } else {
                (pred[i] - truth[i]).abs()
            };
        }
    }
    Ok(errors)
}

/// Per-step, per-state error statistics of `model` over the sampled windows.
pub fn prediction_error(
    model: &DynamicsModel,
    trajectories: &[Trajectory],
    windows: &[WindowRef],
    horizon: usize,
) -> Result<PredictionReport> {
    if windows.is_empty() {
        return Err(Error::Argument("prediction error needs at least one window".into()));
    }
    if let Some(t) = trajectories.first() {
        if (t.dt - model.dt()).abs() > 1e-12 {
            return Err(Error::Argument(format!(
                "model dt {} does not match dataset dt {}",
                model.dt(),
                t.dt
            )));
        }
    }
    let per_window: Vec<Vec<[f64; STATE_DIM]>> = windows
        .par_iter()
        .map(|w| {
            let traj = trajectories
                .get(w.trajectory)
                .ok_or_else(|| Error::Argument(format!("window references missing trajectory {}", w.trajectory)))?;
            window_errors(model, traj, *w, horizon)
        })
        .collect::<Result<_>>()?;

    let n = per_window.len() as f64;
    let mut mean = vec![[0.0; STATE_DIM]; horizon];
    for errs in &per_window {
        for (m, e) in mean.iter_mut().zip(errs) {
            for i in 0..STATE_DIM {
                m[i] += e[i];
            }
        }
    }
    for m in &mut mean {
        for v in m.iter_mut() {
            *v /= n;
        }
    }
    let mut var = vec![[0.0; STATE_DIM]; horizon];
    for errs in &per_window {
        for ((v, e), m) in var.iter_mut().zip(errs).zip(&mean) {
            for i in 0..STATE_DIM {
                v[i] += (e[i] - m[i]).powi(2);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let mut s = [0.0; STATE_DIM];
            for i in 0..STATE_DIM {
                s[i] = (v[i] / n).sqrt();
            }
            s
        })
        .collect();

    let count = n * (horizon * STATE_DIM) as f64;
    let aggregate_mean = mean.iter().flatten().sum::<f64>() / (horizon * STATE_DIM) as f64;
    let aggregate_var = per_window
        .iter()
        .flatten()
        .flatten()
        .map(|e| (e - aggregate_mean).powi(2))
        .sum::<f64>()
        / count;
    Ok(PredictionReport {
        model: model.name(),
        horizon,
        samples: per_window.len(),
        mean,
        std,
        aggregate_mean,
        aggregate_std: aggregate_var.sqrt(),
    })
}
