//! Fitted dynamics models, multi-step prediction and model files.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dmd::{Gram, DEFAULT_RCOND};
use super::lift::{lift_at, LiftSpec};
use crate::dataset::{sha256_hex, window_at, Trajectory, WindowSequence};
use crate::error::{Error, Result};
use crate::plant::{Command, State};
use crate::{COMMAND_DIM, STATE_DIM};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Whether the command rows `[C D]` of the operator are fitted as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Targets are `[phi(x_{t+1}); u_{t+1}]`.
    #[default]
    Full,
    /// Targets are `phi(x_{t+1})` only.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub rcond: f64,
    pub mode: FitMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rcond: DEFAULT_RCOND,
            mode: FitMode::Full,
        }
    }
}

/// `K = [A B; C D]` acting on `[phi(x); u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub lift: LiftSpec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub dt: f64,
    /// `J(K)` per transition over every fitted row.
    pub fit_residual: f64,
    /// Mean squared one-step error over the state and command rows only.
    pub base_residual: f64,
    /// `|K Y - X|_F / max(1, |X|_F)` at the solution.
    pub normal_residual: f64,
    pub pairs: usize,
    pub dataset_hash: Option<String>,
}

/// One decoupled axis: `[p, v]_{t+1} = A [p, v]_t + B u_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisModel {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

/// Three per-axis models for `(px, vx)`, `(py, vy)` and `(theta, omega)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentwiseModel {
    pub axes: [AxisModel; 3],
    pub dt: f64,
    pub residuals: [f64; 3],
    pub normal_residuals: [f64; 3],
    pub dataset_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorModel {
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    Koopman(KoopmanModel),
    Componentwise(ComponentwiseModel),
    Integrator(IntegratorModel),
}

/// Linear lifted dynamics `phi' = A phi + B u` with `x = phi[0..6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub lift: LiftSpec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn lift(&self, history: &[State]) -> Result<DVector<f64>> {
        match self.lift {
            LiftSpec::Componentwise | LiftSpec::Integrator => super::lift::lift(&LiftSpec::Identity, history),
            spec => super::lift::lift(&spec, history),
        }
    }
}

const AXES: [(usize, usize, usize); 3] = [(0, 3, 0), (1, 4, 1), (2, 5, 2)];

fn axis_linear(axes: &[AxisModel; 3]) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    let mut b = DMatrix::zeros(STATE_DIM, COMMAND_DIM);
    for (m, &(p, v, u)) in axes.iter().zip(&AXES) {
        let idx = [p, v];
        for r in 0..2 {
            for c in 0..2 {
                a[(idx[r], idx[c])] = m.a[(r, c)];
            }
            b[(idx[r], u)] = m.b[r];
        }
    }
    (a, b)
}

impl IntegratorModel {
    pub fn axes(&self) -> [AxisModel; 3] {
        let h = self.dt / 2.0;
        let m = AxisModel {
            a: Matrix2::new(1.0, h, 0.0, 0.0),
            b: Vector2::new(h, 1.0),
        };
        [m; 3]
    }
}

impl DynamicsModel {
    pub fn lift_spec(&self) -> LiftSpec {
        match self {
            DynamicsModel::Koopman(m) => m.lift,
            DynamicsModel::Componentwise(_) => LiftSpec::Componentwise,
            DynamicsModel::Integrator(_) => LiftSpec::Integrator,
        }
    }

    pub fn name(&self) -> String {
        self.lift_spec().family_name()
    }

    pub fn dt(&self) -> f64 {
        match self {
            DynamicsModel::Koopman(m) => m.dt,
            DynamicsModel::Componentwise(m) => m.dt,
            DynamicsModel::Integrator(m) => m.dt,
        }
    }

    pub fn history_len(&self) -> usize {
        self.lift_spec().history_len()
    }

    pub fn dataset_hash(&self) -> Option<&str> {
        match self {
            DynamicsModel::Koopman(m) => m.dataset_hash.as_deref(),
            DynamicsModel::Componentwise(m) => m.dataset_hash.as_deref(),
            DynamicsModel::Integrator(_) => None,
        }
    }

    /// The model as lifted linear dynamics for the controller.
    pub fn to_linear(&self) -> LinearDynamics {
        match self {
            DynamicsModel::Koopman(m) => LinearDynamics {
                lift: m.lift,
                a: m.a.clone(),
                b: m.b.clone(),
            },
            DynamicsModel::Componentwise(m) => {
                let (a, b) = axis_linear(&m.axes);
                LinearDynamics {
                    lift: LiftSpec::Componentwise,
                    a,
                    b,
                }
            }
            DynamicsModel::Integrator(m) => {
                let (a, b) = axis_linear(&m.axes());
                LinearDynamics {
                    lift: LiftSpec::Integrator,
                    a,
                    b,
                }
            }
        }
    }

    /// Predicts `x_1..x_H` from a chronological history ending at `x_0`.
    pub fn predict(&self, history: &[State], commands: &[Command]) -> Result<Vec<State>> {
        if history.is_empty() || commands.is_empty() {
            return Err(Error::Argument("prediction needs a non-empty history and command list".into()));
        }
        match self {
            DynamicsModel::Koopman(m) => predict_koopman(m, history, commands),
            DynamicsModel::Componentwise(m) => Ok(predict_axes(&m.axes, history, commands)),
            DynamicsModel::Integrator(m) => Ok(predict_axes(&m.axes(), history, commands)),
        }
    }
}

pub fn predict(model: &DynamicsModel, history: &[State], commands: &[Command]) -> Result<Vec<State>> {
    model.predict(history, commands)
}

fn predict_axes(axes: &[AxisModel; 3], history: &[State], commands: &[Command]) -> Vec<State> {
    let mut x = history[history.len() - 1].to_array();
    let mut out = Vec::with_capacity(commands.len());
    for cmd in commands {
        let u = cmd.to_array();
        let mut next = [0.0; STATE_DIM];
        for (m, &(p, v, k)) in axes.iter().zip(&AXES) {
            let z = m.a * Vector2::new(x[p], x[v]) + m.b * u[k];
            next[p] = z[0];
            next[v] = z[1];
        }
        x = next;
        out.push(State::from_array(&x));
    }
    out
}

fn predict_koopman(m: &KoopmanModel, history: &[State], commands: &[Command]) -> Result<Vec<State>> {
    let p = m.lift.lifted_dim();
    if m.a.shape() != (p, p) || m.b.shape() != (p, COMMAND_DIM) {
        return Err(Error::Argument(format!(
            "model matrices {:?}/{:?} do not match lift {}",
            m.a.shape(),
            m.b.shape(),
            m.lift
        )));
    }
    let mut out = Vec::with_capacity(commands.len());
    match m.lift {
        LiftSpec::TimeDelay(n) => {
            // Shift register: only the newest state is predicted; older
            // slots are the previously predicted or observed states.
            let mut hist: Vec<State> = history.to_vec();
            let mut z = vec![0.0; p];
            for cmd in commands {
                lift_at(&m.lift, &hist, hist.len() - 1, &mut z);
                let u = cmd.to_array();
                let mut x = [0.0; STATE_DIM];
                for (r, xr) in x.iter_mut().enumerate() {
                    let row = m.a.row(r);
                    let mut acc = 0.0;
                    for (c, zc) in z.iter().enumerate() {
                        acc += row[c] * zc;
                    }
                    for (c, uc) in u.iter().enumerate() {
                        acc += m.b[(r, c)] * uc;
                    }
                    *xr = acc;
                }
                let s = State::from_array(&x);
                out.push(s);
                hist.push(s);
                if hist.len() > n {
                    hist.remove(0);
                }
            }
        }
        spec => {
            let mut z = DVector::zeros(p);
            lift_at(&spec, history, history.len() - 1, z.as_mut_slice());
            let mut next = DVector::zeros(p);
            for cmd in commands {
                let u = DVector::from_row_slice(&cmd.to_array());
                next.gemv(1.0, &m.a, &z, 0.0);
                next.gemv(1.0, &m.b, &u, 1.0);
                std::mem::swap(&mut z, &mut next);
                out.push(State::from_array(&z.as_slice()[..STATE_DIM]));
            }
        }
    }
    Ok(out)
}

/// Lifted snapshots `psi_t = [phi(x_t); u_t]` of a window as columns,
/// `t = 0..=H`; the final column has no command.
fn window_snapshots(spec: &LiftSpec, w: &WindowSequence) -> DMatrix<f64> {
    let p = spec.lifted_dim();
    let q = p + COMMAND_DIM;
    let h = w.len();
    let mut psi = DMatrix::zeros(q, h + 1);
    for t in 0..=h {
        let mut col = psi.column_mut(t);
        let col = col.as_mut_slice();
        lift_at(spec, &w.states, t, &mut col[..p]);
        if let Some(u) = w.commands.get(t) {
            col[p..].copy_from_slice(&u.to_array());
        }
    }
    psi
}

/// Transitions of a length-`h` window used by a fit: a full fit needs the
/// successor command, so it skips the last one.
fn pair_count(h: usize, mode: FitMode) -> usize {
    match mode {
        FitMode::Full => h.saturating_sub(1),
        FitMode::Reduced => h,
    }
}

fn target_rows(spec: &LiftSpec, mode: FitMode) -> usize {
    let p = spec.lifted_dim();
    match mode {
        FitMode::Full => p + COMMAND_DIM,
        FitMode::Reduced => p,
    }
}

/// Adds the fitted transitions of one window to the Gram sums, using dense
/// products.
fn accumulate_generic(spec: &LiftSpec, w: &WindowSequence, mode: FitMode, gram: &mut Gram) -> Result<()> {
    let pairs = pair_count(w.len(), mode);
    if pairs == 0 {
        return Ok(());
    }
    let psi = window_snapshots(spec, w);
    let rows = target_rows(spec, mode);
    let sources: DMatrixView<f64> = psi.columns(0, pairs);
    let targets: DMatrixView<f64> = psi.view((0, 1), (rows, pairs));
    gram.add_columns(targets, sources, gram.pairs)
}

/// Time-delay specialization of [`accumulate_generic`].
///
/// Consecutive delay blocks are shifted copies of each other, so every
/// source block `(i+1, j+1)` follows from block `(i, j)` by adding the
/// first-state term that enters and removing the last-state term that
/// leaves the sum.
fn accumulate_time_delay(n: usize, w: &WindowSequence, mode: FitMode, gram: &mut Gram) -> Result<()> {
    let pairs = pair_count(w.len(), mode);
    if pairs == 0 {
        return Ok(());
    }
    let s: Vec<[f64; STATE_DIM]> = w.states.iter().map(State::to_array).collect();
    let u: Vec<[f64; COMMAND_DIM]> = w.commands.iter().map(Command::to_array).collect();
    if s.iter().flatten().chain(u.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index: gram.pairs,
            message: "non-finite window entry".into(),
        });
    }
    let at = |i: isize| -> &[f64; STATE_DIM] { &s[i.max(0) as usize] };
    let p = STATE_DIM * n;
    let q = p + COMMAND_DIM;
    let mut y = DMatrix::<f64>::zeros(q, q);

    // Block row 0 of the lag-lag part.
    for j in 0..n {
        for t in 0..pairs {
            let a = at(t as isize);
            let b = at(t as isize - j as isize);
            for c in 0..STATE_DIM {
                for r in 0..STATE_DIM {
                    y[(r, j * STATE_DIM + c)] += a[r] * b[c];
                }
            }
        }
    }
    // Upper block triangle by the shift recurrence.
    let s0 = &s[0];
    for i in 0..n.saturating_sub(1) {
        let last_i = at(pairs as isize - 1 - i as isize);
        for j in i..n - 1 {
            let last_j = at(pairs as isize - 1 - j as isize);
            for c in 0..STATE_DIM {
                for r in 0..STATE_DIM {
                    let prev = y[(i * STATE_DIM + r, j * STATE_DIM + c)];
                    y[((i + 1) * STATE_DIM + r, (j + 1) * STATE_DIM + c)] =
                        prev + s0[r] * s0[c] - last_i[r] * last_j[c];
                }
            }
        }
    }
    // Command rows.
    for t in 0..pairs {
        let ut = &u[t];
        for j in 0..n {
            let b = at(t as isize - j as isize);
            for c in 0..STATE_DIM {
                for r in 0..COMMAND_DIM {
                    y[(p + r, j * STATE_DIM + c)] += ut[r] * b[c];
                }
            }
        }
        for c in 0..COMMAND_DIM {
            for r in 0..COMMAND_DIM {
                y[(p + r, p + c)] += ut[r] * ut[c];
            }
        }
    }
    // Mirror the upper block triangle and the command rows.
    for bi in 0..n {
        for bj in 0..bi {
            for r in 0..STATE_DIM {
                for c in 0..STATE_DIM {
                    y[(bi * STATE_DIM + r, bj * STATE_DIM + c)] = y[(bj * STATE_DIM + c, bi * STATE_DIM + r)];
                }
            }
        }
    }
    for r in 0..COMMAND_DIM {
        for c in 0..p {
            y[(c, p + r)] = y[(p + r, c)];
        }
    }

    let rows = target_rows(&LiftSpec::TimeDelay(n), mode);
    let mut x = DMatrix::<f64>::zeros(rows, q);
    let mut target_sq = 0.0;
    for t in 0..pairs {
        let next = &s[t + 1];
        for j in 0..n {
            let b = at(t as isize - j as isize);
            for c in 0..STATE_DIM {
                for r in 0..STATE_DIM {
                    x[(r, j * STATE_DIM + c)] += next[r] * b[c];
                }
            }
        }
        for c in 0..COMMAND_DIM {
            for r in 0..STATE_DIM {
                x[(r, p + c)] += next[r] * u[t][c];
            }
        }
        for lag in 0..n {
            target_sq += at(t as isize + 1 - lag as isize).iter().map(|v| v * v).sum::<f64>();
        }
        if mode == FitMode::Full {
            let un = &u[t + 1];
            for j in 0..n {
                let b = at(t as isize - j as isize);
                for c in 0..STATE_DIM {
                    for r in 0..COMMAND_DIM {
                        x[(p + r, j * STATE_DIM + c)] += un[r] * b[c];
                    }
                }
            }
            for c in 0..COMMAND_DIM {
                for r in 0..COMMAND_DIM {
                    x[(p + r, p + c)] += un[r] * u[t][c];
                }
            }
            target_sq += un.iter().map(|v| v * v).sum::<f64>();
        }
    }
    // Older target slots equal the source slots one lag newer.
    x.view_mut((STATE_DIM, 0), (p - STATE_DIM, q))
        .copy_from(&y.view((0, 0), (p - STATE_DIM, q)));

    gram.x += x;
    gram.y += y;
    gram.target_sq += target_sq;
    gram.pairs += pairs;
    Ok(())
}

fn accumulate_window(spec: &LiftSpec, w: &WindowSequence, mode: FitMode, gram: &mut Gram) -> Result<()> {
    match spec {
        LiftSpec::TimeDelay(n) => accumulate_time_delay(*n, w, mode, gram),
        _ => accumulate_generic(spec, w, mode, gram),
    }
}

/// Gram sums over every window of every trajectory, reduced in
/// trajectory order so the result does not depend on the thread count.
fn trajectory_grams(
    spec: &LiftSpec,
    trajectories: &[Trajectory],
    h: usize,
    mode: FitMode,
) -> Result<Gram> {
    let q = spec.lifted_dim() + COMMAND_DIM;
    let rows = target_rows(spec, mode);
    let partials: Vec<Result<Gram>> = trajectories
        .par_iter()
        .map(|traj| {
            let mut gram = Gram::new(rows, q);
            if traj.len() < h {
                return Err(Error::Argument(format!(
                    "trajectory of {} transitions is shorter than window length {h}",
                    traj.len()
                )));
            }
            for start in 0..=traj.len() - h {
                let w = window_at(traj, start, h)?;
                accumulate_window(spec, &w, mode, &mut gram)?;
            }
            Ok(gram)
        })
        .collect();
    let mut total = Gram::new(rows, q);
    for partial in partials {
        let partial = partial.map_err(|e| match e {
            Error::Numeric { index, message } => Error::Numeric {
                index: total.pairs + index,
                message,
            },
            other => other,
        })?;
        total.merge(&partial);
    }
    Ok(total)
}

/// Mean squared one-step error over the state rows (and, for a full fit,
/// the command rows), evaluated directly rather than through the Gram sums.
fn base_residual_windows(
    spec: &LiftSpec,
    k: &DMatrix<f64>,
    mode: FitMode,
    windows: impl Iterator<Item = Result<WindowSequence>>,
) -> Result<(f64, usize)> {
    let p = spec.lifted_dim();
    let q = p + COMMAND_DIM;
    let mut rows: Vec<usize> = (0..STATE_DIM).collect();
    if mode == FitMode::Full {
        rows.extend(p..q);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut psi = vec![0.0; q];
    for w in windows {
        let w = w?;
        for t in 0..pair_count(w.len(), mode) {
            lift_at(spec, &w.states, t, &mut psi[..p]);
            psi[p..].copy_from_slice(&w.commands[t].to_array());
            let next_x = w.states[t + 1].to_array();
            let next_u = w.commands.get(t + 1).map(Command::to_array);
            for &r in &rows {
                let target = if r < STATE_DIM {
                    next_x[r]
                } else {
                    next_u.expect("full fits skip the final transition")[r - p]
                };
                let mut pred = 0.0;
                for (c, v) in psi.iter().enumerate() {
                    pred += k[(r, c)] * v;
                }
                sum += (target - pred) * (target - pred);
            }
            count += 1;
        }
    }
    Ok((sum, count))
}

fn koopman_from_gram(
    spec: &LiftSpec,
    gram: &Gram,
    opts: &FitOptions,
    dt: f64,
) -> Result<(KoopmanModel, DMatrix<f64>)> {
    let k = gram.solve(opts.rcond)?;
    let p = spec.lifted_dim();
    let m = COMMAND_DIM;
    let (c, d) = match opts.mode {
        FitMode::Full => (k.view((p, 0), (m, p)).into_owned(), k.view((p, p), (m, m)).into_owned()),
        FitMode::Reduced => (DMatrix::zeros(m, p), DMatrix::zeros(m, m)),
    };
    let model = KoopmanModel {
        lift: *spec,
        a: k.view((0, 0), (p, p)).into_owned(),
        b: k.view((0, p), (p, m)).into_owned(),
        c,
        d,
        dt,
        fit_residual: gram.residual_per_pair(&k),
        base_residual: 0.0,
        normal_residual: gram.normal_equation_residual(&k),
        pairs: gram.pairs,
        dataset_hash: None,
    };
    Ok((model, k))
}

fn require_koopman(spec: &LiftSpec) -> Result<()> {
    spec.validate()?;
    if !spec.is_koopman() {
        return Err(Error::Argument(format!("{spec} is not a Koopman lift")));
    }
    Ok(())
}

/// Fits a Koopman model on explicit windows.
pub fn dmd_fit(windows: &[WindowSequence], spec: &LiftSpec, opts: &FitOptions, dt: f64) -> Result<KoopmanModel> {
    require_koopman(spec)?;
    let mut gram = Gram::new(target_rows(spec, opts.mode), spec.lifted_dim() + COMMAND_DIM);
    for w in windows {
        accumulate_window(spec, w, opts.mode, &mut gram)?;
    }
    let (mut model, k) = koopman_from_gram(spec, &gram, opts, dt)?;
    let (sum, count) = base_residual_windows(spec, &k, opts.mode, windows.iter().cloned().map(Ok))?;
    model.base_residual = sum / count.max(1) as f64;
    Ok(model)
}

/// Fits a Koopman model on every length-`h` window of the trajectories,
/// streaming windows instead of materializing them.
pub fn dmd_fit_trajectories(
    trajectories: &[Trajectory],
    h: usize,
    spec: &LiftSpec,
    opts: &FitOptions,
) -> Result<KoopmanModel> {
    require_koopman(spec)?;
    let dt = trajectories
        .first()
        .map(|t| t.dt)
        .ok_or_else(|| Error::Argument("no trajectories to fit".into()))?;
    let gram = trajectory_grams(spec, trajectories, h, opts.mode)?;
    let (mut model, k) = koopman_from_gram(spec, &gram, opts, dt)?;
    let partials: Vec<Result<(f64, usize)>> = trajectories
        .par_iter()
        .map(|traj| {
            let windows = (0..=traj.len() - h).map(|start| window_at(traj, start, h));
            base_residual_windows(spec, &k, opts.mode, windows)
        })
        .collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for part in partials {
        let (s, c) = part?;
        sum += s;
        count += c;
    }
    model.base_residual = sum / count.max(1) as f64;
    Ok(model)
}

fn axis_grams_window(w: &WindowSequence, grams: &mut [Gram; 3]) -> Result<()> {
    for t in 0..w.len().saturating_sub(1) {
        let x = w.states[t].to_array();
        let next = w.states[t + 1].to_array();
        let u = w.commands[t].to_array();
        for (g, &(p, v, k)) in grams.iter_mut().zip(&AXES) {
            g.add_pair(&[next[p], next[v]], &[x[p], x[v], u[k]])?;
        }
    }
    Ok(())
}

fn componentwise_from_grams(grams: &[Gram; 3], rcond: f64, dt: f64) -> Result<ComponentwiseModel> {
    let mut axes = [AxisModel {
        a: Matrix2::zeros(),
        b: Vector2::zeros(),
    }; 3];
    let mut residuals = [0.0; 3];
    let mut normal_residuals = [0.0; 3];
    for i in 0..3 {
        let k = grams[i].solve(rcond)?;
        axes[i] = AxisModel {
            a: Matrix2::new(k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]),
            b: Vector2::new(k[(0, 2)], k[(1, 2)]),
        };
        residuals[i] = grams[i].residual_per_pair(&k);
        normal_residuals[i] = grams[i].normal_equation_residual(&k);
    }
    Ok(ComponentwiseModel {
        axes,
        dt,
        residuals,
        normal_residuals,
        dataset_hash: None,
    })
}

fn new_axis_grams() -> [Gram; 3] {
    [Gram::new(2, 3), Gram::new(2, 3), Gram::new(2, 3)]
}

/// Fits the three decoupled axis models on explicit windows.
pub fn fit_componentwise(windows: &[WindowSequence], rcond: f64, dt: f64) -> Result<ComponentwiseModel> {
    let mut grams = new_axis_grams();
    for w in windows {
        axis_grams_window(w, &mut grams)?;
    }
    componentwise_from_grams(&grams, rcond, dt)
}

pub fn fit_componentwise_trajectories(trajectories: &[Trajectory], h: usize, rcond: f64) -> Result<ComponentwiseModel> {
    let dt = trajectories
        .first()
        .map(|t| t.dt)
        .ok_or_else(|| Error::Argument("no trajectories to fit".into()))?;
    let partials: Vec<Result<[Gram; 3]>> = trajectories
        .par_iter()
        .map(|traj| {
            let mut grams = new_axis_grams();
            if traj.len() < h {
                return Err(Error::Argument(format!(
                    "trajectory of {} transitions is shorter than window length {h}",
                    traj.len()
                )));
            }
            for start in 0..=traj.len() - h {
                axis_grams_window(&window_at(traj, start, h)?, &mut grams)?;
            }
            Ok(grams)
        })
        .collect();
    let mut total = new_axis_grams();
    for part in partials {
        let part = part?;
        for (t, g) in total.iter_mut().zip(&part) {
            t.merge(g);
        }
    }
    componentwise_from_grams(&total, rcond, dt)
}

/// Fits (or, for the integrator, constructs) the model of the given family.
pub fn fit_model(trajectories: &[Trajectory], h: usize, spec: &LiftSpec, opts: &FitOptions) -> Result<DynamicsModel> {
    spec.validate()?;
    Ok(match spec {
        LiftSpec::Integrator => DynamicsModel::Integrator(IntegratorModel {
            dt: trajectories.first().map(|t| t.dt).unwrap_or(0.02),
        }),
        LiftSpec::Componentwise => {
            DynamicsModel::Componentwise(fit_componentwise_trajectories(trajectories, h, opts.rcond)?)
        }
        _ => DynamicsModel::Koopman(dmd_fit_trajectories(trajectories, h, spec, opts)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self, expect: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
        if (self.rows, self.cols) != expect || self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "matrix {what} has shape {}x{} with {} entries, expected {}x{}",
                self.rows,
                self.cols,
                self.data.len(),
                expect.0,
                expect.1
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("matrix {what} has non-finite entries")));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    lift: LiftSpec,
    state_dim: usize,
    command_dim: usize,
    lifted_dim: usize,
    dt: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    a: Option<MatrixRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    b: Option<MatrixRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    c: Option<MatrixRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    d: Option<MatrixRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    axes: Option<Vec<AxisRecord>>,
    fit_residual: f64,
    #[serde(default)]
    base_residual: f64,
    #[serde(default)]
    normal_residual: f64,
    #[serde(default)]
    pairs: usize,
    dataset_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AxisRecord {
    a: [[f64; 2]; 2],
    b: [f64; 2],
    residual: f64,
    normal_residual: f64,
}

impl DynamicsModel {
    fn to_file(&self) -> ModelFile {
        let spec = self.lift_spec();
        let mut file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            lift: spec,
            state_dim: STATE_DIM,
            command_dim: COMMAND_DIM,
            lifted_dim: spec.lifted_dim(),
            dt: self.dt(),
            a: None,
            b: None,
            c: None,
            d: None,
            axes: None,
            fit_residual: 0.0,
            base_residual: 0.0,
            normal_residual: 0.0,
            pairs: 0,
            dataset_hash: self.dataset_hash().map(str::to_owned),
        };
        match self {
            DynamicsModel::Koopman(m) => {
                file.a = Some(MatrixRecord::from_matrix(&m.a));
                file.b = Some(MatrixRecord::from_matrix(&m.b));
                file.c = Some(MatrixRecord::from_matrix(&m.c));
                file.d = Some(MatrixRecord::from_matrix(&m.d));
                file.fit_residual = m.fit_residual;
                file.base_residual = m.base_residual;
                file.normal_residual = m.normal_residual;
                file.pairs = m.pairs;
            }
            DynamicsModel::Componentwise(m) => {
                file.axes = Some(
                    m.axes
                        .iter()
                        .zip(m.residuals.iter().zip(&m.normal_residuals))
                        .map(|(ax, (r, nr))| AxisRecord {
                            a: [[ax.a[(0, 0)], ax.a[(0, 1)]], [ax.a[(1, 0)], ax.a[(1, 1)]]],
                            b: [ax.b[0], ax.b[1]],
                            residual: *r,
                            normal_residual: *nr,
                        })
                        .collect(),
                );
                file.fit_residual = m.residuals.iter().sum::<f64>();
            }
            DynamicsModel::Integrator(_) => {}
        }
        file
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        if file.state_dim != STATE_DIM || file.command_dim != COMMAND_DIM || file.lifted_dim != file.lift.lifted_dim() {
            return Err(Error::Config("model dimensions do not match its lift".into()));
        }
        if !(file.dt > 0.0) {
            return Err(Error::Config("model dt must be positive".into()));
        }
        let missing = |what: &str| Error::Config(format!("model file lacks matrix {what}"));
        Ok(match file.lift {
            LiftSpec::Integrator => DynamicsModel::Integrator(IntegratorModel { dt: file.dt }),
            LiftSpec::Componentwise => {
                let recs = file.axes.ok_or_else(|| missing("axes"))?;
                if recs.len() != 3 {
                    return Err(Error::Config("componentwise model needs three axes".into()));
                }
                let mut axes = [AxisModel {
                    a: Matrix2::zeros(),
                    b: Vector2::zeros(),
                }; 3];
                let mut residuals = [0.0; 3];
                let mut normal_residuals = [0.0; 3];
                for (i, r) in recs.iter().enumerate() {
                    axes[i] = AxisModel {
                        a: Matrix2::new(r.a[0][0], r.a[0][1], r.a[1][0], r.a[1][1]),
                        b: Vector2::new(r.b[0], r.b[1]),
                    };
                    residuals[i] = r.residual;
                    normal_residuals[i] = r.normal_residual;
                }
                DynamicsModel::Componentwise(ComponentwiseModel {
                    axes,
                    dt: file.dt,
                    residuals,
                    normal_residuals,
                    dataset_hash: file.dataset_hash,
                })
            }
            spec => {
                let p = spec.lifted_dim();
                let m = COMMAND_DIM;
                DynamicsModel::Koopman(KoopmanModel {
                    lift: spec,
                    a: file.a.ok_or_else(|| missing("a"))?.to_matrix((p, p), "a")?,
                    b: file.b.ok_or_else(|| missing("b"))?.to_matrix((p, m), "b")?,
                    c: file.c.ok_or_else(|| missing("c"))?.to_matrix((m, p), "c")?,
                    d: file.d.ok_or_else(|| missing("d"))?.to_matrix((m, m), "d")?,
                    dt: file.dt,
                    fit_residual: file.fit_residual,
                    base_residual: file.base_residual,
                    normal_residual: file.normal_residual,
                    pairs: file.pairs,
                    dataset_hash: file.dataset_hash,
                })
            }
        })
    }

    pub fn set_dataset_hash(&mut self, hash: Option<String>) {
        match self {
            DynamicsModel::Koopman(m) => m.dataset_hash = hash,
            DynamicsModel::Componentwise(m) => m.dataset_hash = hash,
            DynamicsModel::Integrator(_) => {}
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad model file: {e}")))?;
        Self::from_file(file)
    }

    /// SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, extract_windows, CollectionConfig};
    use crate::plant::PlantParams;

    fn small_data() -> Vec<Trajectory> {
        collect(
            &PlantParams::default(),
            &CollectionConfig {
                episodes: 3,
                duration: 1.0,
                seed: 4,
                ..CollectionConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn time_delay_gram_matches_dense_gram() {
        let trajs = small_data();
        for n in [1usize, 2, 5, 12] {
            for h in [2usize, 3, 9] {
                for mode in [FitMode::Full, FitMode::Reduced] {
                    let spec = LiftSpec::TimeDelay(n);
                    let windows = extract_windows(&trajs[1], h).unwrap();
                    let rows = target_rows(&spec, mode);
                    let mut fast = Gram::new(rows, spec.lifted_dim() + 3);
                    let mut dense = fast.clone();
                    for w in windows.iter().take(7) {
                        accumulate_time_delay(n, w, mode, &mut fast).unwrap();
                        accumulate_generic(&spec, w, mode, &mut dense).unwrap();
                    }
                    let scale = dense.y.norm();
                    assert!((&fast.x - &dense.x).norm() <= 1e-12 * scale, "x n={n} h={h}");
                    assert!((&fast.y - &dense.y).norm() <= 1e-12 * scale, "y n={n} h={h}");
                    assert!((fast.target_sq - dense.target_sq).abs() <= 1e-12 * dense.target_sq);
                    assert_eq!(fast.pairs, dense.pairs);
                }
            }
        }
    }

    #[test]
    fn reduced_mode_matches_full_mode() {
        // A full fit on length-h windows and a reduced fit on their first
        // h - 1 transitions see exactly the same pairs.
        let trajs = small_data();
        let windows: Vec<_> = trajs.iter().flat_map(|t| extract_windows(t, 20).unwrap()).collect();
        let truncated: Vec<_> = windows
            .iter()
            .map(|w| WindowSequence {
                states: w.states[..20].to_vec(),
                commands: w.commands[..19].to_vec(),
                frame: w.frame,
            })
            .collect();
        let reduced_opts = FitOptions {
            mode: FitMode::Reduced,
            ..FitOptions::default()
        };
        for spec in [LiftSpec::Identity, LiftSpec::TimeDelay(3), LiftSpec::Poly3] {
            let full = dmd_fit(&windows, &spec, &FitOptions::default(), 0.02).unwrap();
            let reduced = dmd_fit(&truncated, &spec, &reduced_opts, 0.02).unwrap();
            assert_eq!(full.pairs, reduced.pairs);
            assert!((&full.a - &reduced.a).amax() <= 1e-10, "{spec}");
            assert!((&full.b - &reduced.b).amax() <= 1e-10, "{spec}");
        }
        // On whole windows the reduced fit also uses each final transition.
        let reduced = dmd_fit(&windows, &LiftSpec::Identity, &reduced_opts, 0.02).unwrap();
        assert_eq!(reduced.pairs, windows.len() * 20);
    }

    #[test]
    fn trajectory_fit_matches_window_fit() {
        let trajs = small_data();
        let windows: Vec<_> = trajs.iter().flat_map(|t| extract_windows(t, 10).unwrap()).collect();
        let a = dmd_fit(&windows, &LiftSpec::Identity, &FitOptions::default(), 0.02).unwrap();
        let b = dmd_fit_trajectories(&trajs, 10, &LiftSpec::Identity, &FitOptions::default()).unwrap();
        assert!((&a.a - &b.a).amax() < 1e-10);
        assert!((a.base_residual - b.base_residual).abs() < 1e-12);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs, 3 * 41 * 9);
    }

    #[test]
    fn integrator_closed_form() {
        let m = DynamicsModel::Integrator(IntegratorModel { dt: 0.02 });
        let out = m.predict(&[State::default()], &[Command::new(1.0, 0.0, 0.0)]).unwrap();
        let x = out[0].to_array();
        assert!((x[0] - 0.01).abs() < 1e-15);
        assert_eq!(&x[1..3], &[0.0, 0.0]);
        assert_eq!(&x[3..], &[1.0, 0.0, 0.0]);
        // The linear form agrees with the closed form.
        let lin = m.to_linear();
        let z = &lin.a * DVector::from_row_slice(&x) + &lin.b * DVector::from_row_slice(&[0.3, -0.2, 0.5]);
        let direct = m
            .predict(&[State::from_array(&x)], &[Command::new(0.3, -0.2, 0.5)])
            .unwrap()[0]
            .to_array();
        for i in 0..6 {
            assert!((z[i] - direct[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn null_model_predicts_zero() {
        let m = DynamicsModel::Koopman(KoopmanModel {
            lift: LiftSpec::Identity,
            a: DMatrix::zeros(6, 6),
            b: DMatrix::zeros(6, 3),
            c: DMatrix::zeros(3, 6),
            d: DMatrix::zeros(3, 3),
            dt: 0.02,
            fit_residual: 0.0,
            base_residual: 0.0,
            normal_residual: 0.0,
            pairs: 0,
            dataset_hash: None,
        });
        let x = State::from_array(&[1.0, 2.0, 0.3, 0.1, 0.0, 0.2]);
        let out = m.predict(&[x], &vec![Command::new(1.0, 0.5, 1.0); 10]).unwrap();
        assert!(out.iter().all(|s| s.to_array().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn non_koopman_specs_rejected() {
        assert!(dmd_fit(&[], &LiftSpec::Componentwise, &FitOptions::default(), 0.02).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let trajs = small_data();
        for spec in [
            LiftSpec::Identity,
            LiftSpec::TimeDelay(2),
            LiftSpec::Componentwise,
            LiftSpec::Integrator,
        ] {
            let mut model = fit_model(&trajs, 10, &spec, &FitOptions::default()).unwrap();
            model.set_dataset_hash(Some("abc".into()));
            let back = DynamicsModel::from_json(&model.to_json()).unwrap();
            assert_eq!(back, model);
        }
        assert!(DynamicsModel::from_json("{}").is_err());
    }
}
