//! Rollout collection, window extraction and localization, and the on-disk
//! dataset format.
//!
//! Every training or validation sequence is a length-`H` window of a rollout
//! re-expressed in the frame of its first state. Commands are rotated into
//! that frame using the heading the robot had when each command was applied,
//! so a window is a self-contained, frame-free sample of the closed loop.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{from_frame, to_frame, Pose2};
use crate::plant::{step, Command, PlantParams, State};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const CSV_HEADER: &str = "t,px,py,theta,vx,vy,omega,vhat_x,vhat_y,omega_hat";

/// A timed rollout: `states[k + 1]` results from applying `commands[k]` to
/// `states[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub commands: Vec<Command>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<State>, commands: Vec<Command>, dt: f64) -> Result<Self> {
        if states.len() != commands.len() + 1 {
            return Err(Error::Argument(format!(
                "trajectory has {} states for {} commands",
                states.len(),
                commands.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Argument(format!("trajectory dt must be positive, got {dt}")));
        }
        Ok(Self { states, commands, dt })
    }

    /// Number of transitions `N`.
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

/// A window of `H` transitions expressed in the frame of its first state.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSequence {
    /// `H + 1` localized states; `states[0]` has zero pose.
    pub states: Vec<State>,
    /// `H` commands rotated from the body frame into the window frame.
    pub commands: Vec<Command>,
    /// World pose of the window's first state.
    pub frame: Pose2,
}

impl WindowSequence {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    /// Maps the localized states back into the world frame.
    pub fn delocalized_states(&self) -> Vec<State> {
        self.states.iter().map(|s| from_frame(s, &self.frame)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub episodes: usize,
    /// Episode length in seconds.
    pub duration: f64,
    /// Seconds between command resamples.
    pub resample_interval: f64,
    pub window_h: usize,
    pub seed: u64,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            duration: 10.0,
            resample_interval: 0.5,
            window_h: 100,
            seed: 0,
        }
    }
}

fn integral_ratio(value: f64, dt: f64, what: &str) -> Result<usize> {
    let ratio = value / dt;
    let rounded = ratio.round();
    if !(rounded >= 1.0) || (ratio - rounded).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "{what} ({value} s) must be a positive integer multiple of dt ({dt} s)"
        )));
    }
    Ok(rounded as usize)
}

impl CollectionConfig {
    /// Transitions per episode and steps per command hold.
    pub fn step_counts(&self, dt: f64) -> Result<(usize, usize)> {
        if self.episodes == 0 {
            return Err(Error::Config("collection needs at least one episode".into()));
        }
        if self.window_h == 0 {
            return Err(Error::Config("window length must be at least 1".into()));
        }
        let steps = integral_ratio(self.duration, dt, "duration")?;
        let hold = integral_ratio(self.resample_interval, dt, "resample interval")?;
        Ok((steps, hold))
    }
}

/// Rolls out `cfg.episodes` episodes from rest at the origin under
/// piecewise-constant commands drawn uniformly from the command box.
pub fn collect(params: &PlantParams, cfg: &CollectionConfig) -> Result<Vec<Trajectory>> {
    params.validate()?;
    let (steps, hold) = cfg.step_counts(params.dt)?;
    (0..cfg.episodes)
        .into_par_iter()
        .map(|episode| {
            let mut cmd_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            cmd_rng.set_stream(episode as u64);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
            noise_rng.set_stream(episode as u64);

            let mut commands = Vec::with_capacity(steps);
            let mut current = Command::default();
            for k in 0..steps {
                if k % hold == 0 {
                    current = params.command_box.sample(&mut cmd_rng);
                }
                commands.push(current);
            }
            let mut states = Vec::with_capacity(steps + 1);
            let mut x = State::default();
            states.push(x);
            for cmd in &commands {
                x = step(&x, cmd, params, &mut noise_rng)?;
                states.push(x);
            }
            Trajectory::new(states, commands, params.dt)
        })
        .collect()
}

/// Extracts the window of `h` transitions starting at state `start`.
pub fn window_at(traj: &Trajectory, start: usize, h: usize) -> Result<WindowSequence> {
    if h == 0 || start + h > traj.len() {
        return Err(Error::Argument(format!(
            "window [{start}, {}) does not fit a trajectory of {} transitions",
            start + h,
            traj.len()
        )));
    }
    let frame = traj.states[start].pose();
    let states: Vec<State> = traj.states[start..=start + h]
        .iter()
        .map(|s| to_frame(s, &frame))
        .collect();
    let commands = traj.commands[start..start + h]
        .iter()
        .zip(&states)
        .map(|(cmd, s)| cmd.rotated(s.theta))
        .collect();
    Ok(WindowSequence { states, commands, frame })
}

/// All `N - H + 1` localized windows of length `h`.
pub fn extract_windows(traj: &Trajectory, h: usize) -> Result<Vec<WindowSequence>> {
    if h == 0 || h > traj.len() {
        return Err(Error::Argument(format!(
            "window length {h} must lie in [1, {}]",
            traj.len()
        )));
    }
    (0..=traj.len() - h).map(|i| window_at(traj, i, h)).collect()
}

/// Partitions trajectories into `(train, validation)` after a seeded shuffle.
pub fn split(dataset: &[Trajectory], fractions: [f64; 2], seed: u64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || ((fractions[0] + fractions[1]) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = dataset.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} trajectories with fractions {fractions:?} leaves a partition empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..n_train].iter().map(|&i| dataset[i].clone()).collect();
    let validation = order[n_train..].iter().map(|&i| dataset[i].clone()).collect();
    Ok((train, validation))
}

/// One localized transition of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionPair {
    pub window: usize,
    pub step: usize,
    pub state: State,
    pub command: Command,
    pub next_state: State,
    /// `None` for the final transition of a window.
    pub next_command: Option<Command>,
}

impl TransitionPair {
    pub fn is_full(&self) -> bool {
        self.next_command.is_some()
    }
}

/// All transitions of the given windows; `H - 1` per window carry the next
/// command, the last one does not.
pub fn transition_pairs(windows: &[WindowSequence]) -> Vec<TransitionPair> {
    windows
        .iter()
        .enumerate()
        .flat_map(|(w, win)| {
            (0..win.len()).map(move |t| TransitionPair {
                window: w,
                step: t,
                state: win.states[t],
                command: win.commands[t],
                next_state: win.states[t + 1],
                next_command: win.commands.get(t + 1).copied(),
            })
        })
        .collect()
}

/// Reference to the window of a trajectory set starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub trajectory: usize,
    pub start: usize,
}

/// Draws up to `count` distinct windows of length `h` uniformly without
/// replacement.
///
/// The draw is a partial Fisher-Yates shuffle, so a larger `count` with the
/// same seed extends the smaller sample rather than reshuffling it.
pub fn sample_windows(trajectories: &[Trajectory], h: usize, count: usize, seed: u64) -> Result<Vec<WindowRef>> {
    let mut all = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        if h == 0 || h > t.len() {
            return Err(Error::Argument(format!(
                "trajectory {i} has {} transitions, fewer than window length {h}",
                t.len()
            )));
        }
        all.extend((0..=t.len() - h).map(|start| WindowRef { trajectory: i, start }));
    }
    let take = count.min(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..take {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(take);
    Ok(all)
}

/// Provenance record written next to the per-trajectory CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub plant: PlantParams,
    pub collection: CollectionConfig,
    pub files: Vec<ManifestEntry>,
    /// SHA-256 over the manifest body (everything except this field).
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Serialize)]
struct ManifestBody<'a> {
    format_version: u32,
    plant: &'a PlantParams,
    collection: &'a CollectionConfig,
    files: &'a [ManifestEntry],
}

impl DatasetManifest {
    fn body_hash(&self) -> String {
        let body = ManifestBody {
            format_version: self.format_version,
            plant: &self.plant,
            collection: &self.collection,
            files: &self.files,
        };
        sha256_hex(serde_json::to_string(&body).expect("manifest serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(traj.states.len() * 96);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (k, s) in traj.states.iter().enumerate() {
        let t = k as f64 * traj.dt;
        out.push_str(&format!(
            "{t},{},{},{},{},{},{}",
            s.px, s.py, s.theta, s.vx, s.vy, s.omega
        ));
        match traj.commands.get(k) {
            Some(c) => out.push_str(&format!(",{},{},{}\n", c.vhat_x, c.vhat_y, c.omega_hat)),
            None => out.push_str(",,,\n"),
        }
    }
    out
}

fn parse_trajectory_csv(path: &Path, text: &str, dt: f64) -> Result<Trajectory> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, "unexpected CSV header"));
    }
    let mut states = Vec::new();
    let mut commands = Vec::new();
    let mut ended = false;
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        if ended {
            return Err(Error::format(path, format!("row {row} follows the command-less final row")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::format(path, format!("row {row} has {} fields", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::format(path, format!("row {row}: {e}")))
        };
        let mut s = [0.0; 6];
        for (i, v) in s.iter_mut().enumerate() {
            *v = num(fields[1 + i])?;
        }
        states.push(State::from_array(&s));
        if fields[7].is_empty() {
            ended = true;
        } else {
            commands.push(Command::new(num(fields[7])?, num(fields[8])?, num(fields[9])?));
        }
    }
    Trajectory::new(states, commands, dt).map_err(|e| Error::format(path, e))
}

/// Writes one CSV per trajectory plus `manifest.json`; returns the manifest.
pub fn write_dataset(
    dir: &Path,
    trajectories: &[Trajectory],
    plant: &PlantParams,
    collection: &CollectionConfig,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(trajectories.len());
    for (i, traj) in trajectories.iter().enumerate() {
        let name = format!("traj_{i:04}.csv");
        let text = trajectory_csv(traj);
        let path = dir.join(&name);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            file: name,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let mut manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        plant: plant.clone(),
        collection: collection.clone(),
        files,
        hash: String::new(),
    };
    manifest.hash = manifest.body_hash();
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    if manifest.body_hash() != manifest.hash {
        return Err(Error::format(&path, "manifest hash does not match its contents"));
    }
    Ok(manifest)
}

/// Loads a dataset directory, verifying every file against the manifest.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let manifest = read_manifest(dir)?;
    let mut trajectories = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(Error::format(&path, "file hash does not match the manifest"));
        }
        trajectories.push(parse_trajectory_csv(&path, &text, manifest.plant.dt)?);
    }
    Ok((manifest, trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> CollectionConfig {
        CollectionConfig {
            episodes: 4,
            duration: 2.0,
            seed: 9,
            ..CollectionConfig::default()
        }
    }

    #[test]
    fn collect_counts_and_holds() {
        let params = PlantParams::default();
        let trajs = collect(&params, &small_config()).unwrap();
        assert_eq!(trajs.len(), 4);
        for t in &trajs {
            assert_eq!(t.len(), 100);
            assert_eq!(t.states[0], State::default());
            for k in 0..t.len() {
                if k % 25 != 0 {
                    assert_eq!(t.commands[k], t.commands[k - 1]);
                }
                assert!(params.command_box.contains(&t.commands[k], 0.0));
            }
            assert_ne!(t.commands[0], t.commands[25]);
        }
        assert_ne!(trajs[0].commands[0], trajs[1].commands[0]);
    }

    #[test]
    fn default_collection_size() {
        let (steps, hold) = CollectionConfig::default().step_counts(0.02).unwrap();
        assert_eq!(steps, 500);
        assert_eq!(hold, 25);
        assert_eq!(steps * CollectionConfig::default().episodes, 50_000);
    }

    #[test]
    fn collection_config_errors() {
        let bad = CollectionConfig {
            resample_interval: 0.03,
            ..CollectionConfig::default()
        };
        assert!(matches!(bad.step_counts(0.02), Err(Error::Config(_))));
        let none = CollectionConfig {
            episodes: 0,
            ..CollectionConfig::default()
        };
        assert!(none.step_counts(0.02).is_err());
    }

    #[test]
    fn window_counts_and_localization() {
        let trajs = collect(&PlantParams::default(), &small_config()).unwrap();
        let t = &trajs[1];
        let windows = extract_windows(t, 40).unwrap();
        assert_eq!(windows.len(), 100 - 40 + 1);
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.len(), 40);
            assert_eq!((w.states[0].px, w.states[0].py, w.states[0].theta), (0.0, 0.0, 0.0));
            for (a, b) in w.delocalized_states().iter().zip(&t.states[i..]) {
                for (x, y) in a.to_array().iter().zip(b.to_array()) {
                    assert_abs_diff_eq!(*x, y, epsilon = 1e-10);
                }
            }
        }
        let full = extract_windows(t, 100).unwrap();
        assert_eq!(full.len(), 1);
        // Episodes start at the origin with zero heading, so window 0 is the raw prefix.
        assert_eq!(full[0].states, t.states);
        assert_eq!(full[0].commands[0], t.commands[0]);
        assert!(extract_windows(t, 101).is_err());
        assert!(extract_windows(t, 0).is_err());
    }

    #[test]
    fn window_commands_use_step_heading() {
        let trajs = collect(&PlantParams::default(), &small_config()).unwrap();
        let w = window_at(&trajs[0], 30, 20).unwrap();
        for j in 0..20 {
            let expected = trajs[0].commands[30 + j].rotated(w.states[j].theta);
            assert_eq!(w.commands[j], expected);
        }
    }

    #[test]
    fn split_partitions_by_trajectory() {
        let trajs = collect(
            &PlantParams::default(),
            &CollectionConfig {
                episodes: 10,
                duration: 0.2,
                ..small_config()
            },
        )
        .unwrap();
        let (a, b) = split(&trajs, [0.8, 0.2], 5).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<_> = a.iter().chain(&b).map(|t| t.commands[0].vhat_x.to_bits()).collect();
        let mut expected: Vec<_> = trajs.iter().map(|t| t.commands[0].vhat_x.to_bits()).collect();
        all.sort_unstable();
        expected.sort_unstable();
        assert_eq!(all, expected);
        assert_eq!(split(&trajs, [0.8, 0.2], 5).unwrap().0, a);
        assert!(split(&trajs, [1.0, 0.0], 5).is_err());
        assert!(split(&trajs, [0.5, 0.6], 5).is_err());
    }

    #[test]
    fn transition_pair_counts() {
        let trajs = collect(&PlantParams::default(), &small_config()).unwrap();
        let two = extract_windows(&trajs[0], 2).unwrap();
        let pairs = transition_pairs(&two[..1]);
        assert_eq!(pairs.iter().filter(|p| p.is_full()).count(), 1);
        assert_eq!(pairs.len(), 2);

        let windows = extract_windows(&trajs[0], 60).unwrap();
        let pairs = transition_pairs(&windows);
        assert_eq!(pairs.iter().filter(|p| p.is_full()).count(), windows.len() * 59);
        for p in pairs.iter().take(200) {
            let w = &windows[p.window];
            assert_eq!(p.state, w.states[p.step]);
            assert_eq!(p.next_state, w.states[p.step + 1]);
            assert_eq!(p.command, w.commands[p.step]);
        }
    }

    #[test]
    fn window_sampling_is_prefix_stable() {
        let trajs = collect(&PlantParams::default(), &small_config()).unwrap();
        let small = sample_windows(&trajs, 50, 40, 3).unwrap();
        let large = sample_windows(&trajs, 50, 80, 3).unwrap();
        assert_eq!(&large[..40], &small[..]);
        let mut keys: Vec<_> = large.iter().map(|w| (w.trajectory, w.start)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 80);
        assert_eq!(sample_windows(&trajs, 50, 10_000, 3).unwrap().len(), 4 * 51);
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let params = PlantParams::default();
        let cfg = small_config();
        let trajs = collect(&params, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m1 = write_dataset(&dir.path().join("a"), &trajs, &params, &cfg).unwrap();
        let again = collect(&params, &cfg).unwrap();
        let m2 = write_dataset(&dir.path().join("b"), &again, &params, &cfg).unwrap();
        assert_eq!(m1.hash, m2.hash);
        let a = fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        let b = fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);

        let (manifest, loaded) = read_dataset(&dir.path().join("a")).unwrap();
        assert_eq!(manifest, m1);
        assert_eq!(loaded, trajs);

        let first = dir.path().join("a").join("traj_0000.csv");
        fs::write(&first, "garbage").unwrap();
        assert!(read_dataset(&dir.path().join("a")).is_err());
    }
}
