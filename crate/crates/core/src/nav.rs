//! Closed-loop navigation: obstacle maps, scenario sampling, plant-in-the-loop
//! episodes with the planner and the MPC, and suite metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{circle_centers, BodyCircle, ConvexPolytope, Point2, Pose2};
use crate::mpc::{MpcController, MpcProblem, MpcSolution, SolveRecord};
use crate::planner::{
    plan_path, rasterize, OccupancyGrid, PathTracker, DEFAULT_INFLATION, DEFAULT_RESOLUTION,
};
use crate::plant::{step, Command, PlantParams, State};

pub const MAP_FORMAT_VERSION: u32 = 1;

const BUILTIN_MAPS: [&str; 4] = [
    include_str!("../maps/corridor1.json"),
    include_str!("../maps/corridor2.json"),
    include_str!("../maps/maze75.json"),
    include_str!("../maps/maze70.json"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: &Point2, tol: f64) -> bool {
        p.x >= self.min[0] - tol && p.x <= self.max[0] + tol && p.y >= self.min[1] - tol && p.y <= self.max[1] + tol
    }

    fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.min[0], self.min[1]),
            Point2::new(self.max[0], self.min[1]),
            Point2::new(self.max[0], self.max[1]),
            Point2::new(self.min[0], self.max[1]),
        ]
    }
}

/// Where starts or goals are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Uniform position in the rectangle with a fixed heading.
    Rectangle { min: [f64; 2], max: [f64; 2], heading: f64 },
    /// One of a list of `[x, y, heading]` poses.
    Poses(Vec<[f64; 3]>),
}

impl Region {
    /// Representative poses used to check that the region is free.
    fn probe_poses(&self) -> Vec<Pose2> {
        match self {
            Region::Rectangle { min, max, heading } => {
                let r = Rect { min: *min, max: *max };
                let mut out: Vec<Pose2> = r.corners().iter().map(|c| Pose2::new(c.x, c.y, *heading)).collect();
                out.push(Pose2::new(0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1]), *heading));
                out
            }
            Region::Poses(poses) => poses.iter().map(|p| Pose2::new(p[0], p[1], p[2])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMap {
    pub format_version: u32,
    pub name: String,
    pub bounds: Rect,
    pub obstacles: Vec<ConvexPolytope>,
    pub start_region: Region,
    pub goal_region: Region,
    /// Time allowed to reach the goal (seconds).
    pub success_window: f64,
    /// Distance at which the goal counts as reached (meters).
    pub goal_tolerance: f64,
    /// Episodes per suite when the caller does not say.
    pub default_runs: usize,
}

impl ObstacleMap {
    pub fn from_json(text: &str) -> Result<Self> {
        let map: ObstacleMap =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid map file: {e}")))?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    pub fn bounds_points(&self) -> (Point2, Point2) {
        (
            Point2::new(self.bounds.min[0], self.bounds.min[1]),
            Point2::new(self.bounds.max[0], self.bounds.max[1]),
        )
    }

    /// Checks the format version, the timing fields, and that every region
    /// probe pose lies inside the bounds, in free space of the inflated grid,
    /// and with all default body circles clear of obstacles.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MAP_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "map {} has format version {}, expected {MAP_FORMAT_VERSION}",
                self.name, self.format_version
            )));
        }
        if !(self.success_window > 0.0) || !(self.goal_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "map {} needs a positive success window and goal tolerance",
                self.name
            )));
        }
        if self.default_runs == 0 {
            return Err(Error::Config(format!("map {} needs default_runs >= 1", self.name)));
        }
        for region in [&self.start_region, &self.goal_region] {
            match region {
                Region::Rectangle { min, max, .. } if !(min[0] <= max[0] && min[1] <= max[1]) => {
                    return Err(Error::Config(format!("map {} has an empty region", self.name)));
                }
                Region::Poses(p) if p.is_empty() => {
                    return Err(Error::Config(format!("map {} has an empty pose list", self.name)));
                }
                _ => {}
            }
        }
        let grid = rasterize(&self.obstacles, self.bounds_points(), DEFAULT_RESOLUTION, DEFAULT_INFLATION)?;
        let body = BodyCircle::default_body();
        for pose in self.start_region.probe_poses().iter().chain(&self.goal_region.probe_poses()) {
            let p = pose.position();
            if !self.bounds.contains(&p, 0.0) {
                return Err(Error::Config(format!("map {}: region pose {p:?} is out of bounds", self.name)));
            }
            let free = grid.cell_of(&p).is_some_and(|c| grid.is_free(c));
            if !free || body_clearance(&self.obstacles, &body, pose) < 0.0 {
                return Err(Error::Config(format!("map {}: region pose {pose:?} is not free", self.name)));
            }
        }
        Ok(())
    }

    pub fn grid(&self, nav: &NavConfig) -> Result<OccupancyGrid> {
        rasterize(&self.obstacles, self.bounds_points(), nav.resolution, nav.inflation)
    }
}

/// The four shipped maps: corridor1, corridor2, maze75 and maze70.
pub fn builtin_maps() -> Vec<ObstacleMap> {
    BUILTIN_MAPS
        .iter()
        .map(|text| ObstacleMap::from_json(text).expect("shipped maps are valid"))
        .collect()
}

pub fn builtin_map(name: &str) -> Result<ObstacleMap> {
    builtin_maps()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::Config(format!("unknown map {name:?}")))
}

/// Smallest clearance `sd - r` of any body circle at `pose`.
pub fn body_clearance(obstacles: &[ConvexPolytope], circles: &[BodyCircle], pose: &Pose2) -> f64 {
    let centers = circle_centers(pose, circles);
    let mut best = f64::INFINITY;
    for poly in obstacles {
        for (c, circle) in centers.iter().zip(circles) {
            best = best.min(poly.signed_distance(c).distance - circle.radius);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start: Pose2,
    pub goal: Point2,
    /// Seed of the plant noise stream of the episode.
    pub seed: u64,
}

fn draw_rect<R: Rng>(rng: &mut R, min: &[f64; 2], max: &[f64; 2]) -> Point2 {
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let x = draw(min[0], max[0]);
    let y = draw(min[1], max[1]);
    Point2::new(x, y)
}

/// Draws a start pose and goal point; deterministic in `seed`.
///
/// When start and goal come from the same pose list the goal index is
/// redrawn until it differs from the start index.
pub fn sample_scenario(map: &ObstacleMap, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, start_index) = match &map.start_region {
        Region::Rectangle { min, max, heading } => {
            let p = draw_rect(&mut rng, min, max);
            (Pose2::new(p.x, p.y, *heading), None)
        }
        Region::Poses(poses) => {
            let i = rng.random_range(0..poses.len());
            (Pose2::new(poses[i][0], poses[i][1], poses[i][2]), Some(i))
        }
    };
    let goal = match &map.goal_region {
        Region::Rectangle { min, max, .. } => draw_rect(&mut rng, min, max),
        Region::Poses(poses) => {
            let same_list = map.start_region == map.goal_region && poses.len() > 1;
            let mut j = rng.random_range(0..poses.len());
            while same_list && Some(j) == start_index {
                j = rng.random_range(0..poses.len());
            }
            Point2::new(poses[j][0], poses[j][1])
        }
    };
    Scenario {
        start,
        goal,
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    /// Speed along the planned path used for the reference (m/s).
    pub nominal_speed: f64,
    pub resolution: f64,
    pub inflation: f64,
    pub circles: Vec<BodyCircle>,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            nominal_speed: 0.7,
            resolution: DEFAULT_RESOLUTION,
            inflation: DEFAULT_INFLATION,
            circles: BodyCircle::default_body(),
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_speed > 0.0) || !self.nominal_speed.is_finite() {
            return Err(Error::Config(format!("nominal speed must be positive, got {}", self.nominal_speed)));
        }
        if self.circles.is_empty() || self.circles.iter().any(|c| !(c.radius > 0.0)) {
            return Err(Error::Config("robot needs at least one circle of positive radius".into()));
        }
        if !(self.resolution > 0.0) || !(self.inflation >= 0.0) {
            return Err(Error::Config("grid resolution and inflation must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    /// Time at which the goal was reached, if it was.
    pub time_to_goal: Option<f64>,
    /// Transitions from clear to penetrating.
    pub collision_events: usize,
    /// Steps spent penetrating.
    pub penetration_steps: usize,
    pub success: bool,
    pub min_clearance: f64,
    /// Distance travelled (meters).
    pub path_length: f64,
    pub final_distance: f64,
    pub solves: usize,
    pub softened_solves: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: State,
    /// Command applied from this step on (none on the final row).
    pub command: Option<Command>,
    pub min_clearance: f64,
    pub status: String,
}

pub const TRACE_HEADER: &str = "t,px,py,theta,vx,vy,omega,vhat_x,vhat_y,omega_hat,min_clearance,status";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub index: usize,
    pub scenario: Scenario,
    pub path: Vec<Point2>,
    pub metrics: NavMetrics,
    pub trace: Vec<TraceRow>,
    pub solves: Vec<SolveRecord>,
}

impl EpisodeResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.trace {
            let s = r.state;
            write!(out, "{},{},{},{},{},{},{}", r.t, s.px, s.py, s.theta, s.vx, s.vy, s.omega).expect("string write");
            match r.command {
                Some(c) => write!(out, ",{},{},{}", c.vhat_x, c.vhat_y, c.omega_hat),
                None => write!(out, ",,,"),
            }
            .expect("string write");
            writeln!(out, ",{},{}", r.min_clearance, r.status).expect("string write");
        }
        out
    }
}

/// Runs one episode with the plant in the loop.
///
/// The path is planned once; every `solve_stride` steps the controller
/// solves against the local reference from the robot's progress along the
/// path, and the first `solve_stride` commands are applied. Each planned
/// command is re-expressed in the body frame at the heading the robot
/// actually has when it is applied. A controller failure ends the episode
/// as failed; other errors are returned.
pub fn run_episode(
    map: &ObstacleMap,
    scenario: &Scenario,
    controller: &MpcController,
    plant: &PlantParams,
    nav: &NavConfig,
) -> Result<EpisodeResult> {
    let grid = map.grid(nav)?;
    run_episode_on_grid(map, &grid, scenario, controller, plant, nav, 0)
}

fn run_episode_on_grid(
    map: &ObstacleMap,
    grid: &OccupancyGrid,
    scenario: &Scenario,
    controller: &MpcController,
    plant: &PlantParams,
    nav: &NavConfig,
    index: usize,
) -> Result<EpisodeResult> {
    let cfg = controller.config();
    plant.validate()?;
    nav.validate()?;
    if (cfg.dt - plant.dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "controller dt {} does not match plant dt {}",
            cfg.dt, plant.dt
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let circles = &nav.circles;
    let mut state = State::at_pose(&scenario.start);
    let mut history = vec![state];
    let mut metrics = NavMetrics {
        time_to_goal: None,
        collision_events: 0,
        penetration_steps: 0,
        success: false,
        min_clearance: f64::INFINITY,
        path_length: 0.0,
        final_distance: (state.pose().position() - scenario.goal).norm(),
        solves: 0,
        softened_solves: 0,
        failure: None,
    };
    let mut trace = Vec::new();
    let mut solves = Vec::new();

    let clearance = |s: &State| body_clearance(&map.obstacles, circles, &s.pose());
    let mut current_clearance = clearance(&state);
    metrics.min_clearance = current_clearance;
    let mut penetrating = current_clearance < 0.0;
    if penetrating {
        metrics.penetration_steps += 1;
    }
    let at_goal = |s: &State| (s.pose().position() - scenario.goal).norm() <= map.goal_tolerance;

    let path = if at_goal(&state) {
        vec![scenario.start.position(), scenario.goal]
    } else {
        plan_path(grid, &scenario.start.position(), &scenario.goal)?
    };
    let tracker = PathTracker::new(path.clone())?;
    let steps = (map.success_window / plant.dt).round() as usize;
    let mut progress = 0.0;
    let mut plan: Option<MpcSolution> = None;
    let mut plan_age = 0usize;
    let mut status = String::new();

    for k in 0..=steps {
        let t = k as f64 * plant.dt;
        if at_goal(&state) {
            metrics.success = true;
            metrics.time_to_goal = Some(t);
            trace.push(TraceRow {
                t,
                state,
                command: None,
                min_clearance: current_clearance,
                status: "goal".into(),
            });
            break;
        }
        if k == steps {
            trace.push(TraceRow {
                t,
                state,
                command: None,
                min_clearance: current_clearance,
                status: "timeout".into(),
            });
            break;
        }
        if plan.is_none() || plan_age >= cfg.solve_stride {
            let lo = progress - 0.25;
            progress = tracker.project(&state.pose().position(), Some((lo, progress + 1.0)));
            let reference = tracker.reference_from(progress, cfg.horizon + 1, nav.nominal_speed, cfg.dt);
            let previous = plan.as_ref().map(|p| (p, plan_age));
            let problem = MpcProblem::from_world(
                controller.model(),
                &history,
                &reference.poses,
                &map.obstacles,
                circles,
                cfg.dt,
                previous,
            )?;
            let started = Instant::now();
            match controller.solve(&problem) {
                Ok(sol) => {
                    solves.push(SolveRecord::from_solution(metrics.solves, &sol));
                    metrics.solves += 1;
                    if sol.status != crate::mpc::SolveStatus::Optimal {
                        metrics.softened_solves += 1;
                    }
                    status = sol.status.to_string();
                    plan = Some(sol);
                    plan_age = 0;
                }
                Err(Error::MpcFailure(msg)) => {
                    solves.push(SolveRecord::failed(metrics.solves, started.elapsed().as_secs_f64()));
                    metrics.solves += 1;
                    metrics.failure = Some(msg);
                    trace.push(TraceRow {
                        t,
                        state,
                        command: None,
                        min_clearance: current_clearance,
                        status: "failed".into(),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let sol = plan.as_ref().expect("a plan exists after solving");
        let u = sol.frame_commands[plan_age];
        let heading = state.theta - sol.frame.theta;
        let cmd = controller.config().command_box.clamp(&u.rotated(-heading));
        trace.push(TraceRow {
            t,
            state,
            command: Some(cmd),
            min_clearance: current_clearance,
            status: status.clone(),
        });
        let next = step(&state, &cmd, plant, &mut rng)?;
        metrics.path_length += (next.pose().position() - state.pose().position()).norm();
        state = next;
        history.push(state);
        plan_age += 1;

        current_clearance = clearance(&state);
        metrics.min_clearance = metrics.min_clearance.min(current_clearance);
        let now_penetrating = current_clearance < 0.0;
        if now_penetrating {
            metrics.penetration_steps += 1;
            if !penetrating {
                metrics.collision_events += 1;
            }
        }
        penetrating = now_penetrating;
    }
    metrics.final_distance = (state.pose().position() - scenario.goal).norm();
    Ok(EpisodeResult {
        index,
        scenario: *scenario,
        path,
        metrics,
        trace,
        solves,
    })
}

/// One row of the navigation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub map: String,
    pub model: String,
    pub runs: usize,
    /// Mean time to goal over successful episodes.
    pub mean_time: Option<f64>,
    pub mean_collision_events: f64,
    pub mean_penetration_steps: f64,
    pub success_percent: f64,
    pub successes: usize,
    pub min_clearance: f64,
    pub failed_solves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub summary: SuiteSummary,
    pub episodes: Vec<EpisodeResult>,
}

/// Seed of episode `index` in a suite seeded with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Runs `runs` episodes in parallel and aggregates them in episode order.
pub fn run_suite(
    map: &ObstacleMap,
    controller: &MpcController,
    model_name: &str,
    plant: &PlantParams,
    nav: &NavConfig,
    runs: usize,
    seed: u64,
) -> Result<SuiteResult> {
    if runs == 0 {
        return Err(Error::Argument("a suite needs at least one run".into()));
    }
    let grid = map.grid(nav)?;
    let episodes: Vec<EpisodeResult> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let scenario = sample_scenario(map, episode_seed(seed, i));
            run_episode_on_grid(map, &grid, &scenario, controller, plant, nav, i)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&map.name, model_name, &episodes);
    Ok(SuiteResult { summary, episodes })
}

pub fn summarize(map: &str, model: &str, episodes: &[EpisodeResult]) -> SuiteSummary {
    let n = episodes.len() as f64;
    let times: Vec<f64> = episodes
        .iter()
        .filter(|e| e.metrics.success)
        .filter_map(|e| e.metrics.time_to_goal)
        .collect();
    let successes = times.len();
    SuiteSummary {
        map: map.to_string(),
        model: model.to_string(),
        runs: episodes.len(),
        mean_time: if times.is_empty() {
            None
        } else {
            Some(times.iter().sum::<f64>() / times.len() as f64)
        },
        mean_collision_events: episodes.iter().map(|e| e.metrics.collision_events as f64).sum::<f64>() / n,
        mean_penetration_steps: episodes.iter().map(|e| e.metrics.penetration_steps as f64).sum::<f64>() / n,
        success_percent: 100.0 * successes as f64 / n,
        successes,
        min_clearance: episodes
            .iter()
            .map(|e| e.metrics.min_clearance)
            .fold(f64::INFINITY, f64::min),
        failed_solves: episodes.iter().filter(|e| e.metrics.failure.is_some()).count(),
    }
}

pub const EPISODES_HEADER: &str =
    "episode,start_x,start_y,start_theta,goal_x,goal_y,success,time_to_goal,collision_events,penetration_steps,min_clearance,path_length,final_distance,solves,softened_solves,failure";

/// One CSV row per episode.
pub fn episodes_csv(episodes: &[EpisodeResult]) -> String {
    let mut out = String::from(EPISODES_HEADER);
    out.push('\n');
    for e in episodes {
        let m = &e.metrics;
        let s = &e.scenario;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.index,
            s.start.px,
            s.start.py,
            s.start.theta,
            s.goal.x,
            s.goal.y,
            m.success,
            m.time_to_goal.map(|t| t.to_string()).unwrap_or_default(),
            m.collision_events,
            m.penetration_steps,
            m.min_clearance,
            m.path_length,
            m.final_distance,
            m.solves,
            m.softened_solves,
            m.failure.as_deref().unwrap_or("").replace(',', ";"),
        )
        .expect("string write");
    }
    out
}
