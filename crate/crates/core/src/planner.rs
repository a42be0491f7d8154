//! Global path planning on an inflated occupancy grid and local reference
//! extraction for the receding-horizon controller.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap, ConvexPolytope, Point2, Pose2};

pub const DEFAULT_RESOLUTION: f64 = 0.025;
pub const DEFAULT_INFLATION: f64 = 0.25;
pub const DEFAULT_NOMINAL_SPEED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: Cell, goal: Cell },
    #[error("{which} cell {cell:?} is occupied")]
    OccupiedEndpoint { which: &'static str, cell: Cell },
    #[error("cell {0:?} lies outside the grid")]
    OutOfBounds(Cell),
}

/// Grid cell as `(ix, iy)`: column then row.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    /// World position of the lower-left corner of cell `(0, 0)`.
    pub origin: Point2,
    pub width: usize,
    pub height: usize,
    /// Row-major occupancy, `occupancy[iy * width + ix]`.
    pub occupancy: Vec<bool>,
    pub inflation_radius: f64,
}

impl OccupancyGrid {
    /// A grid from explicit occupancy rows (`rows[iy][ix]`).
    pub fn from_rows(rows: &[Vec<bool>], resolution: f64) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Argument("occupancy rows must be non-empty and rectangular".into()));
        }
        if !(resolution > 0.0) {
            return Err(Error::Config(format!("grid resolution must be positive, got {resolution}")));
        }
        Ok(Self {
            resolution,
            origin: Point2::zeros(),
            width,
            height,
            occupancy: rows.iter().flatten().copied().collect(),
            inflation_radius: 0.0,
        })
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn contains_cell(&self, cell: Cell) -> bool {
        cell.0 < self.width && cell.1 < self.height
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.contains_cell(cell) && !self.occupancy[self.index(cell)]
    }

    pub fn cell_center(&self, cell: Cell) -> Point2 {
        self.origin + Point2::new((cell.0 as f64 + 0.5) * self.resolution, (cell.1 as f64 + 0.5) * self.resolution)
    }

    pub fn cell_of(&self, p: &Point2) -> Option<Cell> {
        let rel = (p - self.origin) / self.resolution;
        if rel.x < 0.0 || rel.y < 0.0 {
            return None;
        }
        let cell = (rel.x.floor() as usize, rel.y.floor() as usize);
        self.contains_cell(cell).then_some(cell)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|o| **o).count()
    }

    /// Closest free cell to `cell` by breadth-first search (4-connected).
    pub fn nearest_free(&self, cell: Cell) -> Option<Cell> {
        if !self.contains_cell(cell) {
            return None;
        }
        let mut seen = vec![false; self.occupancy.len()];
        let mut queue = VecDeque::from([cell]);
        seen[self.index(cell)] = true;
        while let Some(c) = queue.pop_front() {
            if self.is_free(c) {
                return Some(c);
            }
            for n in self.neighbors4(c) {
                let i = self.index(n);
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    fn neighbors4(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (x, y) = (c.0 as isize, c.1 as isize);
        [(1, 0), (-1, 0), (0, 1), (0, -1)].into_iter().filter_map(move |(dx, dy)| {
            let n = (x + dx, y + dy);
            (n.0 >= 0 && n.1 >= 0 && (n.0 as usize) < self.width && (n.1 as usize) < self.height)
                .then_some((n.0 as usize, n.1 as usize))
        })
    }

    /// Whether every cell touched by the segment `a -> b` is free.
    pub fn line_of_sight(&self, a: &Point2, b: &Point2) -> bool {
        let len = (b - a).norm();
        let steps = (len / (0.25 * self.resolution)).ceil().max(1.0) as usize;
        (0..=steps).all(|k| {
            let p = a + (b - a) * (k as f64 / steps as f64);
            self.cell_of(&p).is_some_and(|c| self.is_free(c))
        })
    }

    /// Plain PGM (P2) image, free cells white, top row = largest y.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for iy in (0..self.height).rev() {
            let row: Vec<&str> = (0..self.width)
                .map(|ix| if self.occupancy[iy * self.width + ix] { "0" } else { "255" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Marks every cell whose center lies within `inflation_radius` (signed
/// distance) of an obstacle.
pub fn rasterize(
    obstacles: &[ConvexPolytope],
    bounds: (Point2, Point2),
    resolution: f64,
    inflation_radius: f64,
) -> Result<OccupancyGrid> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::Config(format!("grid resolution must be positive, got {resolution}")));
    }
    if !(inflation_radius >= 0.0) {
        return Err(Error::Config(format!("inflation radius must be non-negative, got {inflation_radius}")));
    }
    let (lo, hi) = bounds;
    if !(hi.x > lo.x && hi.y > lo.y) {
        return Err(Error::Config("map bounds are empty".into()));
    }
    let width = ((hi.x - lo.x) / resolution - 1e-9).ceil() as usize;
    let height = ((hi.y - lo.y) / resolution - 1e-9).ceil() as usize;
    let boxes: Vec<(Point2, Point2)> = obstacles.iter().map(ConvexPolytope::bounding_box).collect();
    let mut grid = OccupancyGrid {
        resolution,
        origin: lo,
        width,
        height,
        occupancy: vec![false; width * height],
        inflation_radius,
    };
    for iy in 0..height {
        for ix in 0..width {
            let c = grid.cell_center((ix, iy));
            let hit = obstacles.iter().zip(&boxes).any(|(poly, (bl, bh))| {
                c.x >= bl.x - inflation_radius
                    && c.x <= bh.x + inflation_radius
                    && c.y >= bl.y - inflation_radius
                    && c.y <= bh.y + inflation_radius
                    && poly.signed_distance(&c).distance <= inflation_radius
            });
            grid.occupancy[iy * width + ix] = hit;
        }
    }
    Ok(grid)
}

/// A grid path with its exact move counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub straight_moves: usize,
    pub diagonal_moves: usize,
}

impl GridPath {
    /// Path cost in cells: `straight + sqrt(2) * diagonal`.
    pub fn cost(&self) -> f64 {
        self.straight_moves as f64 + std::f64::consts::SQRT_2 * self.diagonal_moves as f64
    }
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = a.0.abs_diff(b.0) as f64;
    let dy = a.1.abs_diff(b.1) as f64;
    dx.max(dy) - dx.min(dy) + std::f64::consts::SQRT_2 * dx.min(dy)
}

/// The 8-connected moves allowed from `c`. Diagonal moves may not cut an
/// occupied corner.
pub fn grid_moves(grid: &OccupancyGrid, c: Cell) -> Vec<(Cell, bool)> {
    let mut out = Vec::with_capacity(8);
    let (x, y) = (c.0 as isize, c.1 as isize);
    let free = |px: isize, py: isize| px >= 0 && py >= 0 && grid.is_free((px as usize, py as usize));
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x + dx, y + dy);
            if !free(nx, ny) {
                continue;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && !(free(x + dx, y) && free(x, y + dy)) {
                continue;
            }
            out.push(((nx as usize, ny as usize), diagonal));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenEntry {
    f: f64,
    g: f64,
    index: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    /// Max-heap order: smaller f first, then larger g, then smaller index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest 8-connected path under the octile metric.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell) -> std::result::Result<GridPath, PlanError> {
    for (which, cell) in [("start", start), ("goal", goal)] {
        if !grid.contains_cell(cell) {
            return Err(PlanError::OutOfBounds(cell));
        }
        if !grid.is_free(cell) {
            return Err(PlanError::OccupiedEndpoint { which, cell });
        }
    }
    let n = grid.width * grid.height;
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let s = grid.index(start);
    let goal_index = grid.index(goal);
    g[s] = 0.0;
    open.push(OpenEntry {
        f: octile(start, goal),
        g: 0.0,
        index: s,
    });
    while let Some(entry) = open.pop() {
        let i = entry.index;
        if closed[i] || entry.g > g[i] {
            continue;
        }
        closed[i] = true;
        if i == goal_index {
            break;
        }
        let cell = (i % grid.width, i / grid.width);
        for (next, diagonal) in grid_moves(grid, cell) {
            let j = grid.index(next);
            if closed[j] {
                continue;
            }
            let cost = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            let tentative = g[i] + cost;
            if tentative < g[j] {
                g[j] = tentative;
                parent[j] = i;
                open.push(OpenEntry {
                    f: tentative + octile(next, goal),
                    g: tentative,
                    index: j,
                });
            }
        }
    }
    if !closed[goal_index] {
        return Err(PlanError::NoPath { start, goal });
    }
    let mut cells = vec![goal];
    let mut i = goal_index;
    while i != s {
        i = parent[i];
        cells.push((i % grid.width, i / grid.width));
    }
    cells.reverse();
    let diagonal_moves = cells
        .windows(2)
        .filter(|w| w[0].0 != w[1].0 && w[0].1 != w[1].1)
        .count();
    Ok(GridPath {
        straight_moves: cells.len() - 1 - diagonal_moves,
        diagonal_moves,
        cells,
    })
}

/// Drops intermediate cells that are visible from the last kept point,
/// turning the staircase of grid moves into a short polyline.
pub fn shortcut_path(grid: &OccupancyGrid, points: &[Point2]) -> Vec<Point2> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut out = vec![points[0]];
    let mut anchor = 0;
    while anchor < points.len() - 1 {
        let mut next = anchor + 1;
        for j in (anchor + 2..points.len()).rev() {
            if grid.line_of_sight(&points[anchor], &points[j]) {
                next = j;
                break;
            }
        }
        out.push(points[next]);
        anchor = next;
    }
    out
}

/// Plans a world-frame polyline from `start` to `goal`.
///
/// Endpoints inside the inflated region are snapped to the nearest free
/// cell for the search; the returned polyline still begins and ends at the
/// requested points.
pub fn plan_path(grid: &OccupancyGrid, start: &Point2, goal: &Point2) -> Result<Vec<Point2>> {
    let locate = |p: &Point2, which: &'static str| -> Result<Cell> {
        let cell = grid
            .cell_of(p)
            .ok_or_else(|| Error::Argument(format!("{which} {p:?} lies outside the map")))?;
        grid.nearest_free(cell)
            .ok_or(Error::Plan(PlanError::OccupiedEndpoint { which, cell }))
    };
    let s = locate(start, "start")?;
    let g = locate(goal, "goal")?;
    let path = astar(grid, s, g)?;
    let mut points = vec![*start];
    points.extend(path.cells.iter().map(|c| grid.cell_center(*c)));
    points.push(*goal);
    let mut out = shortcut_path(grid, &points);
    out.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    Ok(out)
}

pub fn path_to_csv(path: &[Point2]) -> String {
    let mut out = String::from("x,y\n");
    for p in path {
        writeln!(out, "{},{}", p.x, p.y).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub poses: Vec<Pose2>,
    pub nominal_speed: f64,
}

/// A polyline with cumulative arc length, for repeated projections.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTracker {
    points: Vec<Point2>,
    arc: Vec<f64>,
}

impl PathTracker {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("reference path is empty".into()));
        }
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            arc.push(arc.last().unwrap() + (w[1] - w[0]).norm());
        }
        Ok(Self { points, arc })
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn goal(&self) -> Point2 {
        *self.points.last().unwrap()
    }

    /// Arc length of the closest point to `p`, optionally restricted to
    /// `[lo, hi]` in arc length.
    pub fn project(&self, p: &Point2, window: Option<(f64, f64)>) -> f64 {
        if self.points.len() == 1 {
            return 0.0;
        }
        let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in self.points.windows(2).enumerate() {
            let (a0, a1) = (self.arc[k], self.arc[k + 1]);
            if a1 < lo || a0 > hi {
                continue;
            }
            let seg = w[1] - w[0];
            let len2 = seg.norm_squared();
            let mut t = if len2 > 0.0 { (p - w[0]).dot(&seg) / len2 } else { 0.0 };
            let seg_len = a1 - a0;
            let (tmin, tmax) = if seg_len > 0.0 {
                (((lo - a0) / seg_len).max(0.0), ((hi - a0) / seg_len).min(1.0))
            } else {
                (0.0, 1.0)
            };
            t = t.clamp(tmin, tmax.max(tmin));
            let q = w[0] + seg * t;
            let d = (p - q).norm();
            if d < best.0 {
                best = (d, a0 + t * seg_len);
            }
        }
        best.1
    }

    /// Point and tangent heading at arc length `s` (clamped to the path).
    pub fn sample(&self, s: f64) -> Pose2 {
        let s = s.clamp(0.0, self.length());
        if self.points.len() == 1 {
            return Pose2::new(self.points[0].x, self.points[0].y, 0.0);
        }
        // Segment containing s; at a vertex the following segment wins,
        // at the goal the final segment.
        let mut k = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        k = k.min(self.points.len() - 2);
        // Skip degenerate segments for the tangent.
        let mut tk = k;
        while tk + 1 < self.points.len() - 1 && self.arc[tk + 1] - self.arc[tk] <= 0.0 {
            tk += 1;
        }
        while tk > 0 && self.arc[tk + 1] - self.arc[tk] <= 0.0 {
            tk -= 1;
        }
        let seg = self.points[tk + 1] - self.points[tk];
        let seg_len = self.arc[k + 1] - self.arc[k];
        let t = if seg_len > 0.0 { (s - self.arc[k]) / seg_len } else { 0.0 };
        let p = self.points[k] + (self.points[k + 1] - self.points[k]) * t;
        let heading = if seg.norm() > 0.0 { seg.y.atan2(seg.x) } else { 0.0 };
        Pose2::new(p.x, p.y, wrap(heading))
    }

    /// `horizon` poses starting at arc length `s0` and advancing by
    /// `nominal_speed * dt` per step, clamped at the goal.
    pub fn reference_from(&self, s0: f64, horizon: usize, nominal_speed: f64, dt: f64) -> ReferenceTrajectory {
        let step = nominal_speed * dt;
        let poses = (0..horizon).map(|k| self.sample(s0 + k as f64 * step)).collect();
        ReferenceTrajectory { poses, nominal_speed }
    }
}

/// Projects `pose` onto the path and emits the local reference from there.
pub fn local_reference(
    path: &[Point2],
    pose: &Pose2,
    horizon: usize,
    nominal_speed: f64,
    dt_mpc: f64,
) -> Result<ReferenceTrajectory> {
    let tracker = PathTracker::new(path.to_vec())?;
    let s0 = tracker.project(&pose.position(), None);
    Ok(tracker.reference_from(s0, horizon, nominal_speed, dt_mpc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn free_grid(w: usize, h: usize) -> OccupancyGrid {
        OccupancyGrid::from_rows(&vec![vec![false; w]; h], 1.0).unwrap()
    }

    #[test]
    fn astar_degenerate_and_straight() {
        let g = free_grid(20, 20);
        let p = astar(&g, (3, 4), (3, 4)).unwrap();
        assert_eq!(p.cells, vec![(3, 4)]);
        assert_eq!(p.cost(), 0.0);
        let p = astar(&g, (0, 0), (0, 10)).unwrap();
        assert_eq!(p.cells.len(), 11);
        assert_eq!(p.cost(), 10.0);
        let p = astar(&g, (0, 0), (3, 3)).unwrap();
        assert_eq!((p.straight_moves, p.diagonal_moves), (0, 3));
        assert!((p.cost() - 3.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn astar_errors() {
        let mut rows = vec![vec![false; 5]; 5];
        for row in rows.iter_mut() {
            row[2] = true;
        }
        let g = OccupancyGrid::from_rows(&rows, 1.0).unwrap();
        assert!(matches!(astar(&g, (0, 0), (4, 4)), Err(PlanError::NoPath { .. })));
        assert!(matches!(astar(&g, (2, 0), (4, 4)), Err(PlanError::OccupiedEndpoint { which: "start", .. })));
        assert!(matches!(astar(&g, (0, 0), (2, 4)), Err(PlanError::OccupiedEndpoint { which: "goal", .. })));
        assert!(matches!(astar(&g, (0, 0), (9, 4)), Err(PlanError::OutOfBounds(_))));
    }

    #[test]
    fn no_corner_cutting() {
        // Diagonal (0,0)->(1,1) blocked by an occupied orthogonal neighbour.
        let rows = vec![vec![false, true], vec![false, false]];
        let g = OccupancyGrid::from_rows(&rows, 1.0).unwrap();
        let p = astar(&g, (0, 0), (1, 1)).unwrap();
        assert_eq!(p.cells, vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn rasterize_square_and_empty() {
        let empty = rasterize(&[], (Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)), 0.1, 0.2).unwrap();
        assert_eq!(empty.occupied_count(), 0);
        assert_eq!((empty.width, empty.height), (10, 10));

        let sq = ConvexPolytope::rectangle(Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)).unwrap();
        let g = rasterize(&[sq.clone()], (Point2::new(0.0, 0.0), Point2::new(3.0, 3.0)), 0.1, 0.0).unwrap();
        for iy in 0..g.height {
            for ix in 0..g.width {
                let c = g.cell_center((ix, iy));
                let inside = c.x >= 1.0 && c.x <= 2.0 && c.y >= 1.0 && c.y <= 2.0;
                assert_eq!(!g.is_free((ix, iy)), inside, "cell {ix},{iy}");
            }
        }
        assert!(rasterize(&[sq], (Point2::zeros(), Point2::new(1.0, 1.0)), 0.0, 0.0).is_err());
    }

    #[test]
    fn narrow_gap_leaves_thin_channel() {
        // Two walls with a 0.55 m gap along y; inflation 0.25 leaves 0.05 m.
        let lower = ConvexPolytope::rectangle(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)).unwrap();
        let upper = ConvexPolytope::rectangle(Point2::new(0.0, 1.55), Point2::new(1.0, 2.55)).unwrap();
        let g = rasterize(&[lower, upper], (Point2::new(0.0, 0.0), Point2::new(1.0, 2.55)), 0.025, 0.25).unwrap();
        let ix = 20;
        let free: Vec<usize> = (0..g.height).filter(|&iy| g.is_free((ix, iy))).collect();
        assert_eq!(free.len(), 2, "free rows {free:?}");
        for iy in free {
            let y = g.cell_center((ix, iy)).y;
            assert!((1.25..=1.30).contains(&y));
        }
    }

    #[test]
    fn plan_path_is_collision_free() {
        let wall = ConvexPolytope::rectangle(Point2::new(1.0, 0.0), Point2::new(1.2, 1.5)).unwrap();
        let g = rasterize(&[wall], (Point2::zeros(), Point2::new(2.5, 2.5)), 0.05, 0.1).unwrap();
        let path = plan_path(&g, &Point2::new(0.3, 0.3), &Point2::new(2.2, 0.3)).unwrap();
        assert_eq!(path[0], Point2::new(0.3, 0.3));
        assert_eq!(*path.last().unwrap(), Point2::new(2.2, 0.3));
        for w in path.windows(2).skip(1).take(path.len().saturating_sub(3)) {
            assert!(g.line_of_sight(&w[0], &w[1]));
        }
        assert!(path.iter().any(|p| p.y > 1.5));
    }

    #[test]
    fn reference_at_goal_and_on_path() {
        let path = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        let r = local_reference(&path, &Pose2::new(1.0, 0.0, 0.0), 5, 0.5, 0.02).unwrap();
        assert!(r.poses.iter().all(|p| *p == Pose2::new(1.0, 0.0, 0.0)));
        let r = local_reference(&path, &Pose2::new(0.2, 0.0, 0.0), 4, 0.5, 0.02).unwrap();
        for (k, p) in r.poses.iter().enumerate() {
            assert!((p.px - (0.2 + 0.01 * k as f64)).abs() < 1e-12);
            assert_eq!(p.theta, 0.0);
        }
    }

    #[test]
    fn reference_projects_off_path_pose() {
        let path = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(1.0, 1.0)];
        let r = local_reference(&path, &Pose2::new(0.4, 0.3, 0.0), 3, 0.5, 0.02).unwrap();
        assert!((r.poses[0].px - 0.4).abs() < 1e-12 && r.poses[0].py.abs() < 1e-12);
        // Beyond the corner the heading follows the second segment.
        let r = local_reference(&path, &Pose2::new(1.3, 0.5, 0.0), 3, 0.5, 0.02).unwrap();
        assert!((r.poses[0].py - 0.5).abs() < 1e-12);
        assert!((r.poses[0].theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // Goal heading holds the final tangent.
        let r = local_reference(&path, &Pose2::new(1.0, 2.0, 0.0), 2, 0.5, 0.02).unwrap();
        assert!((r.poses[1].theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(local_reference(&[], &Pose2::default(), 3, 0.5, 0.02).is_err());
    }

    #[test]
    fn pgm_and_csv_exports() {
        let g = OccupancyGrid::from_rows(&[vec![false, true], vec![false, false]], 1.0).unwrap();
        assert_eq!(g.to_pgm(), "P2\n2 2\n255\n255 255\n255 0\n");
        assert_eq!(path_to_csv(&[Point2::new(1.0, 2.5)]), "x,y\n1,2.5\n");
    }

    proptest! {
        #[test]
        fn reference_spacing_bounded(
            pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..6),
            px in -3.0f64..3.0, py in -3.0f64..3.0,
        ) {
            let path: Vec<Point2> = pts.iter().map(|(x, y)| Point2::new(*x, *y)).collect();
            let r = local_reference(&path, &Pose2::new(px, py, 0.0), 30, 0.5, 0.02).unwrap();
            prop_assert_eq!(r.poses.len(), 30);
            for w in r.poses.windows(2) {
                prop_assert!((w[1].position() - w[0].position()).norm() <= 0.5 * 0.02 + 1e-9);
            }
        }

        #[test]
        fn rasterize_monotone_in_inflation(
            x in 0.5f64..1.5, y in 0.5f64..1.5, r1 in 0.0f64..0.3, dr in 0.0f64..0.3,
        ) {
            let poly = ConvexPolytope::rectangle(Point2::new(x, y), Point2::new(x + 0.4, y + 0.3)).unwrap();
            let bounds = (Point2::zeros(), Point2::new(2.5, 2.5));
            let a = rasterize(std::slice::from_ref(&poly), bounds, 0.05, r1).unwrap();
            let b = rasterize(&[poly], bounds, 0.05, r1 + dr).unwrap();
            for (oa, ob) in a.occupancy.iter().zip(&b.occupancy) {
                prop_assert!(!oa || *ob);
            }
        }
    }
}
