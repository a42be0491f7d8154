//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use knav_core::qp::QpProblem;
use knav_core::Point2;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A random convex polygon: sorted angles on a random ellipse, rotated and
/// shifted.
pub fn random_polygon(rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let n = rng.random_range(3..=8);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let (a, b) = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
    let rot: f64 = rng.random_range(-3.0..3.0);
    let (s, c) = rot.sin_cos();
    let center = Point2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    angles
        .iter()
        .map(|t| {
            let (x, y) = (a * t.cos(), b * t.sin());
            center + Point2::new(c * x - s * y, s * x + c * y)
        })
        .collect()
}

pub fn nearly_degenerate(v: &[Point2]) -> bool {
    let n = v.len();
    (0..n).any(|i| {
        let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
        let e1 = b - a;
        let e2 = c - b;
        e1.norm() < 1e-2 || (e1.x * e2.y - e1.y * e2.x) < 1e-3
    })
}

/// Distance to the boundary by dense sampling of every edge, refined by a
/// ternary search between the neighbours of the best sample.
pub fn sampled_boundary_distance(v: &[Point2], p: &Point2) -> f64 {
    const SAMPLES: usize = 400;
    let n = v.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        let at = |t: f64| (a + (b - a) * t - p).norm();
        let (mut k_best, mut d_best) = (0, f64::INFINITY);
        for k in 0..=SAMPLES {
            let d = at(k as f64 / SAMPLES as f64);
            if d < d_best {
                (k_best, d_best) = (k, d);
            }
        }
        let mut lo = k_best.saturating_sub(1) as f64 / SAMPLES as f64;
        let mut hi = (k_best + 1).min(SAMPLES) as f64 / SAMPLES as f64;
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if at(m1) < at(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best = best.min(d_best).min(at(0.5 * (lo + hi)));
    }
    best
}

/// Inside test by winding: every edge turns left towards the point.
pub fn inside(v: &[Point2], p: &Point2) -> bool {
    let n = v.len();
    (0..n).all(|i| {
        let (a, b) = (v[i], v[(i + 1) % n]);
        let e = b - a;
        let w = p - a;
        e.x * w.y - e.y * w.x > 0.0
    })
}

/// Inside, the distance is a minimum over edge lines and kinks where two
/// lines tie; outside it is continuously differentiable.
pub fn near_transition(v: &[Point2], p: &Point2) -> bool {
    let n = v.len();
    let mut line_dists: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            let e = (b - a).normalize();
            let w = p - a;
            (e.x * w.y - e.y * w.x).abs()
        })
        .collect();
    line_dists.sort_by(f64::total_cmp);
    let boundary = sampled_boundary_distance(v, p);
    boundary < 1e-3 || (inside(v, p) && line_dists[1] - line_dists[0] < 1e-3)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Strictly convex problem with a known feasible point.
pub fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=14);
    let m_eq = rng.random_range(0..=6usize.min(n - 1));
    let m_in = rng.random_range(0..=8);
    let l = gaussian_matrix(rng, n, n);
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let linear = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = gaussian_matrix(rng, m_eq, n);
    let b = &a * &z0;
    let g = gaussian_matrix(rng, m_in, n);
    let slack = DVector::from_fn(m_in, |_, _| rng.random_range(0.0..0.5));
    let h = &g * &z0 - slack;
    QpProblem::new(hessian, linear).with_equalities(a, b).with_inequalities(g, h)
}

/// Minimizes over every subset of inequalities treated as equalities and
/// keeps the best point that satisfies all constraints.
pub fn enumerate(problem: &QpProblem) -> f64 {
    let n = problem.num_vars();
    let m_eq = problem.eq_matrix.nrows();
    let m_in = problem.ineq_matrix.nrows();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let m = m_eq + active.len();
        if m > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&problem.linear));
        for r in 0..m {
            let (row, value) = if r < m_eq {
                (problem.eq_matrix.row(r).clone_owned(), problem.eq_rhs[r])
            } else {
                let i = active[r - m_eq];
                (problem.ineq_matrix.row(i).clone_owned(), problem.ineq_rhs[i])
            };
            kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
            rhs[n + r] = value;
        }
        let svd = kkt.clone().svd(false, false);
        let smin = svd.singular_values.min();
        if smin < 1e-9 * svd.singular_values.max() {
            continue;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).clone_owned();
        if problem.max_violation(&z) <= 1e-9 {
            best = best.min(problem.objective(&z));
        }
    }
    best
}

pub const N: usize = 30;

/// Path cost `a + b·√2` kept as the exact pair `(a, b)`; ordered by value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cost(pub usize, pub usize);

impl Cost {
    pub fn value(self) -> f64 {
        self.0 as f64 + std::f64::consts::SQRT_2 * self.1 as f64
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.value().total_cmp(&other.value())
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// 8-connected Dijkstra; a diagonal step needs both side cells free.
pub fn dijkstra(free: &[Vec<bool>], start: (usize, usize), goal: (usize, usize)) -> Option<Cost> {
    let ok = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < N && (y as usize) < N && free[y as usize][x as usize];
    let mut dist = vec![vec![None::<Cost>; N]; N];
    let mut heap = BinaryHeap::new();
    dist[start.1][start.0] = Some(Cost(0, 0));
    heap.push(Reverse((Cost(0, 0), start)));
    while let Some(Reverse((cost, (x, y)))) = heap.pop() {
        if dist[y][x].is_some_and(|d| d < cost) {
            continue;
        }
        if (x, y) == goal {
            return Some(cost);
        }
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if !ok(nx, ny) {
                    continue;
                }
                let diagonal = dx != 0 && dy != 0;
                if diagonal && !(ok(x as isize + dx, y as isize) && ok(x as isize, y as isize + dy)) {
                    continue;
                }
                let next = if diagonal { Cost(cost.0, cost.1 + 1) } else { Cost(cost.0 + 1, cost.1) };
                let (nx, ny) = (nx as usize, ny as usize);
                if dist[ny][nx].is_none_or(|d| next < d) {
                    dist[ny][nx] = Some(next);
                    heap.push(Reverse((next, (nx, ny))));
                }
            }
        }
    }
    None
}

pub struct System {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Random system with spectral norm of `A` at most 0.95 so rollouts stay bounded.
pub fn random_system(rng: &mut ChaCha8Rng) -> System {
    let p = rng.random_range(1..=6);
    let m = rng.random_range(1..=3);
    let mut a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = a.clone().svd(false, false).singular_values.max();
    a *= 0.95 / norm.max(1e-12);
    let b = DMatrix::from_fn(p, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    System { a, b }
}

/// One rollout under i.i.d. Gaussian inputs: sources `[x; u]`, targets `x'`.
pub fn rollout(sys: &System, samples: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, m) = (sys.a.nrows(), sys.b.ncols());
    let mut sources = DMatrix::zeros(p + m, samples);
    let mut targets = DMatrix::zeros(p, samples);
    let mut x = DMatrix::from_fn(p, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    for t in 0..samples {
        let u = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let next = &sys.a * &x + &sys.b * &u;
        sources.view_mut((0, t), (p, 1)).copy_from(&x);
        sources.view_mut((p, t), (m, 1)).copy_from(&u);
        targets.column_mut(t).copy_from(&next.column(0));
        x = next;
    }
    (targets, sources)
}
