//! Planar rigid transforms, angle wrapping, and signed distances to convex
//! polytopes.
//!
//! Angles live in `(-π, π]`. Polytopes are stored as counter-clockwise vertex
//! loops with precomputed outward unit edge normals, so a signed-distance
//! query is a single pass over the edges.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::State;

pub type Point2 = Vector2<f64>;

/// Vertices closer than this are treated as duplicates.
const VERTEX_EPS: f64 = 1e-9;

/// Wraps an angle into `(-π, π]`.
///
/// Values already inside the interval are returned untouched, which makes the
/// map exactly idempotent.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::Domain(format!("cannot wrap non-finite angle {a}")));
    }
    Ok(wrap(a))
}

/// Infallible variant of [`wrap_angle`]; non-finite input passes through.
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Planar pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            px,
            py,
            theta: wrap(theta),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.px, self.py)
    }

    pub fn rotation(&self) -> Rotation2<f64> {
        Rotation2::new(self.theta)
    }

    /// Maps a world point into this pose's frame.
    pub fn point_to_local(&self, p: &Point2) -> Point2 {
        self.rotation().inverse() * (p - self.position())
    }

    /// Maps a point expressed in this pose's frame back to the world.
    pub fn point_to_world(&self, p: &Point2) -> Point2 {
        self.rotation() * p + self.position()
    }

    /// Expresses `other` in this pose's frame.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let p = self.point_to_local(&other.position());
        Pose2::new(p.x, p.y, other.theta - self.theta)
    }
}

/// Re-expresses a world-frame state in the frame of `frame`.
///
/// Position is translated then rotated by `R(-θ_frame)`, heading becomes the
/// wrapped difference, planar velocity is rotated, angular rate is unchanged.
pub fn to_frame(target: &State, frame: &Pose2) -> State {
    let rot = frame.rotation().inverse();
    let p = rot * (Point2::new(target.px, target.py) - frame.position());
    let v = rot * Vector2::new(target.vx, target.vy);
    State {
        px: p.x,
        py: p.y,
        theta: wrap(target.theta - frame.theta),
        vx: v.x,
        vy: v.y,
        omega: target.omega,
    }
}

/// Inverse of [`to_frame`].
pub fn from_frame(local: &State, frame: &Pose2) -> State {
    let rot = frame.rotation();
    let p = rot * Point2::new(local.px, local.py) + frame.position();
    let v = rot * Vector2::new(local.vx, local.vy);
    State {
        px: p.x,
        py: p.y,
        theta: wrap(local.theta + frame.theta),
        vx: v.x,
        vy: v.y,
        omega: local.omega,
    }
}

/// One collision circle rigidly attached to the robot body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyCircle {
    /// Offset along the body x-axis (meters).
    pub offset_x: f64,
    pub radius: f64,
}

impl BodyCircle {
    pub fn new(offset_x: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !offset_x.is_finite() || !radius.is_finite() {
            return Err(Error::Argument(format!(
                "body circle needs finite offset and positive radius, got ({offset_x}, {radius})"
            )));
        }
        Ok(Self { offset_x, radius })
    }

    /// Three circles of radius 0.25 m at -0.2, 0 and +0.2 m along the body.
    pub fn default_body() -> Vec<BodyCircle> {
        [-0.2, 0.0, 0.2]
            .into_iter()
            .map(|offset_x| BodyCircle {
                offset_x,
                radius: 0.25,
            })
            .collect()
    }
}

/// World positions of the body circle centers: `p + R(θ)·(offset, 0)`.
pub fn circle_centers(pose: &Pose2, circles: &[BodyCircle]) -> Vec<Point2> {
    let (s, c) = pose.theta.sin_cos();
    circles
        .iter()
        .map(|circle| Point2::new(pose.px + c * circle.offset_x, pose.py + s * circle.offset_x))
        .collect()
}

/// Strictly convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ConvexPolytope {
    vertices: Vec<Point2>,
    normals: Vec<Vector2<f64>>,
}

impl TryFrom<Vec<[f64; 2]>> for ConvexPolytope {
    type Error = Error;

    fn try_from(raw: Vec<[f64; 2]>) -> Result<Self> {
        ConvexPolytope::new(raw.into_iter().map(|[x, y]| Point2::new(x, y)).collect())
    }
}

impl From<ConvexPolytope> for Vec<[f64; 2]> {
    fn from(poly: ConvexPolytope) -> Self {
        poly.vertices.iter().map(|v| [v.x, v.y]).collect()
    }
}

/// Result of a signed-distance query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistance {
    /// Positive outside, negative inside, zero on the boundary.
    pub distance: f64,
    /// Unit gradient of the distance with respect to the query point.
    pub gradient: Vector2<f64>,
}

impl ConvexPolytope {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::Argument(format!("polytope needs at least 3 vertices, got {n}")));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::Argument("polytope vertex is not finite".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (vertices[i] - vertices[j]).norm() <= VERTEX_EPS {
                    return Err(Error::Argument(format!("polytope vertices {i} and {j} coincide")));
                }
            }
        }
        for i in 0..n {
            let e0 = vertices[(i + 1) % n] - vertices[i];
            let e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
            if e0.perp(&e1) <= 0.0 {
                return Err(Error::Argument(format!(
                    "polytope is not strictly convex counter-clockwise at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        // A CCW loop whose turns are all left can still wind more than once.
        let turning: f64 = (0..n)
            .map(|i| {
                let e0 = vertices[(i + 1) % n] - vertices[i];
                let e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
                e0.perp(&e1).atan2(e0.dot(&e1))
            })
            .sum();
        if (turning - TAU).abs() > 1e-6 {
            return Err(Error::Argument("polytope vertex loop winds more than once".into()));
        }
        let normals = (0..n)
            .map(|i| {
                let e = vertices[(i + 1) % n] - vertices[i];
                Vector2::new(e.y, -e.x) / e.norm()
            })
            .collect();
        Ok(Self { vertices, normals })
    }

    /// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
    pub fn rectangle(min: Point2, max: Point2) -> Result<Self> {
        Self::new(vec![
            min,
            Point2::new(max.x, min.y),
            max,
            Point2::new(min.x, max.y),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    /// Outward unit normal of edge `i` (from vertex `i` to `i + 1`).
    pub fn normals(&self) -> &[Vector2<f64>] {
        &self.normals
    }

    /// Image of this polytope under the world-to-local map of `frame`.
    pub fn to_frame(&self, frame: &Pose2) -> ConvexPolytope {
        let rot = frame.rotation().inverse();
        ConvexPolytope {
            vertices: self.vertices.iter().map(|v| frame.point_to_local(v)).collect(),
            normals: self.normals.iter().map(|n| rot * n).collect(),
        }
    }

    pub fn bounding_box(&self) -> (Point2, Point2) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn contains(&self, p: &Point2) -> bool {
        self.normals
            .iter()
            .zip(&self.vertices)
            .all(|(n, v)| n.dot(&(p - v)) <= 0.0)
    }

    /// Signed distance from `point` to the polytope boundary.
    ///
    /// Inside, the nearest boundary point lies on the closest supporting edge
    /// line, so the distance is the largest (least negative) edge offset.
    /// Ties go to the lower edge index.
    pub fn signed_distance(&self, point: &Point2) -> SignedDistance {
        let n = self.vertices.len();
        let mut best_offset = f64::NEG_INFINITY;
        let mut best_edge = 0;
        for i in 0..n {
            let offset = self.normals[i].dot(&(point - self.vertices[i]));
            if offset > best_offset {
                best_offset = offset;
                best_edge = i;
            }
        }
        if best_offset <= 0.0 {
            return SignedDistance {
                distance: best_offset,
                gradient: self.normals[best_edge],
            };
        }

        let mut best_sq = f64::INFINITY;
        let mut best_gradient = self.normals[0];
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let edge = b - a;
            let t = ((point - a).dot(&edge) / edge.norm_squared()).clamp(0.0, 1.0);
            let closest = a + edge * t;
            let diff = point - closest;
            let sq = diff.norm_squared();
            if sq < best_sq {
                best_sq = sq;
                best_gradient = if sq > 0.0 {
                    diff / sq.sqrt()
                } else {
                    self.normals[i]
                };
            }
        }
        SignedDistance {
            distance: best_sq.sqrt(),
            gradient: best_gradient,
        }
    }
}

/// Free-function form of [`ConvexPolytope::signed_distance`].
pub fn polytope_signed_distance(point: &Point2, poly: &ConvexPolytope) -> SignedDistance {
    poly.signed_distance(point)
}
