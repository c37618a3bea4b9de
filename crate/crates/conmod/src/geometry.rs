//! Plane geometry for quadrilateral boundary descriptions: points, boundary
//! pieces (segments, circular arcs, parametric arcs), inversion in a point,
//! and constructors for the domain families handled by the solver.
//!
//! A quadrilateral is a Jordan curve split into four sides by four marked
//! corners z1..z4 in positive (counterclockwise) order. Side `j` runs from
//! corner `j` to corner `j+1 mod 4`. The boundary-condition convention used
//! by the solver lives in the mesh module; here sides are purely geometric.

use thiserror::Error;

/// Relative tolerance for coincidence decisions (collinearity, closure,
/// on-boundary checks), scaled by the size of the configuration at hand.
const GEOM_REL_TOL: f64 = 1e-12;

/// Errors reported by geometric constructions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("the three points are collinear within tolerance")]
    CollinearPoints,
    #[error("inversion center coincides with the point being inverted")]
    CenterOnPoint,
    #[error("inversion center lies on the curve within tolerance")]
    CenterOnCurve,
    #[error("inversion center must lie strictly inside the quadrilateral")]
    CenterOutsideDomain,
    #[error("point lies on the boundary within tolerance")]
    PointOnBoundary,
    #[error("corners are not in positive (counterclockwise) order")]
    NotPositivelyOriented,
    #[error("boundary is self-intersecting")]
    SelfIntersecting,
    #[error("boundary pieces do not join into a closed curve: {0}")]
    OpenBoundary(String),
    #[error("parametric pieces can only be inverted about the origin")]
    UnsupportedInversionCenter,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A point of the plane, also used as a 2-vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Point2::new(radius * angle.cos(), radius * angle.sin())
    }

    #[inline]
    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product, positive when `other` lies
    /// counterclockwise of `self`.
    #[inline]
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    #[inline]
    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn normalized(self) -> Point2 {
        let n = self.norm();
        Point2::new(self.x / n, self.y / n)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        self + (other - self) * t
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl std::ops::Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Closed parametric curves available to `BoundaryPiece::ParametricArc`.
///
/// Both families are parametrized with polar angle pi*t and have period 2,
/// so any parameter window of length 2 traverses the curve once
/// counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamCurve {
    /// r(t) = 4/5 + (1/5) cos(petals * pi * t).
    Flower { petals: u32 },
    /// Pointwise inversion of the flower about the origin:
    /// r(t) = 1 / (4/5 + (1/5) cos(petals * pi * t)).
    InvertedFlower { petals: u32 },
}

impl ParamCurve {
    fn radius(self, t: f64) -> f64 {
        match self {
            ParamCurve::Flower { petals } => 0.8 + 0.2 * (petals as f64 * std::f64::consts::PI * t).cos(),
            ParamCurve::InvertedFlower { petals } => {
                1.0 / (0.8 + 0.2 * (petals as f64 * std::f64::consts::PI * t).cos())
            }
        }
    }

    fn radius_derivative(self, t: f64) -> f64 {
        let pi = std::f64::consts::PI;
        match self {
            ParamCurve::Flower { petals } => {
                let n = petals as f64;
                -0.2 * n * pi * (n * pi * t).sin()
            }
            ParamCurve::InvertedFlower { petals } => {
                let n = petals as f64;
                let r = 0.8 + 0.2 * (n * pi * t).cos();
                0.2 * n * pi * (n * pi * t).sin() / (r * r)
            }
        }
    }

    pub fn point(self, t: f64) -> Point2 {
        Point2::from_polar(self.radius(t), std::f64::consts::PI * t)
    }

    /// Derivative with respect to t (not normalized).
    pub fn derivative(self, t: f64) -> Point2 {
        let pi = std::f64::consts::PI;
        let r = self.radius(t);
        let dr = self.radius_derivative(t);
        let (sin, cos) = (pi * t).sin_cos();
        Point2::new(dr * cos - r * pi * sin, dr * sin + r * pi * cos)
    }

    pub fn inverted(self) -> ParamCurve {
        match self {
            ParamCurve::Flower { petals } => ParamCurve::InvertedFlower { petals },
            ParamCurve::InvertedFlower { petals } => ParamCurve::Flower { petals },
        }
    }
}

/// One piece of a quadrilateral side, parametrized over s in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryPiece {
    Segment {
        start: Point2,
        end: Point2,
    },
    /// Arc of the circle around `center`, with the polar angle interpolating
    /// linearly from `start_angle` to `end_angle` (decreasing for clockwise
    /// traversal; the sweep may exceed pi but not a full turn).
    CircularArc {
        center: Point2,
        radius: f64,
        start_angle: f64,
        end_angle: f64,
    },
    /// Restriction of `curve` to the parameter interval from `t_start` to
    /// `t_end` (reversed traversal when `t_end < t_start`).
    ParametricArc {
        curve: ParamCurve,
        t_start: f64,
        t_end: f64,
    },
}

impl BoundaryPiece {
    pub fn segment(start: Point2, end: Point2) -> Self {
        BoundaryPiece::Segment { start, end }
    }

    pub fn point(&self, s: f64) -> Point2 {
        match *self {
            BoundaryPiece::Segment { start, end } => start.lerp(end, s),
            BoundaryPiece::CircularArc {
                center,
                radius,
                start_angle,
                end_angle,
            } => center + Point2::from_polar(radius, start_angle + (end_angle - start_angle) * s),
            BoundaryPiece::ParametricArc {
                curve,
                t_start,
                t_end,
            } => curve.point(t_start + (t_end - t_start) * s),
        }
    }

    pub fn start(&self) -> Point2 {
        self.point(0.0)
    }

    pub fn end(&self) -> Point2 {
        self.point(1.0)
    }

    /// Derivative of the point with respect to s (not normalized).
    pub fn derivative(&self, s: f64) -> Point2 {
        match *self {
            BoundaryPiece::Segment { start, end } => end - start,
            BoundaryPiece::CircularArc {
                radius,
                start_angle,
                end_angle,
                ..
            } => {
                let angle = start_angle + (end_angle - start_angle) * s;
                Point2::new(-angle.sin(), angle.cos()) * (radius * (end_angle - start_angle))
            }
            BoundaryPiece::ParametricArc {
                curve,
                t_start,
                t_end,
            } => curve.derivative(t_start + (t_end - t_start) * s) * (t_end - t_start),
        }
    }

    /// Unit tangent in the direction of increasing s.
    pub fn tangent(&self, s: f64) -> Point2 {
        match *self {
            BoundaryPiece::Segment { start, end } => (end - start).normalized(),
            BoundaryPiece::CircularArc {
                start_angle,
                end_angle,
                ..
            } => {
                let angle = start_angle + (end_angle - start_angle) * s;
                let turn = if end_angle >= start_angle { 1.0 } else { -1.0 };
                Point2::new(-angle.sin(), angle.cos()) * turn
            }
            BoundaryPiece::ParametricArc {
                curve,
                t_start,
                t_end,
            } => {
                let d = curve.derivative(t_start + (t_end - t_start) * s);
                let sign = if t_end >= t_start { 1.0 } else { -1.0 };
                (d * sign).normalized()
            }
        }
    }

    pub fn is_straight(&self) -> bool {
        matches!(self, BoundaryPiece::Segment { .. })
    }

    /// The same point set traversed in the opposite direction.
    pub fn reversed(&self) -> BoundaryPiece {
        match *self {
            BoundaryPiece::Segment { start, end } => BoundaryPiece::Segment {
                start: end,
                end: start,
            },
            BoundaryPiece::CircularArc {
                center,
                radius,
                start_angle,
                end_angle,
            } => BoundaryPiece::CircularArc {
                center,
                radius,
                start_angle: end_angle,
                end_angle: start_angle,
            },
            BoundaryPiece::ParametricArc {
                curve,
                t_start,
                t_end,
            } => BoundaryPiece::ParametricArc {
                curve,
                t_start: t_end,
                t_end: t_start,
            },
        }
    }

    /// Restriction to the sub-interval [s0, s1] of the current parameter,
    /// reparametrized over [0, 1].
    pub fn subpiece(&self, s0: f64, s1: f64) -> BoundaryPiece {
        match *self {
            BoundaryPiece::Segment { .. } => BoundaryPiece::Segment {
                start: self.point(s0),
                end: self.point(s1),
            },
            BoundaryPiece::CircularArc {
                center,
                radius,
                start_angle,
                end_angle,
            } => {
                let sweep = end_angle - start_angle;
                BoundaryPiece::CircularArc {
                    center,
                    radius,
                    start_angle: start_angle + sweep * s0,
                    end_angle: start_angle + sweep * s1,
                }
            }
            BoundaryPiece::ParametricArc {
                curve,
                t_start,
                t_end,
            } => {
                let span = t_end - t_start;
                BoundaryPiece::ParametricArc {
                    curve,
                    t_start: t_start + span * s0,
                    t_end: t_start + span * s1,
                }
            }
        }
    }

    /// Parameter values (including 0 and 1) of a polyline that deviates
    /// from the piece by at most `rel_tol` times the local chord length.
    pub fn flatten(&self, rel_tol: f64) -> Vec<f64> {
        if self.is_straight() {
            return vec![0.0, 1.0];
        }
        let mut params = vec![0.0];
        flatten_recurse(self, 0.0, 1.0, rel_tol, 0, &mut params);
        params.push(1.0);
        params
    }
}

fn flatten_recurse(
    piece: &BoundaryPiece,
    s0: f64,
    s1: f64,
    rel_tol: f64,
    depth: u32,
    out: &mut Vec<f64>,
) {
    let mid = 0.5 * (s0 + s1);
    let a = piece.point(s0);
    let b = piece.point(s1);
    let m = piece.point(mid);
    let chord = b - a;
    let chord_len = chord.norm();
    let deviation = (m - a.lerp(b, 0.5)).norm();
    // Probing only the midpoint can miss a symmetric wiggle; force a few
    // subdivisions before trusting the flatness estimate.
    if depth >= 3 && deviation <= rel_tol * chord_len && chord_len > 0.0 {
        return;
    }
    if depth >= 24 {
        return;
    }
    flatten_recurse(piece, s0, mid, rel_tol, depth + 1, out);
    out.push(mid);
    flatten_recurse(piece, mid, s1, rel_tol, depth + 1, out);
}

/// A Jordan quadrilateral: four sides, each a chain of boundary pieces,
/// with side `j` running from corner `j` to corner `j+1 mod 4` and the whole
/// boundary positively oriented.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrilateralSpec {
    sides: [Vec<BoundaryPiece>; 4],
}

impl QuadrilateralSpec {
    /// Builds a quadrilateral from explicit sides, validating that
    /// consecutive pieces join and the boundary closes.
    pub fn from_sides(sides: [Vec<BoundaryPiece>; 4]) -> Result<Self, GeometryError> {
        let scale = sides
            .iter()
            .flatten()
            .map(|p| p.start().dist(p.end()))
            .fold(0.0_f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let tol = 1e-9 * scale;
        let mut flat: Vec<&BoundaryPiece> = sides.iter().flatten().collect();
        if flat.is_empty() || sides.iter().any(|s| s.is_empty()) {
            return Err(GeometryError::OpenBoundary("a side has no pieces".into()));
        }
        flat.push(flat[0]);
        for pair in flat.windows(2) {
            let gap = pair[0].end().dist(pair[1].start());
            if gap > tol {
                return Err(GeometryError::OpenBoundary(format!(
                    "gap of {gap:.3e} between consecutive pieces"
                )));
            }
        }
        Ok(QuadrilateralSpec { sides })
    }

    /// Polygonal quadrilateral with the given corners in positive order.
    pub fn polygon(corners: [Point2; 4]) -> Result<Self, GeometryError> {
        polygon_checks(&corners)?;
        let sides = std::array::from_fn(|j| {
            vec![BoundaryPiece::segment(corners[j], corners[(j + 1) % 4])]
        });
        QuadrilateralSpec::from_sides(sides)
    }

    pub fn sides(&self) -> &[Vec<BoundaryPiece>; 4] {
        &self.sides
    }

    pub fn corners(&self) -> [Point2; 4] {
        std::array::from_fn(|j| self.sides[j][0].start())
    }

    /// All pieces in boundary order.
    pub fn pieces(&self) -> impl Iterator<Item = &BoundaryPiece> {
        self.sides.iter().flatten()
    }

    /// The conjugate marking: corners shifted forward by `shift`, so the
    /// new first corner is the old corner `shift`.
    pub fn rotated(&self, shift: usize) -> QuadrilateralSpec {
        QuadrilateralSpec {
            sides: std::array::from_fn(|j| self.sides[(j + shift) % 4].clone()),
        }
    }

    /// Average of the four corners; the default inversion center.
    pub fn corner_centroid(&self) -> Point2 {
        let c = self.corners();
        (c[0] + c[1] + c[2] + c[3]) * 0.25
    }

    /// Interior angle at each corner, in (0, 2 pi), measured between the
    /// outgoing side direction and the reversed incoming side direction.
    pub fn corner_angles(&self) -> [f64; 4] {
        std::array::from_fn(|j| {
            let outgoing = self.sides[j][0].tangent(0.0);
            let incoming = self.sides[(j + 3) % 4].last_piece().tangent(1.0);
            ccw_angle(outgoing, -incoming)
        })
    }

    /// Polyline over the whole boundary with the given relative flatness,
    /// as (point, side index) samples in boundary order, without the closing
    /// repetition of the first point.
    pub fn boundary_polyline(&self, rel_tol: f64) -> Vec<(Point2, usize)> {
        let mut out = Vec::new();
        for (j, side) in self.sides.iter().enumerate() {
            for piece in side {
                let params = piece.flatten(rel_tol);
                for window in params.windows(2) {
                    out.push((piece.point(window[0]), j));
                    let _ = window;
                }
            }
        }
        out
    }

    /// Largest distance from `center` to the boundary.
    pub fn max_radius_about(&self, center: Point2) -> f64 {
        self.boundary_polyline(0.01)
            .iter()
            .map(|&(p, _)| p.dist(center))
            .fold(0.0, f64::max)
    }
}

trait SideExt {
    fn last_piece(&self) -> &BoundaryPiece;
}

impl SideExt for Vec<BoundaryPiece> {
    fn last_piece(&self) -> &BoundaryPiece {
        self.last().expect("sides are validated non-empty")
    }
}

/// Counterclockwise angle from `from` to `to`, in (0, 2 pi].
pub fn ccw_angle(from: Point2, to: Point2) -> f64 {
    let raw = to.angle() - from.angle();
    let wrapped = raw.rem_euclid(2.0 * std::f64::consts::PI);
    if wrapped == 0.0 {
        2.0 * std::f64::consts::PI
    } else {
        wrapped
    }
}

fn polygon_checks(corners: &[Point2; 4]) -> Result<(), GeometryError> {
    let scale = corners
        .iter()
        .flat_map(|a| corners.iter().map(move |b| a.dist(*b)))
        .fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return Err(GeometryError::InvalidParameter("all corners coincide".into()));
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            if corners[i].dist(corners[j]) < GEOM_REL_TOL * scale {
                return Err(GeometryError::InvalidParameter(format!(
                    "corners {i} and {j} coincide"
                )));
            }
        }
    }
    let mut area2 = 0.0;
    for i in 0..4 {
        area2 += corners[i].cross(corners[(i + 1) % 4]);
    }
    if area2 <= 0.0 {
        return Err(GeometryError::NotPositivelyOriented);
    }
    // Opposite sides of a simple polygon never intersect.
    for &(i, j) in &[(0usize, 2usize), (1, 3)] {
        if segments_intersect(
            corners[i],
            corners[(i + 1) % 4],
            corners[j],
            corners[(j + 1) % 4],
        ) {
            return Err(GeometryError::SelfIntersecting);
        }
    }
    Ok(())
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let orient = |p: Point2, q: Point2, r: Point2| (q - p).cross(r - p);
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Center and radius of the circle through three non-collinear points.
pub fn circle_through(p: Point2, q: Point2, r: Point2) -> Result<(Point2, f64), GeometryError> {
    let scale = p.dist(q).max(q.dist(r)).max(r.dist(p));
    let denom = 2.0 * (q - p).cross(r - p);
    if denom.abs() <= GEOM_REL_TOL * scale * scale {
        return Err(GeometryError::CollinearPoints);
    }
    let p2 = p.norm_sq();
    let q2 = q.norm_sq();
    let r2 = r.norm_sq();
    let ux = (p2 * (q.y - r.y) + q2 * (r.y - p.y) + r2 * (p.y - q.y)) / denom;
    let uy = (p2 * (r.x - q.x) + q2 * (p.x - r.x) + r2 * (q.x - p.x)) / denom;
    let center = Point2::new(ux, uy);
    Ok((center, center.dist(p)))
}

/// Inversion of a point: w = c + (z - c) / |z - c|^2.
pub fn invert_point(z: Point2, center: Point2) -> Result<Point2, GeometryError> {
    let d = z - center;
    let n2 = d.norm_sq();
    if n2 == 0.0 {
        return Err(GeometryError::CenterOnPoint);
    }
    Ok(center + d * (1.0 / n2))
}

/// Image of a boundary piece under inversion about `center`.
///
/// Segments map to circular arcs (or segments when the supporting line
/// passes through the center); circular arcs map to arcs or to segments
/// when their circle passes through the center; parametric arcs map to arcs
/// of the pointwise-inverted curve and require `center` to be the origin.
pub fn invert_piece(
    piece: &BoundaryPiece,
    center: Point2,
) -> Result<BoundaryPiece, GeometryError> {
    let scale = piece.start().dist(piece.end()).max(piece.start().dist(center));
    match *piece {
        BoundaryPiece::Segment { start, end } => {
            let dir = (end - start).normalized();
            let offset = (center - start).cross(dir).abs();
            let w0 = invert_point(start, center)?;
            let w1 = invert_point(end, center)?;
            if offset <= GEOM_REL_TOL * scale {
                // Supporting line through the center: the image stays on it.
                near_check(piece, center, scale)?;
                return Ok(BoundaryPiece::Segment { start: w0, end: w1 });
            }
            arc_between(w0, w1, invert_point(piece.point(0.5), center)?)
        }
        BoundaryPiece::CircularArc { center: o, radius, .. } => {
            let w0 = invert_point(piece.start(), center)?;
            let w1 = invert_point(piece.end(), center)?;
            if (o.dist(center) - radius).abs() <= GEOM_REL_TOL * radius.max(scale) {
                // Circle through the center: the image is a straight chord.
                near_check(piece, center, scale)?;
                return Ok(BoundaryPiece::Segment { start: w0, end: w1 });
            }
            arc_between(w0, w1, invert_point(piece.point(0.5), center)?)
        }
        BoundaryPiece::ParametricArc {
            curve,
            t_start,
            t_end,
        } => {
            if center.norm() > GEOM_REL_TOL {
                return Err(GeometryError::UnsupportedInversionCenter);
            }
            Ok(BoundaryPiece::ParametricArc {
                curve: curve.inverted(),
                t_start,
                t_end,
            })
        }
    }
}

fn near_check(piece: &BoundaryPiece, center: Point2, scale: f64) -> Result<(), GeometryError> {
    for i in 0..=16 {
        if piece.point(i as f64 / 16.0).dist(center) <= GEOM_REL_TOL * scale {
            return Err(GeometryError::CenterOnCurve);
        }
    }
    Ok(())
}

/// Circular arc from `w0` to `w1` whose interior passes through `wm`.
fn arc_between(w0: Point2, w1: Point2, wm: Point2) -> Result<BoundaryPiece, GeometryError> {
    let (center, radius) = circle_through(w0, wm, w1)?;
    let a0 = (w0 - center).angle();
    let a1 = (w1 - center).angle();
    let am = (wm - center).angle();
    let two_pi = 2.0 * std::f64::consts::PI;
    let ccw_end = a0 + (a1 - a0).rem_euclid(two_pi);
    let ccw_mid = a0 + (am - a0).rem_euclid(two_pi);
    let (start_angle, end_angle) = if ccw_mid <= ccw_end {
        (a0, ccw_end)
    } else {
        (a0, ccw_end - two_pi)
    };
    Ok(BoundaryPiece::CircularArc {
        center,
        radius,
        start_angle,
        end_angle,
    })
}

/// Whether `z` lies strictly inside the quadrilateral, by winding number of
/// a flattened boundary polyline. Points within 1e-9 of the boundary
/// (relative to its diameter) are rejected as ambiguous.
pub fn point_inside(quad: &QuadrilateralSpec, z: Point2) -> Result<bool, GeometryError> {
    let polyline = quad.boundary_polyline(0.02);
    let n = polyline.len();
    let scale = quad
        .corners()
        .iter()
        .map(|c| c.dist(quad.corner_centroid()))
        .fold(0.0_f64, f64::max);
    let tol = 1e-9 * scale;
    let mut winding = 0.0;
    for i in 0..n {
        let a = polyline[i].0;
        let b = polyline[(i + 1) % n].0;
        if dist_point_segment(z, a, b) <= tol {
            return Err(GeometryError::PointOnBoundary);
        }
        let u = a - z;
        let v = b - z;
        winding += u.cross(v).atan2(u.dot(v));
    }
    Ok(winding.abs() > std::f64::consts::PI)
}

fn dist_point_segment(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sq();
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Inversion of the whole quadrilateral about an interior `center`: maps the
/// unbounded complementary domain onto a bounded one whose boundary is again
/// positively oriented. The image marking starts at the image of the last
/// corner, so the first and third image sides are the images of the last and
/// second original sides; an interior solve on the image with plates on its
/// first and third sides computes the exterior modulus of the original.
pub fn invert_quadrilateral(
    quad: &QuadrilateralSpec,
    center: Point2,
) -> Result<QuadrilateralSpec, GeometryError> {
    if !point_inside(quad, center)? {
        return Err(GeometryError::CenterOutsideDomain);
    }
    let inverted_side = |j: usize| -> Result<Vec<BoundaryPiece>, GeometryError> {
        quad.sides[j]
            .iter()
            .map(|piece| invert_piece(piece, center))
            .collect()
    };
    QuadrilateralSpec::from_sides([
        inverted_side(3)?,
        inverted_side(0)?,
        inverted_side(1)?,
        inverted_side(2)?,
    ])
}

/// Rectangle inscribed in the unit circle with corners 1, e^{it}, -1,
/// -e^{it}, together with its analytic interior modulus tan(t/2) for the
/// marking that joins the two short sides.
pub fn rect_on_circle(t: f64) -> Result<(QuadrilateralSpec, f64), GeometryError> {
    if !(t.is_finite() && t > 0.0 && t < std::f64::consts::PI) {
        return Err(GeometryError::InvalidParameter(format!(
            "opening angle must lie in (0, pi), got {t}"
        )));
    }
    let quad = QuadrilateralSpec::polygon([
        Point2::new(1.0, 0.0),
        Point2::from_polar(1.0, t),
        Point2::new(-1.0, 0.0),
        -Point2::from_polar(1.0, t),
    ])?;
    Ok((quad, (t / 2.0).tan()))
}

/// Trapezoid with corners 0, 1, t + ih, t - s + ih used by the side-sliding
/// experiment; errors when the corners fail to bound a simple positively
/// oriented polygon.
pub fn side_slide_quad(h: f64, s: f64, t: f64) -> Result<QuadrilateralSpec, GeometryError> {
    if !(h.is_finite() && s.is_finite() && t.is_finite()) || h <= 0.0 || s <= 0.0 {
        return Err(GeometryError::InvalidParameter(format!(
            "need h > 0 and s > 0, got h = {h}, s = {s}"
        )));
    }
    QuadrilateralSpec::polygon([
        Point2::new(0.0, 0.0),
        Point2::new(1.0, 0.0),
        Point2::new(t, h),
        Point2::new(t - s, h),
    ])
}

/// Flower-shaped quadrilateral: boundary r(t) e^{i pi t} with
/// r(t) = 4/5 + cos(n pi t)/5 and period 2. Corners are marked at t = 0,
/// 1/2, and 1, plus the petal valley t = -q/n for the smallest odd
/// integer q at or above n/4, all extremal points of the radius.
pub fn flower_quad(petals: u32) -> Result<QuadrilateralSpec, GeometryError> {
    if petals == 0 || petals % 2 != 0 {
        return Err(GeometryError::InvalidParameter(format!(
            "petal count must be even and positive, got {petals}"
        )));
    }
    let curve = ParamCurve::Flower { petals };
    let arc = |t_start: f64, t_end: f64| {
        vec![BoundaryPiece::ParametricArc {
            curve,
            t_start,
            t_end,
        }]
    };
    let mut q = (petals as f64 / 4.0).ceil() as u32;
    if q % 2 == 0 {
        q += 1;
    }
    let t4 = 2.0 - q as f64 / petals as f64;
    QuadrilateralSpec::from_sides([
        arc(0.0, 0.5),
        arc(0.5, 1.0),
        arc(1.0, t4),
        arc(t4, 2.0),
    ])
}

/// Unit disk marked at the four points 1, i, -1, -i.
pub fn circle_quad() -> QuadrilateralSpec {
    let pi = std::f64::consts::PI;
    let arc = |a0: f64, a1: f64| {
        vec![BoundaryPiece::CircularArc {
            center: Point2::new(0.0, 0.0),
            radius: 1.0,
            start_angle: a0,
            end_angle: a1,
        }]
    };
    QuadrilateralSpec::from_sides([
        arc(0.0, 0.5 * pi),
        arc(0.5 * pi, pi),
        arc(pi, 1.5 * pi),
        arc(1.5 * pi, 2.0 * pi),
    ])
    .expect("disk boundary closes by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_square() -> QuadrilateralSpec {
        QuadrilateralSpec::polygon([
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn circle_through_reference_cases() {
        let (c, r) = circle_through(
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(-1.0, 0.0),
        )
        .unwrap();
        assert!(c.norm() < 1e-14 && (r - 1.0).abs() < 1e-14);

        let (c, r) = circle_through(
            Point2::new(0.5, 0.0),
            Point2::new(0.0, 0.5),
            Point2::new(0.5, 0.5),
        )
        .unwrap();
        assert!((c - Point2::new(0.25, 0.25)).norm() < 1e-14);
        assert!((r - 0.125f64.sqrt()).abs() < 1e-14);

        assert_eq!(
            circle_through(
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(2.0, 2.0)
            ),
            Err(GeometryError::CollinearPoints)
        );
    }

    #[test]
    fn inversion_fixes_unit_circle_and_swaps_radii() {
        let origin = Point2::new(0.0, 0.0);
        let w = invert_point(Point2::new(2.0, 0.0), origin).unwrap();
        assert!((w - Point2::new(0.5, 0.0)).norm() < 1e-15);
        let on_circle = Point2::from_polar(1.0, 1.234);
        let w = invert_point(on_circle, origin).unwrap();
        assert!((w - on_circle).norm() < 1e-15);
        assert!(invert_point(origin, origin).is_err());
    }

    #[test]
    fn inversion_is_an_involution() {
        let center = Point2::new(0.3, -0.2);
        for &p in &[
            Point2::new(2.0, 1.0),
            Point2::new(-0.5, 0.4),
            Point2::new(10.0, -3.0),
        ] {
            let back = invert_point(invert_point(p, center).unwrap(), center).unwrap();
            assert!((back - p).norm() < 1e-12 * p.norm().max(1.0));
        }
    }

    #[test]
    fn inverted_segment_becomes_arc_through_expected_points() {
        let piece = BoundaryPiece::segment(Point2::new(2.0, 0.0), Point2::new(0.0, 2.0));
        let image = invert_piece(&piece, Point2::new(0.0, 0.0)).unwrap();
        match image {
            BoundaryPiece::CircularArc { center, radius, .. } => {
                assert!((center - Point2::new(0.25, 0.25)).norm() < 1e-13);
                assert!((radius - 0.125f64.sqrt()).abs() < 1e-13);
            }
            other => panic!("expected an arc, got {other:?}"),
        }
        assert!((image.start() - Point2::new(0.5, 0.0)).norm() < 1e-14);
        assert!((image.end() - Point2::new(0.0, 0.5)).norm() < 1e-14);
        // Points of the arc, inverted back, land on the supporting line
        // x + y = 2 within the original segment.
        for j in 0..=32 {
            let s = j as f64 / 32.0;
            let back = invert_point(image.point(s), Point2::new(0.0, 0.0)).unwrap();
            assert!((back.x + back.y - 2.0).abs() < 1e-12, "off the line at s = {s}");
            assert!((-1e-12..=2.0 + 1e-12).contains(&back.x));
        }
    }

    #[test]
    fn inverted_segment_on_line_through_center_stays_straight() {
        let piece = BoundaryPiece::segment(Point2::new(1.0, 1.0), Point2::new(2.0, 2.0));
        let image = invert_piece(&piece, Point2::new(0.0, 0.0)).unwrap();
        assert!(image.is_straight());
        assert!((image.start() - Point2::new(0.5, 0.5)).norm() < 1e-14);
        assert!((image.end() - Point2::new(0.25, 0.25)).norm() < 1e-14);
    }

    #[test]
    fn inverted_arc_through_center_becomes_segment() {
        // Circle of radius 1/2 centered at (1/2, 0) passes through the origin;
        // its far half inverts onto the vertical line x = 1.
        let piece = BoundaryPiece::CircularArc {
            center: Point2::new(0.5, 0.0),
            radius: 0.5,
            start_angle: -FRAC_PI_2,
            end_angle: FRAC_PI_2,
        };
        let image = invert_piece(&piece, Point2::new(0.0, 0.0)).unwrap();
        assert!(image.is_straight());
        assert!((image.start() - Point2::new(1.0, -1.0)).norm() < 1e-12);
        assert!((image.end() - Point2::new(1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn unit_circle_arc_is_fixed_by_inversion() {
        let piece = BoundaryPiece::CircularArc {
            center: Point2::new(0.0, 0.0),
            radius: 1.0,
            start_angle: 0.1,
            end_angle: 1.3,
        };
        let image = invert_piece(&piece, Point2::new(0.0, 0.0)).unwrap();
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            assert!(image.point(s).dist(piece.point(s)) < 1e-9);
        }
    }

    #[test]
    fn parametric_inversion_requires_origin_center() {
        let piece = BoundaryPiece::ParametricArc {
            curve: ParamCurve::Flower { petals: 4 },
            t_start: 0.0,
            t_end: 0.5,
        };
        assert!(invert_piece(&piece, Point2::new(0.1, 0.0)).is_err());
        let image = invert_piece(&piece, Point2::new(0.0, 0.0)).unwrap();
        let back = invert_piece(&image, Point2::new(0.0, 0.0)).unwrap();
        assert_eq!(piece, back);
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let direct = invert_point(piece.point(s), Point2::new(0.0, 0.0)).unwrap();
            assert!(image.point(s).dist(direct) < 1e-14);
        }
    }

    #[test]
    fn point_inside_square_and_boundary_rejection() {
        let quad = unit_square();
        assert!(point_inside(&quad, Point2::new(0.5, 0.5)).unwrap());
        assert!(!point_inside(&quad, Point2::new(1.5, 0.5)).unwrap());
        assert!(!point_inside(&quad, Point2::new(-0.2, -0.2)).unwrap());
        assert_eq!(
            point_inside(&quad, Point2::new(0.5, 0.0)),
            Err(GeometryError::PointOnBoundary)
        );
    }

    #[test]
    fn point_inside_flower() {
        let quad = flower_quad(4).unwrap();
        assert!(point_inside(&quad, Point2::new(0.0, 0.0)).unwrap());
        assert!(point_inside(&quad, Point2::new(0.55, 0.0)).unwrap());
        // The boundary dips to radius 3/5 at polar angle pi/4.
        assert!(!point_inside(&quad, Point2::from_polar(0.8, PI / 4.0)).unwrap());
        assert!(point_inside(&quad, Point2::from_polar(0.5, PI / 4.0)).unwrap());
        assert!(!point_inside(&quad, Point2::new(2.0, 0.0)).unwrap());
    }

    #[test]
    fn inverted_square_has_expected_corners_and_contains_center() {
        let quad = QuadrilateralSpec::polygon([
            Point2::new(-1.0, -1.0),
            Point2::new(1.0, -1.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0 - 1.0, 1.0),
        ])
        .unwrap();
        let center = Point2::new(0.0, 0.0);
        let image = invert_quadrilateral(&quad, center).unwrap();
        let w = image.corners();
        let z = quad.corners();
        // The marking starts at the image of the last corner.
        assert!((w[0] - invert_point(z[3], center).unwrap()).norm() < 1e-14);
        assert!((w[1] - invert_point(z[0], center).unwrap()).norm() < 1e-14);
        assert!((w[2] - invert_point(z[1], center).unwrap()).norm() < 1e-14);
        assert!((w[3] - invert_point(z[2], center).unwrap()).norm() < 1e-14);
        assert!(point_inside(&image, center).unwrap());
        // The image boundary is positively oriented.
        let angles = image.corner_angles();
        for a in angles {
            assert!((a - 1.5 * PI).abs() < 1e-9, "inverted square corner angle {a}");
        }
    }

    #[test]
    fn invert_quadrilateral_rejects_outside_center() {
        let quad = unit_square();
        assert_eq!(
            invert_quadrilateral(&quad, Point2::new(2.0, 2.0)),
            Err(GeometryError::CenterOutsideDomain)
        );
    }

    #[test]
    fn rect_on_circle_vertices_and_companion() {
        let (quad, companion) = rect_on_circle(PI / 3.0).unwrap();
        let c = quad.corners();
        for p in c {
            assert!((p.norm() - 1.0).abs() < 1e-14);
        }
        assert!((c[1] - Point2::from_polar(1.0, PI / 3.0)).norm() < 1e-14);
        assert!((companion - (PI / 6.0).tan()).abs() < 1e-15);
        assert!(rect_on_circle(0.0).is_err());
        assert!(rect_on_circle(PI).is_err());
        let angles = quad.corner_angles();
        for a in angles {
            assert!((a - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn side_slide_quad_validity() {
        let quad = side_slide_quad(1.0, 2.0, 0.5).unwrap();
        let c = quad.corners();
        assert!((c[2] - Point2::new(0.5, 1.0)).norm() < 1e-15);
        assert!((c[3] - Point2::new(-1.5, 1.0)).norm() < 1e-15);
        assert!(side_slide_quad(-1.0, 2.0, 0.5).is_err());
        assert!(side_slide_quad(1.0, 0.0, 0.5).is_err());
        // Any positive h and s give a simple trapezoid, however far it slides.
        assert!(side_slide_quad(1.0, 0.1, -5.0).is_ok());
        assert!(side_slide_quad(1.0, 2.0, 25.0).is_ok());
    }

    #[test]
    fn flower_quad_corners() {
        let quad = flower_quad(4).unwrap();
        let c = quad.corners();
        assert!((c[0] - Point2::new(1.0, 0.0)).norm() < 1e-14);
        assert!((c[1] - Point2::new(0.0, 1.0)).norm() < 1e-14);
        assert!((c[2] - Point2::new(-1.0, 0.0)).norm() < 1e-14);
        assert!((c[3] - Point2::from_polar(0.6, -PI / 4.0)).norm() < 1e-14);
        // The last corner sits in the valley nearest a quarter turn below
        // the first, here three petals down.
        let c8 = flower_quad(8).unwrap().corners();
        assert!((c8[3] - Point2::from_polar(0.6, -3.0 * PI / 8.0)).norm() < 1e-14);
        assert!(flower_quad(3).is_err());
        assert!(flower_quad(0).is_err());
        // Marked points of the flower are tangent-smooth: interior angle pi.
        for a in flower_quad(4).unwrap().corner_angles() {
            assert!((a - PI).abs() < 1e-9, "flower corner angle {a}");
        }
    }

    #[test]
    fn rotated_marking_shifts_corners() {
        let quad = unit_square();
        let shifted = quad.rotated(1);
        assert!((shifted.corners()[0] - Point2::new(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(quad.rotated(4), quad);
    }

    #[test]
    fn corner_angles_of_square() {
        for a in unit_square().corner_angles() {
            assert!((a - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn polygon_rejects_bad_corner_lists() {
        assert_eq!(
            QuadrilateralSpec::polygon([
                Point2::new(0.0, 0.0),
                Point2::new(0.0, 1.0),
                Point2::new(1.0, 1.0),
                Point2::new(1.0, 0.0),
            ]),
            Err(GeometryError::NotPositivelyOriented)
        );
        assert!(QuadrilateralSpec::polygon([
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(1.0, 1.0),
        ])
        .is_err());
    }

    #[test]
    fn flatten_resolves_petals() {
        let piece = BoundaryPiece::ParametricArc {
            curve: ParamCurve::Flower { petals: 8 },
            t_start: -1.0,
            t_end: -0.25,
        };
        let params = piece.flatten(0.05);
        assert!(params.len() > 16, "only {} samples", params.len());
        for w in params.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pieces = [
            BoundaryPiece::segment(Point2::new(0.2, -1.0), Point2::new(3.0, 0.7)),
            BoundaryPiece::CircularArc {
                center: Point2::new(0.5, -0.5),
                radius: 1.7,
                start_angle: 0.3,
                end_angle: -1.9,
            },
            BoundaryPiece::ParametricArc {
                curve: ParamCurve::Flower { petals: 8 },
                t_start: 0.1,
                t_end: 0.45,
            },
            BoundaryPiece::ParametricArc {
                curve: ParamCurve::InvertedFlower { petals: 4 },
                t_start: 0.9,
                t_end: 0.3,
            },
        ];
        let h = 1e-6;
        for piece in &pieces {
            for i in 1..10 {
                let s = i as f64 / 10.0;
                let fd = (piece.point(s + h) - piece.point(s - h)) * (0.5 / h);
                let an = piece.derivative(s);
                assert!(
                    (fd - an).norm() < 1e-6 * an.norm().max(1.0),
                    "derivative mismatch at s = {s} for {piece:?}"
                );
            }
        }
    }

    #[test]
    fn circle_quad_closes_and_has_flat_angles() {
        let quad = circle_quad();
        for a in quad.corner_angles() {
            assert!((a - PI).abs() < 1e-12);
        }
        assert!(point_inside(&quad, Point2::new(0.0, 0.0)).unwrap());
    }
}
