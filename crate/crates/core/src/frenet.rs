//! Path-relative (Frenét) coordinates for two-vehicle interactions.
//!
//! Each vehicle is described by `(s, d)` against its own reference path:
//! `s` is arclength measured from the conflict point (negative before it) and
//! `d` is the signed lateral offset, positive to the left of travel.

use crate::error::{Error, Result};
use crate::tensor::Array2;

pub type Point = (f64, f64);

/// Reference path as an ordered polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Geometry(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for (i, w) in points.windows(2).enumerate() {
            if !(w[0].0.is_finite() && w[0].1.is_finite() && w[1].0.is_finite() && w[1].1.is_finite()) {
                return Err(Error::Geometry("polyline has non-finite coordinates".into()));
            }
            let len = dist(w[0], w[1]);
            if len <= 0.0 {
                return Err(Error::Geometry(format!(
                    "consecutive polyline points {i} and {} coincide",
                    i + 1
                )));
            }
            cumulative.push(cumulative[i] + len);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    pub fn num_segments(&self) -> usize {
        self.points.len() - 1
    }

    fn segment(&self, i: usize) -> (Point, Point) {
        (self.points[i], self.points[i + 1])
    }

    /// Cartesian point at arclength `s` from the first vertex; extrapolates
    /// along the end segments outside `[0, length]`.
    pub fn point_at(&self, s: f64) -> Point {
        let n = self.num_segments();
        let i = match self.cumulative[1..].iter().position(|&c| s <= c) {
            Some(i) => i,
            None => n - 1,
        };
        let (a, b) = self.segment(i);
        let (ux, uy) = unit(a, b);
        let t = s - self.cumulative[i];
        (a.0 + t * ux, a.1 + t * uy)
    }

    /// Unit tangent and left normal of the segment containing arclength `s`.
    pub fn frame_at(&self, s: f64) -> (Point, Point) {
        let n = self.num_segments();
        let i = self.cumulative[1..]
            .iter()
            .position(|&c| s <= c)
            .unwrap_or(n - 1);
        let (a, b) = self.segment(i);
        let (ux, uy) = unit(a, b);
        ((ux, uy), (-uy, ux))
    }
}

/// Path-relative state of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetState {
    pub s: f64,
    pub d: f64,
}

/// Conflict point plus its arclength along each path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConflictPoint {
    pub point: Point,
    pub s_a: f64,
    pub s_b: f64,
}

fn dist(p: Point, q: Point) -> f64 {
    (p.0 - q.0).hypot(p.1 - q.1)
}

fn unit(a: Point, b: Point) -> Point {
    let len = dist(a, b);
    ((b.0 - a.0) / len, (b.1 - a.1) / len)
}

fn cross(u: Point, v: Point) -> f64 {
    u.0 * v.1 - u.1 * v.0
}

/// Smallest parameter `t ∈ [0,1]` along segment `p1→p2` at which it meets `q1→q2`.
pub(crate) fn segment_intersection(p1: Point, p2: Point, q1: Point, q2: Point) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let r = (p2.0 - p1.0, p2.1 - p1.1);
    let s = (q2.0 - q1.0, q2.1 - q1.1);
    let qp = (q1.0 - p1.0, q1.1 - p1.1);
    let denom = cross(r, s);
    let scale = (r.0.hypot(r.1) * s.0.hypot(s.1)).max(EPS);
    if denom.abs() <= EPS * scale {
        // parallel; only collinear overlaps intersect
        if cross(qp, r).abs() > EPS * scale.max(1.0) {
            return None;
        }
        let rr = r.0 * r.0 + r.1 * r.1;
        let t0 = (qp.0 * r.0 + qp.1 * r.1) / rr;
        let t1 = t0 + (s.0 * r.0 + s.1 * r.1) / rr;
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        if hi < -EPS || lo > 1.0 + EPS {
            return None;
        }
        return Some(lo.max(0.0));
    }
    let t = cross(qp, s) / denom;
    let u = cross(qp, r) / denom;
    if (-EPS..=1.0 + EPS).contains(&t) && (-EPS..=1.0 + EPS).contains(&u) {
        Some(t.clamp(0.0, 1.0))
    } else {
        None
    }
}

/// First intersection of the two paths, ordered by arclength along `path_a`.
pub fn path_conflict_point(path_a: &Polyline, path_b: &Polyline) -> Result<Point> {
    conflict_point(path_a, path_b).map(|c| c.point)
}

/// Like [`path_conflict_point`], also returning the arclength on each path.
pub fn conflict_point(path_a: &Polyline, path_b: &Polyline) -> Result<ConflictPoint> {
    for i in 0..path_a.num_segments() {
        let (p1, p2) = path_a.segment(i);
        let best = (0..path_b.num_segments())
            .filter_map(|j| {
                let (q1, q2) = path_b.segment(j);
                segment_intersection(p1, p2, q1, q2)
            })
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        if let Some(t) = best {
            let seg_len = path_a.cumulative[i + 1] - path_a.cumulative[i];
            let point = (p1.0 + t * (p2.0 - p1.0), p1.1 + t * (p2.1 - p1.1));
            let s_a = path_a.cumulative[i] + t * seg_len;
            let s_b = project_to_frenet(point, path_b, 0.0).s;
            return Ok(ConflictPoint { point, s_a, s_b });
        }
    }
    Err(Error::Geometry("reference paths do not intersect".into()))
}

/// Projects `p` onto `path`; `s` is measured from arclength `origin_s`.
pub fn project_to_frenet(p: Point, path: &Polyline, origin_s: f64) -> FrenetState {
    const TIE_EPS: f64 = 1e-12;
    let n = path.num_segments();
    let mut best: Option<(f64, f64, f64)> = None; // (distance, arclength, signed d)
    for i in 0..n {
        let (a, b) = path.segment(i);
        let seg_len = path.cumulative[i + 1] - path.cumulative[i];
        let u = unit(a, b);
        let ap = (p.0 - a.0, p.1 - a.1);
        let mut t = ap.0 * u.0 + ap.1 * u.1;
        // the first and last segments extend to infinity
        if i > 0 {
            t = t.max(0.0);
        }
        if i + 1 < n {
            t = t.min(seg_len);
        }
        let foot = (a.0 + t * u.0, a.1 + t * u.1);
        let distance = dist(p, foot);
        let side = cross(u, ap);
        let signed = if side < 0.0 { -distance } else { distance };
        let s = path.cumulative[i] + t;
        if best.is_none_or(|(bd, _, _)| distance < bd - TIE_EPS) {
            best = Some((distance, s, signed));
        }
    }
    let (_, s, d) = best.expect("polyline has a segment");
    FrenetState { s: s - origin_s, d }
}

/// Converts the last `window` aligned positions of both vehicles into a
/// `window×4` matrix with columns `(s_A, d_A, s_B, d_B)`, using the shared
/// conflict point as origin of both frames.
pub fn build_sequence(
    track_a: &[Point],
    track_b: &[Point],
    path_a: &Polyline,
    path_b: &Polyline,
    window: usize,
) -> Result<Array2> {
    if window == 0 {
        return Err(Error::Data("window must be positive".into()));
    }
    if track_a.len() != track_b.len() {
        return Err(Error::Data(format!(
            "tracks are not time-aligned: {} vs {} steps",
            track_a.len(),
            track_b.len()
        )));
    }
    if track_a.len() < window {
        return Err(Error::Data(format!(
            "track of {} steps is shorter than window {window}",
            track_a.len()
        )));
    }
    let cp = conflict_point(path_a, path_b)?;
    let start = track_a.len() - window;
    let mut data = Vec::with_capacity(window * 4);
    for (&pa, &pb) in track_a[start..].iter().zip(&track_b[start..]) {
        let fa = project_to_frenet(pa, path_a, cp.s_a);
        let fb = project_to_frenet(pb, path_b, cp.s_b);
        data.extend_from_slice(&[fa.s, fa.d, fb.s, fb.d]);
    }
    Array2::new(window, 4, data)
}
