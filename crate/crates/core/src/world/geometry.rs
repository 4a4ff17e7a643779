use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Wire};
use crate::error::Result;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -π to π, which is already the closed end of the range.
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2D {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Expresses a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Rotates a world-frame vector into this pose's frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

impl Wire for Pose2D {
    fn encode(&self, out: &mut Vec<u8>) {
        [self.x, self.y, self.yaw].encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let [x, y, yaw] = <[f64; 3]>::decode(r)?;
        Ok(Pose2D { x, y, yaw })
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// An oriented rectangle: center, heading, full length along the heading and
/// full width across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let [cx, cy] = self.center;
        let at = |a: f64, b: f64| [cx + u[0] * a + v[0] * b, cy + u[1] * a + v[1] * b];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Half-extent of the box projected onto a unit axis.
    pub fn radius_on(&self, axis: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        0.5 * self.length * (u[0] * axis[0] + u[1] * axis[1]).abs()
            + 0.5 * self.width * (v[0] * axis[0] + v[1] * axis[1]).abs()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        (d[0] * u[0] + d[1] * u[1]).abs() <= 0.5 * self.length
            && (d[0] * v[0] + d[1] * v[1]).abs() <= 0.5 * self.width
    }

    /// Separating-axis test over the two face normals of each box. Touching
    /// boxes count as overlapping.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = [
            other.center[0] - self.center[0],
            other.center[1] - self.center[1],
        ];
        let [a0, a1] = self.axes();
        let [b0, b1] = other.axes();
        [a0, a1, b0, b1].iter().all(|&axis| {
            let sep = (d[0] * axis[0] + d[1] * axis[1]).abs();
            sep <= self.radius_on(axis) + other.radius_on(axis)
        })
    }
}

/// A polyline with cumulative arc length, used for lane centerlines.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point, unclamped beyond the ends (extrapolated
    /// along the first/last segment).
    pub station: f64,
    /// Signed lateral offset, positive to the left of travel direction.
    pub lateral: f64,
    /// Heading of the segment containing the foot point.
    pub heading: f64,
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += dist(points[i - 1], *p);
            }
            cumulative.push(acc);
        }
        Polyline { points, cumulative }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let a = self.points[i];
        let b = self.points[i + 1];
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let n = self.points.len();
        let mut best: Option<(f64, Projection)> = None;
        for i in 0..n - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let seg = [b[0] - a[0], b[1] - a[1]];
            let len = seg[0].hypot(seg[1]);
            if len == 0.0 {
                continue;
            }
            let u = [seg[0] / len, seg[1] / len];
            let d = [p[0] - a[0], p[1] - a[1]];
            let mut t = d[0] * u[0] + d[1] * u[1];
            // Only the end segments extrapolate past the polyline.
            let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
            let hi = if i == n - 2 { f64::INFINITY } else { len };
            t = t.clamp(lo, hi);
            let foot = [a[0] + u[0] * t, a[1] + u[1] * t];
            let dd = dist(p, foot);
            let lateral = u[0] * d[1] - u[1] * d[0];
            let proj = Projection {
                station: self.cumulative[i] + t,
                lateral,
                heading: self.segment_heading(i),
            };
            if best.as_ref().is_none_or(|(bd, _)| dd < *bd) {
                best = Some((dd, proj));
            }
        }
        best.map(|(_, p)| p).unwrap_or(Projection {
            station: 0.0,
            lateral: 0.0,
            heading: 0.0,
        })
    }

    /// Point and heading at arc length `s`, extrapolating linearly past either end.
    pub fn sample(&self, s: f64) -> ([f64; 2], f64) {
        let n = self.points.len();
        let i = match self.cumulative.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => n - 2,
        }
        .min(n - 2);
        let a = self.points[i];
        let h = self.segment_heading(i);
        let t = s - self.cumulative[i];
        ([a[0] + h.cos() * t, a[1] + h.sin() * t], h)
    }
}

/// Walks a dense polyline emitting points exactly `spacing` apart in
/// Euclidean distance, starting from `start` (not emitted). If the polyline
/// runs out, the remaining slots repeat the last point reached.
pub fn resample_equidistant(start: [f64; 2], dense: &[[f64; 2]], spacing: f64, count: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(count);
    let mut prev = start;
    let mut seg = 0usize;
    let mut seg_start = start;
    while out.len() < count {
        let mut found = None;
        while seg < dense.len() {
            let a = seg_start;
            let b = dense[seg];
            // Solve |a + t(b-a) - prev| = spacing for the largest t in [0,1].
            let d = [b[0] - a[0], b[1] - a[1]];
            let f = [a[0] - prev[0], a[1] - prev[1]];
            let qa = d[0] * d[0] + d[1] * d[1];
            let qb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
            let qc = f[0] * f[0] + f[1] * f[1] - spacing * spacing;
            if qa > 0.0 {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc >= 0.0 {
                    let t = (-qb + disc.sqrt()) / (2.0 * qa);
                    if (0.0..=1.0).contains(&t) {
                        found = Some([a[0] + d[0] * t, a[1] + d[1] * t]);
                        seg_start = found.unwrap();
                        break;
                    }
                }
            }
            seg_start = b;
            seg += 1;
        }
        match found {
            Some(p) => {
                out.push(p);
                prev = p;
            }
            None => break,
        }
    }
    while out.len() < count {
        out.push(prev);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(-PI), PI);
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    #[test]
    fn local_world_inverse() {
        let p = Pose2D::new(3.0, -2.0, 0.7);
        let w = p.to_world(p.to_local([10.0, 4.0]));
        assert!((w[0] - 10.0).abs() < 1e-12 && (w[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn projection_on_straight_line() {
        let line = Polyline::new(vec![[0.0, 0.0], [100.0, 0.0]]);
        let pr = line.project([30.0, 1.5]);
        assert!((pr.station - 30.0).abs() < 1e-12);
        assert!((pr.lateral - 1.5).abs() < 1e-12);
        let behind = line.project([-5.0, -1.0]);
        assert!((behind.station + 5.0).abs() < 1e-12);
        assert!((behind.lateral + 1.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_resampling_spacing() {
        let dense: Vec<[f64; 2]> = (1..=40).map(|i| [i as f64 * 0.5, (i as f64 * 0.1).sin()]).collect();
        let pts = resample_equidistant([0.0, 0.0], &dense, 1.0, 10);
        let mut prev = [0.0, 0.0];
        for p in pts {
            assert!((dist(prev, p) - 1.0).abs() < 1e-9);
            prev = p;
        }
    }

    #[test]
    fn resampling_repeats_when_short() {
        let pts = resample_equidistant([0.0, 0.0], &[[2.5, 0.0]], 1.0, 5);
        assert_eq!(pts[1], [2.0, 0.0]);
        assert_eq!(pts[2], [2.0, 0.0]);
        assert_eq!(pts[4], [2.0, 0.0]);
    }
}
