//! Planar poses, oriented boxes and route polylines.

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Position and heading in the world frame; heading 0 points along +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Ego-frame point to world frame.
    pub fn to_world(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
        ]
    }

    /// World-frame point to ego frame.
    pub fn to_local(&self, world: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (world[0] - self.x, world[1] - self.y);
        let (s, c) = self.heading.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Unit vector along the heading.
    pub fn forward(&self) -> [f64; 2] {
        [self.heading.cos(), self.heading.sin()]
    }
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(sub(a, b))
}

/// Rectangle with a center, heading and full length (along heading) and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let ax = [c * hl, s * hl];
        let ay = [-s * hw, c * hw];
        let [x, y] = self.center;
        [
            [x + ax[0] + ay[0], y + ax[1] + ay[1]],
            [x + ax[0] - ay[0], y + ax[1] - ay[1]],
            [x - ax[0] - ay[0], y - ax[1] - ay[1]],
            [x - ax[0] + ay[0], y - ax[1] + ay[1]],
        ]
    }

    pub fn inflated(&self, margin_long: f64, margin_lat: f64) -> Self {
        Self {
            length: self.length + 2.0 * margin_long,
            width: self.width + 2.0 * margin_lat,
            ..*self
        }
    }

    /// Separating-axis test; touching boxes do not overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let (a, b) = (self.corners(), other.corners());
        let axes = [
            self.heading.sin_cos(),
            (self.heading + std::f64::consts::FRAC_PI_2).sin_cos(),
            other.heading.sin_cos(),
            (other.heading + std::f64::consts::FRAC_PI_2).sin_cos(),
        ];
        axes.iter().all(|&(s, c)| {
            let axis = [c, s];
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            amax > bmin && bmax > amin
        })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let pose = Pose2::new(self.center[0], self.center[1], self.heading);
        let l = pose.to_local(p);
        l[0].abs() <= 0.5 * self.length && l[1].abs() <= 0.5 * self.width
    }
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners
        .iter()
        .map(|&p| dot(p, axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Whether the motion `p0 → p1` crosses segment `q0q1`. Arriving on the
/// segment counts; leaving from it does not, so a crossing is seen once.
pub fn segments_intersect(p0: [f64; 2], p1: [f64; 2], q0: [f64; 2], q1: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let d1 = cross(q0, q1, p0);
    let d2 = cross(q0, q1, p1);
    let d3 = cross(p0, p1, q0);
    let d4 = cross(p0, p1, q1);
    ((d1 > 0.0 && d2 <= 0.0) || (d1 < 0.0 && d2 >= 0.0))
        && ((d3 >= 0.0 && d4 <= 0.0) || (d3 <= 0.0 && d4 >= 0.0))
}

/// A point's projection onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the travel direction.
    pub lateral: f64,
}

/// Piecewise-linear path with cumulative arc lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Needs at least two points; consecutive duplicates are dropped.
    pub fn new(points: Vec<[f64; 2]>) -> Option<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().map_or(true, |&q| distance(p, q) > 1e-9) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return None;
        }
        let mut line = Self {
            points: pts,
            cumulative: Vec::new(),
        };
        line.rebuild();
        Some(line)
    }

    fn rebuild(&mut self) {
        let mut acc = 0.0;
        self.cumulative = std::iter::once(0.0)
            .chain(self.points.windows(2).map(|w| {
                acc += distance(w[0], w[1]);
                acc
            }))
            .collect();
    }

    /// Restores cached lengths after deserialization.
    pub fn restored(mut self) -> Self {
        self.rebuild();
        self
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn start(&self) -> [f64; 2] {
        self.points[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.points.last().unwrap()
    }

    /// Point and tangent heading at arc length `s` (clamped to the ends).
    pub fn sample(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], heading)
    }

    /// Closest point over all segments.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = (f64::INFINITY, Projection { s: 0.0, lateral: 0.0 });
        for (i, w) in self.points.windows(2).enumerate() {
            let d = sub(w[1], w[0]);
            let len2 = dot(d, d);
            let t = (dot(sub(p, w[0]), d) / len2).clamp(0.0, 1.0);
            let q = [w[0][0] + t * d[0], w[0][1] + t * d[1]];
            let dist = distance(p, q);
            if dist < best.0 {
                let side = d[0] * (p[1] - w[0][1]) - d[1] * (p[0] - w[0][0]);
                best = (
                    dist,
                    Projection {
                        s: self.cumulative[i] + t * len2.sqrt(),
                        lateral: dist.copysign(side),
                    },
                );
            }
        }
        best.1
    }

    /// Largest absolute heading change per metre over `[s0, s1]`, sampled.
    pub fn max_curvature(&self, s0: f64, s1: f64) -> f64 {
        let step = 1.0;
        let mut k: f64 = 0.0;
        let mut s = s0;
        while s + step <= s1.min(self.length()) {
            let (_, h0) = self.sample(s);
            let (_, h1) = self.sample(s + step);
            k = k.max(wrap_angle(h1 - h0).abs() / step);
            s += step;
        }
        k
    }
}
