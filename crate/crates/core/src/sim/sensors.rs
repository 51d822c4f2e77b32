//! Ray-cast camera and LiDAR.

use serde::{Deserialize, Serialize};

use super::world::{AgentClass, SignalState, WorldState};

/// Planar 8-bit RGB image, stored channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(plane));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.width * self.height;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }
}

pub mod palette {
    pub const SKY: [u8; 3] = [135, 180, 235];
    pub const GROUND: [u8; 3] = [96, 96, 96];
    pub const VEHICLE: [u8; 3] = [30, 60, 200];
    pub const PEDESTRIAN: [u8; 3] = [230, 150, 40];
    pub const STATIC: [u8; 3] = [120, 80, 40];
    pub const SIGNAL_RED: [u8; 3] = [235, 20, 20];
    pub const SIGNAL_GREEN: [u8; 3] = [20, 225, 40];
}

/// Forward-facing pinhole camera. Pixel `(row, col)` has its center at
/// `(row + 0.5, col + 0.5)`; the principal point is the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub fov_deg: f64,
    pub raw_width: usize,
    pub raw_height: usize,
    /// Side of the square center crop fed to the network.
    pub crop: usize,
    /// Mount position in the ego frame (m), z above ground.
    pub mount: [f64; 3],
}

impl CameraRig {
    pub fn focal(&self) -> f64 {
        0.5 * self.raw_width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Continuous raw-image coordinates `(row, col)` of an ego-frame point,
    /// or `None` when it is not in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let d = p[0] - self.mount[0];
        if d <= 1e-6 {
            return None;
        }
        let f = self.focal();
        let col = 0.5 * self.raw_width as f64 - f * (p[1] - self.mount[1]) / d;
        let row = 0.5 * self.raw_height as f64 - f * (p[2] - self.mount[2]) / d;
        Some([row, col])
    }

    /// Pixel `(row, col)` of the cropped image containing a point, if any.
    pub fn crop_pixel(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        let [row, col] = self.project(p)?;
        let (top, left) = crate::bev::crop_offsets(self.raw_height, self.raw_width, self.crop);
        let (r, c) = ((row - top as f64).floor(), (col - left as f64).floor());
        let n = self.crop as f64;
        (r >= 0.0 && r < n && c >= 0.0 && c < n).then(|| (r as usize, c as usize))
    }

    fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        let f = self.focal();
        [
            f,
            0.5 * self.raw_width as f64 - (col as f64 + 0.5),
            0.5 * self.raw_height as f64 - (row as f64 + 0.5),
        ]
    }
}

/// Front-hemisphere scanner: azimuth channels evenly cover (−90°, 90°),
/// elevation channels span `[elevation_min_deg, elevation_max_deg]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarRig {
    pub max_range: f64,
    pub azimuth_channels: usize,
    pub elevation_channels: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub mount_height: f64,
}

impl LidarRig {
    fn directions(&self) -> Vec<[f64; 3]> {
        let mut dirs = Vec::with_capacity(self.azimuth_channels * self.elevation_channels);
        for j in 0..self.elevation_channels {
            let t = if self.elevation_channels > 1 {
                j as f64 / (self.elevation_channels - 1) as f64
            } else {
                0.5
            };
            let el = (self.elevation_min_deg + t * (self.elevation_max_deg - self.elevation_min_deg)).to_radians();
            for i in 0..self.azimuth_channels {
                let az = (-90.0 + 180.0 * (i as f64 + 0.5) / self.azimuth_channels as f64).to_radians();
                dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        dirs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorRig {
    pub camera: CameraRig,
    pub lidar: LidarRig,
}

impl SensorRig {
    pub fn paper() -> Self {
        Self {
            camera: CameraRig {
                fov_deg: 100.0,
                raw_width: 400,
                raw_height: 300,
                crop: 256,
                mount: [1.0, 0.0, 1.6],
            },
            lidar: LidarRig {
                max_range: 32.0,
                azimuth_channels: 360,
                elevation_channels: 32,
                elevation_min_deg: -24.0,
                elevation_max_deg: -3.5,
                mount_height: 1.8,
            },
        }
    }

    pub fn desk() -> Self {
        Self {
            camera: CameraRig {
                fov_deg: 100.0,
                raw_width: 64,
                raw_height: 64,
                crop: 64,
                mount: [1.0, 0.0, 1.6],
            },
            lidar: LidarRig {
                max_range: 32.0,
                azimuth_channels: 180,
                elevation_channels: 16,
                elevation_min_deg: -24.0,
                elevation_max_deg: -3.5,
                mount_height: 1.8,
            },
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    /// Box in ego frame: center, heading, half extents, height.
    Box {
        center: [f64; 2],
        heading: f64,
        half: [f64; 2],
        height: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
}

struct Scene {
    shapes: Vec<(Shape, [u8; 3])>,
}

const SIGNAL_RADIUS: f64 = 0.5;

impl Scene {
    /// Agents and signal heads expressed in the ego frame.
    fn from_world(w: &WorldState, with_signals: bool) -> Self {
        let ego = &w.ego.pose;
        let mut shapes = Vec::new();
        for a in &w.agents {
            let color = match a.class {
                AgentClass::Vehicle => palette::VEHICLE,
                AgentClass::Pedestrian => palette::PEDESTRIAN,
                AgentClass::Static => palette::STATIC,
            };
            shapes.push((
                Shape::Box {
                    center: ego.to_local(a.pose.position()),
                    heading: a.pose.heading - ego.heading,
                    half: [0.5 * a.length, 0.5 * a.width],
                    height: a.height,
                },
                color,
            ));
        }
        if with_signals {
            for s in &w.signals {
                if let Some(h) = s.head {
                    let c = ego.to_local([h[0], h[1]]);
                    let color = match s.state {
                        SignalState::Red => palette::SIGNAL_RED,
                        SignalState::Green => palette::SIGNAL_GREEN,
                    };
                    shapes.push((
                        Shape::Sphere {
                            center: [c[0], c[1], h[2]],
                            radius: SIGNAL_RADIUS,
                        },
                        color,
                    ));
                }
            }
        }
        Self { shapes }
    }

    /// Nearest hit along `o + t·d` with `t > 0`: `(t, color, is_ground)`.
    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [u8; 3], bool)> {
        let mut best: Option<(f64, [u8; 3], bool)> = None;
        if d[2] < 0.0 {
            best = Some((-o[2] / d[2], palette::GROUND, true));
        }
        for (shape, color) in &self.shapes {
            let t = match *shape {
                Shape::Box {
                    center,
                    heading,
                    half,
                    height,
                } => ray_box(o, d, center, heading, half, height),
                Shape::Sphere { center, radius } => ray_sphere(o, d, center, radius),
            };
            if let Some(t) = t {
                if best.map_or(true, |b| t < b.0) {
                    best = Some((t, *color, false));
                }
            }
        }
        best
    }
}

/// Entry distance of a ray into an oriented box standing on the ground.
fn ray_box(o: [f64; 3], d: [f64; 3], center: [f64; 2], heading: f64, half: [f64; 2], height: f64) -> Option<f64> {
    let (s, c) = heading.sin_cos();
    let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
    let lo = [c * ox + s * oy, -s * ox + c * oy, o[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, height)];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        let (min, max) = bounds[k];
        if ld[k].abs() < 1e-12 {
            if lo[k] < min || lo[k] > max {
                return None;
            }
            continue;
        }
        let (a, b) = ((min - lo[k]) / ld[k], (max - lo[k]) / ld[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let b = 2.0 * (oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2]);
    let cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then_some(t)
}

/// Flat-shaded ray-cast image of the world from the ego camera.
pub fn render_camera(w: &WorldState, rig: &SensorRig) -> RgbImage {
    let cam = &rig.camera;
    let scene = Scene::from_world(w, true);
    let mut img = RgbImage::filled(cam.raw_width, cam.raw_height, palette::SKY);
    for row in 0..cam.raw_height {
        for col in 0..cam.raw_width {
            if let Some((_, color, _)) = scene.cast(cam.mount, cam.ray(row, col)) {
                img.set(row, col, color);
            }
        }
    }
    img
}

/// Ego-frame LiDAR returns (ground returns have `z == 0`).
pub fn scan_lidar(w: &WorldState, rig: &SensorRig) -> Vec<[f32; 3]> {
    let l = &rig.lidar;
    let origin = [0.0, 0.0, l.mount_height];
    let scene = Scene::from_world(w, false);
    let mut points = Vec::new();
    for d in l.directions() {
        if let Some((t, _, ground)) = scene.cast(origin, d) {
            if t <= l.max_range {
                let z = if ground { 0.0 } else { origin[2] + t * d[2] };
                points.push([(t * d[0]) as f32, (t * d[1]) as f32, z as f32]);
            }
        }
    }
    points
}
