//! World state and its fixed-step update.

use serde::{Deserialize, Serialize};

use super::geometry::{dot, distance, sub, OrientedBox, Polyline, Pose2};
use crate::control::VehicleCommand;

/// Kinematic limits of the ego vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// Front-wheel angle at full steer command (rad).
    pub max_steer: f64,
    /// Acceleration at full throttle (m/s²).
    pub throttle_accel: f64,
    /// Deceleration at full brake (m/s²).
    pub brake_decel: f64,
    pub max_speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer: 0.6,
            throttle_accel: 3.0,
            brake_decel: 6.0,
            max_speed: 8.0,
        }
    }
}

impl VehicleParams {
    /// Radius of the circle driven at constant speed and steer command.
    pub fn turning_radius(&self, steer: f64) -> f64 {
        self.wheelbase / (steer.clamp(-1.0, 1.0) * self.max_steer).tan().abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Driven by commands through `step_world`.
    Ego,
    /// Keeps its speed and heading.
    ConstantVelocity,
    /// Waits until the ego comes within `trigger_distance`, then walks
    /// straight to `target` and stops there.
    ScriptedCrossing {
        trigger_distance: f64,
        target: [f64; 2],
        walk_speed: f64,
        triggered: bool,
    },
    /// Cruises along its heading, stopping its front at `stop_point` while
    /// signal `signal` is red.
    SignalObeying {
        signal: usize,
        stop_point: [f64; 2],
        cruise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose2,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub class: AgentClass,
    pub behavior: Behavior,
}

impl AgentState {
    pub fn ego(pose: Pose2, speed: f64) -> Self {
        Self {
            pose,
            speed,
            length: 4.5,
            width: 2.0,
            height: 1.5,
            class: AgentClass::Vehicle,
            behavior: Behavior::Ego,
        }
    }

    pub fn vehicle(pose: Pose2, speed: f64, behavior: Behavior) -> Self {
        Self {
            behavior,
            ..Self::ego(pose, speed)
        }
    }

    pub fn pedestrian(position: [f64; 2], heading: f64, behavior: Behavior) -> Self {
        Self {
            pose: Pose2::new(position[0], position[1], heading),
            speed: 0.0,
            length: 0.6,
            width: 0.6,
            height: 1.8,
            class: AgentClass::Pedestrian,
            behavior,
        }
    }

    pub fn static_obstacle(pose: Pose2, length: f64, width: f64) -> Self {
        Self {
            pose,
            speed: 0.0,
            length,
            width,
            height: 1.0,
            class: AgentClass::Static,
            behavior: Behavior::ConstantVelocity,
        }
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: self.pose.position(),
            heading: self.pose.heading,
            length: self.length,
            width: self.width,
        }
    }

    /// Center of the front edge.
    pub fn front(&self) -> [f64; 2] {
        self.pose.to_world([0.5 * self.length, 0.0])
    }

    pub fn velocity(&self) -> [f64; 2] {
        let f = self.pose.forward();
        [f[0] * self.speed, f[1] * self.speed]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    Red,
    Green,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub stop_line: [[f64; 2]; 2],
    /// Travel direction the signal governs.
    pub approach_heading: f64,
    pub state: SignalState,
    /// Time left in the current phase (s).
    pub timer: f64,
    pub red_duration: f64,
    pub green_duration: f64,
    /// Position of the rendered signal head, if visible to the ego camera.
    pub head: Option<[f64; 3]>,
}

impl Signal {
    fn advance(&mut self, dt: f64) {
        self.timer -= dt;
        while self.timer <= 0.0 {
            self.state = match self.state {
                SignalState::Red => SignalState::Green,
                SignalState::Green => SignalState::Red,
            };
            self.timer += match self.state {
                SignalState::Red => self.red_duration,
                SignalState::Green => self.green_duration,
            };
        }
    }

    /// Whether motion along `heading` is controlled by this signal.
    pub fn governs(&self, heading: f64) -> bool {
        (heading - self.approach_heading).cos() > 0.5
    }

    pub fn midpoint(&self) -> [f64; 2] {
        let [a, b] = self.stop_line;
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }
}

/// The path to follow and the sparse goal locations along it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub path: Polyline,
    /// Arc lengths of the goal locations, ascending; the last is the end.
    pub goal_s: Vec<f64>,
}

impl Route {
    /// Goals every `spacing` metres plus the route end.
    pub fn new(path: Polyline, spacing: f64) -> Self {
        let len = path.length();
        let mut goal_s: Vec<f64> = (1..)
            .map(|k| k as f64 * spacing)
            .take_while(|&s| s < len - 1e-9)
            .collect();
        goal_s.push(len);
        Self { path, goal_s }
    }

    /// Goal location for an ego at arc length `s`: the first goal at least
    /// `lead` metres ahead, or the route end.
    pub fn goal_for(&self, s: f64, lead: f64) -> [f64; 2] {
        let gs = self
            .goal_s
            .iter()
            .copied()
            .find(|&g| g >= s + lead)
            .unwrap_or_else(|| self.path.length());
        self.path.sample(gs).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
    pub signals: Vec<Signal>,
    pub route: Route,
    pub vehicle: VehicleParams,
    pub rng_seed: u64,
}

/// Advances the world by `dt` seconds. Commands are clamped to their ranges.
pub fn step_world(w: &WorldState, cmd: &VehicleCommand, dt: f64) -> WorldState {
    let mut next = w.clone();
    next.time = w.time + dt;
    for s in &mut next.signals {
        s.advance(dt);
    }
    let ego_pos = w.ego.pose.position();
    for agent in &mut next.agents {
        step_agent(agent, &next.signals, ego_pos, dt);
    }
    step_ego(&mut next.ego, &w.vehicle, cmd, dt);
    next
}

fn step_ego(ego: &mut AgentState, p: &VehicleParams, cmd: &VehicleCommand, dt: f64) {
    let steer = cmd.steer.clamp(-1.0, 1.0);
    let throttle = cmd.throttle.clamp(0.0, 1.0);
    let brake = cmd.brake.clamp(0.0, 1.0);
    let accel = if brake > 0.0 {
        -brake * p.brake_decel
    } else {
        throttle * p.throttle_accel
    };
    let v0 = ego.speed;
    let v1 = (v0 + accel * dt).clamp(0.0, p.max_speed);
    let dist = 0.5 * (v0 + v1) * dt;
    let curvature = (steer * p.max_steer).tan() / p.wheelbase;
    advance_arc(&mut ego.pose, dist, curvature);
    ego.speed = v1;
}

/// Moves a pose `dist` metres along a circle of the given curvature.
pub fn advance_arc(pose: &mut Pose2, dist: f64, curvature: f64) {
    let h = pose.heading;
    if curvature.abs() < 1e-12 {
        pose.x += dist * h.cos();
        pose.y += dist * h.sin();
    } else {
        let r = 1.0 / curvature;
        let h1 = h + dist * curvature;
        pose.x += r * (h1.sin() - h.sin());
        pose.y -= r * (h1.cos() - h.cos());
        pose.heading = super::geometry::wrap_angle(h1);
    }
}

fn step_agent(a: &mut AgentState, signals: &[Signal], ego_pos: [f64; 2], dt: f64) {
    match &mut a.behavior {
        Behavior::Ego | Behavior::ConstantVelocity => {}
        Behavior::ScriptedCrossing {
            trigger_distance,
            target,
            walk_speed,
            triggered,
        } => {
            if !*triggered && distance(ego_pos, a.pose.position()) <= *trigger_distance {
                *triggered = true;
            }
            if *triggered {
                let to = sub(*target, a.pose.position());
                let left = dot(to, to).sqrt();
                if left <= *walk_speed * dt {
                    a.pose.x = target[0];
                    a.pose.y = target[1];
                    a.speed = 0.0;
                    return;
                }
                a.pose.heading = to[1].atan2(to[0]);
                a.speed = *walk_speed;
            }
        }
        Behavior::SignalObeying {
            signal,
            stop_point,
            cruise,
        } => {
            let red = signals
                .get(*signal)
                .map_or(false, |s| s.state == SignalState::Red);
            let front_gap = dot(sub(*stop_point, a.pose.position()), a.pose.forward()) - 0.5 * a.length;
            a.speed = if red && front_gap > 0.0 {
                cruise.min((2.0 * 4.0 * (front_gap - 0.5).max(0.0)).sqrt())
            } else {
                cruise.min(a.speed + 2.0 * dt)
            };
        }
    }
    let (s, c) = a.pose.heading.sin_cos();
    a.pose.x += a.speed * dt * c;
    a.pose.y += a.speed * dt * s;
}
