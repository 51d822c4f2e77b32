//! Inverse dynamics: waypoints to steer/throttle/brake through two PID
//! controllers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("{field} = {value} is out of range ({bound})")]
    Range {
        field: &'static str,
        value: f64,
        bound: &'static str,
    },
}

/// Low-level actuation, ranges enforced by clamping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleCommand {
    /// Positive steers left.
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl VehicleCommand {
    pub fn clamped(self) -> Self {
        Self {
            steer: self.steer.clamp(-1.0, 1.0),
            throttle: self.throttle.clamp(0.0, 1.0),
            brake: self.brake.clamp(0.0, 1.0),
        }
    }

    pub fn full_brake() -> Self {
        Self {
            steer: 0.0,
            throttle: 0.0,
            brake: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// `K_p·e + K_i·(window sum / n) + K_d·Δe/dt`. The integral window is
/// zero-padded until it holds `n` errors; the derivative is zero on the
/// first call.
#[derive(Clone, Debug, PartialEq)]
pub struct PidController {
    gains: PidGains,
    window: usize,
    buffer: VecDeque<f64>,
}

impl PidController {
    pub fn new(gains: PidGains, window: usize) -> Self {
        assert!(window >= 1, "integral window must hold at least one error");
        Self {
            gains,
            window,
            buffer: VecDeque::with_capacity(window),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        let derivative = self.buffer.back().map_or(0.0, |&prev| (error - prev) / dt);
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(error);
        let integral = self.buffer.iter().sum::<f64>() / self.window as f64;
        self.gains.kp * error + self.gains.ki * integral + self.gains.kd * derivative
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub lateral: PidGains,
    pub longitudinal: PidGains,
    pub window: usize,
    /// Desired speeds below this brake (m/s).
    pub brake_threshold: f64,
    /// Brake when `speed > overshoot_ratio · desired_speed`.
    pub overshoot_ratio: f64,
    pub max_throttle: f64,
    /// Weights of the consecutive-waypoint vectors; one per waypoint.
    pub alpha: Vec<f64>,
    /// Waypoint spacing in time (s).
    pub waypoint_dt: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lateral: PidGains {
                kp: 1.25,
                ki: 0.75,
                kd: 0.3,
            },
            longitudinal: PidGains {
                kp: 5.0,
                ki: 0.5,
                kd: 1.0,
            },
            window: 20,
            brake_threshold: 0.4,
            overshoot_ratio: 1.1,
            max_throttle: 0.75,
            alpha: vec![0.25; crate::head::HORIZON],
            waypoint_dt: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let range = |field, value: f64, ok: bool, bound| {
            if ok {
                Ok(())
            } else {
                Err(ControlError::Range { field, value, bound })
            }
        };
        for (field, g) in [("lateral", &self.lateral), ("longitudinal", &self.longitudinal)] {
            for v in [g.kp, g.ki, g.kd] {
                range(field, v, v.is_finite() && v >= 0.0, "gains must be finite and >= 0")?;
            }
        }
        range("window", self.window as f64, self.window >= 1, ">= 1")?;
        range("brake_threshold", self.brake_threshold, self.brake_threshold >= 0.0, ">= 0")?;
        range("overshoot_ratio", self.overshoot_ratio, self.overshoot_ratio >= 1.0, ">= 1")?;
        range("max_throttle", self.max_throttle, (0.0..=1.0).contains(&self.max_throttle) && self.max_throttle > 0.0, "(0, 1]")?;
        range("waypoint_dt", self.waypoint_dt, self.waypoint_dt > 0.0, "> 0")?;
        range(
            "alpha",
            self.alpha.len() as f64,
            self.alpha.len() == crate::head::HORIZON && self.alpha.iter().all(|a| a.is_finite() && *a >= 0.0),
            "one non-negative weight per waypoint",
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setpoints {
    pub desired_speed: f64,
    pub heading_error: f64,
}

/// Desired speed and heading from the weighted mean of consecutive
/// waypoint vectors (the first vector starts at the ego origin).
pub fn setpoints_from_waypoints(traj: &Trajectory, alpha: &[f64], waypoint_dt: f64) -> Setpoints {
    let mut prev = [0.0, 0.0];
    let mut acc = [0.0, 0.0];
    for (w, a) in traj.waypoints.iter().zip(alpha) {
        acc[0] += a * (w[0] - prev[0]);
        acc[1] += a * (w[1] - prev[1]);
        prev = *w;
    }
    let norm = acc[0].hypot(acc[1]);
    if norm < 1e-9 {
        return Setpoints {
            desired_speed: 0.0,
            heading_error: 0.0,
        };
    }
    Setpoints {
        desired_speed: norm / waypoint_dt,
        heading_error: acc[1].atan2(acc[0]),
    }
}

/// Lateral and longitudinal controllers for one rollout.
#[derive(Clone, Debug)]
pub struct InverseDynamics {
    config: ControllerConfig,
    lateral: PidController,
    longitudinal: PidController,
}

impl InverseDynamics {
    pub fn new(config: ControllerConfig) -> Self {
        let lateral = PidController::new(config.lateral, config.window);
        let longitudinal = PidController::new(config.longitudinal, config.window);
        Self {
            config,
            lateral,
            longitudinal,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// One control update; `dt` is the time since the previous update.
    pub fn command(&mut self, traj: &Trajectory, speed: f64, dt: f64) -> VehicleCommand {
        let sp = setpoints_from_waypoints(traj, &self.config.alpha, self.config.waypoint_dt);
        let steer = self.lateral.step(sp.heading_error, dt).clamp(-1.0, 1.0);
        let brake = sp.desired_speed < self.config.brake_threshold
            || speed > self.config.overshoot_ratio * sp.desired_speed;
        let accel = self.longitudinal.step(sp.desired_speed - speed, dt);
        let throttle = if brake {
            0.0
        } else {
            accel.clamp(0.0, self.config.max_throttle)
        };
        VehicleCommand {
            steer,
            throttle,
            brake: if brake { 1.0 } else { 0.0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(w: [[f64; 2]; 4]) -> Trajectory {
        Trajectory { waypoints: w }
    }

    #[test]
    fn straight_setpoints() {
        let sp = setpoints_from_waypoints(&traj([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]), &[0.25; 4], 0.5);
        assert_eq!(sp, Setpoints { desired_speed: 2.0, heading_error: 0.0 });
        let sp = setpoints_from_waypoints(&traj([[0.0; 2]; 4]), &[0.25; 4], 0.5);
        assert_eq!(sp, Setpoints { desired_speed: 0.0, heading_error: 0.0 });
    }

    #[test]
    fn left_arc_has_positive_heading_error() {
        // Points on a circle of radius 10 m curving left from the origin.
        let r = 10.0;
        let mut w = [[0.0; 2]; 4];
        for (t, p) in w.iter_mut().enumerate() {
            let th = 0.2 * (t + 1) as f64;
            *p = [r * th.sin(), r * (1.0 - th.cos())];
        }
        let sp = setpoints_from_waypoints(&traj(w), &[0.25; 4], 0.5);
        assert!(sp.heading_error > 0.0);
        // Mean vector ends at w4: its bearing is half the subtended angle.
        assert!((sp.heading_error - 0.4).abs() < 1e-12);
    }

    #[test]
    fn pid_basic_cases() {
        let mut zero = PidController::new(PidGains { kp: 0.0, ki: 0.0, kd: 0.0 }, 5);
        assert_eq!(zero.step(3.0, 0.1), 0.0);
        let mut p = PidController::new(PidGains { kp: 2.0, ki: 0.0, kd: 0.0 }, 5);
        assert_eq!(p.step(1.5, 0.1), 3.0);
        assert_eq!(p.step(-0.5, 0.1), -1.0);
    }

    #[test]
    fn integral_saturates_with_window() {
        let n = 20;
        let mut c = PidController::new(PidGains { kp: 1.0, ki: 0.5, kd: 0.3 }, n);
        let out: Vec<f64> = (0..2 * n).map(|_| c.step(0.8, 0.05)).collect();
        for k in 1..n {
            assert!(out[k] > out[k - 1]);
        }
        for k in n..2 * n {
            assert_eq!(out[k], out[n - 1]);
        }
        assert!(c.buffered() <= n);
    }

    #[test]
    fn zero_trajectory_brakes() {
        let mut id = InverseDynamics::new(ControllerConfig::default());
        let c = id.command(&traj([[0.0; 2]; 4]), 3.0, 0.5);
        assert_eq!(c.brake, 1.0);
        assert_eq!(c.throttle, 0.0);
    }

    #[test]
    fn stopped_ego_accelerates_straight() {
        let mut id = InverseDynamics::new(ControllerConfig::default());
        let c = id.command(&traj([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]), 0.0, 0.5);
        assert_eq!(c.brake, 0.0);
        assert!(c.throttle > 0.0);
        assert_eq!(c.steer, 0.0);
    }

    #[test]
    fn mirrored_waypoints_negate_steer() {
        let w = [[1.0, 0.3], [2.0, 0.9], [2.8, 1.9], [3.5, 3.1]];
        let m = w.map(|p| [p[0], -p[1]]);
        let mut a = InverseDynamics::new(ControllerConfig::default());
        let mut b = InverseDynamics::new(ControllerConfig::default());
        for speed in [0.0, 1.0, 2.5, 3.0] {
            let ca = a.command(&traj(w), speed, 0.5);
            let cb = b.command(&traj(m), speed, 0.5);
            assert_eq!(ca.steer, -cb.steer);
            assert_eq!((ca.throttle, ca.brake), (cb.throttle, cb.brake));
        }
    }

    #[test]
    fn default_config_is_valid() {
        ControllerConfig::default().validate().unwrap();
        let bad = ControllerConfig { window: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ControlError::Range { field: "window", .. })));
    }
}
