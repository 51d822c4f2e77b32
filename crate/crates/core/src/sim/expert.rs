//! Privileged rule-based driver used to generate demonstrations.

use serde::{Deserialize, Serialize};

use super::geometry::{dot, sub, OrientedBox, Pose2};
use super::world::{AgentState, Behavior, SignalState, WorldState};
use crate::control::VehicleCommand;
use crate::head::{Trajectory, HORIZON};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    /// Planned deceleration used for stopping profiles (m/s²).
    pub comfort_decel: f64,
    pub max_lateral_accel: f64,
    /// Gap kept to a stop target (m).
    pub stop_margin: f64,
    /// Prediction horizon for other agents (s).
    pub horizon: f64,
    /// Route distance checked for conflicts (m).
    pub lookahead: f64,
    /// Lateral distance from the route that flags a deviation (m).
    pub deviation_threshold: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 4.0,
            comfort_decel: 2.5,
            max_lateral_accel: 2.0,
            stop_margin: 1.5,
            horizon: 4.0,
            lookahead: 20.0,
            deviation_threshold: 4.0,
        }
    }
}

/// Expert decision for one world state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertOutput {
    /// Planned ego-frame waypoints at 0.5 s spacing.
    pub trajectory: Trajectory,
    pub command: VehicleCommand,
    pub target_speed: f64,
    /// Route distance to the binding stop target, if any (m).
    pub stop_distance: Option<f64>,
    pub off_route: bool,
}

const PLAN_DT: f64 = 0.5;
const SAMPLE_STEP: f64 = 0.5;

/// Closest route distance ahead of the ego front at which the ego would have
/// to stop, from red signals, conflicting agents and the route end.
fn stop_distance(w: &WorldState, cfg: &ExpertConfig, s_ego: f64) -> f64 {
    let path = &w.route.path;
    let half_len = 0.5 * w.ego.length;
    let mut stop = path.length() - s_ego;

    for sig in &w.signals {
        if sig.state != SignalState::Red || !sig.governs(w.ego.pose.heading) {
            continue;
        }
        let s_line = path.project(sig.midpoint()).s;
        let d_front = s_line - s_ego - half_len;
        if d_front > -0.25 {
            stop = stop.min(s_line - s_ego - half_len - 1.0);
        }
    }

    let steps = (cfg.horizon / 0.25).round() as usize;
    let mut s = s_ego;
    while s <= s_ego + cfg.lookahead && s <= path.length() {
        let (c, h) = path.sample(s);
        let ego_box = OrientedBox {
            center: c,
            heading: h,
            length: w.ego.length,
            width: w.ego.width,
        };
        if w.agents.iter().any(|a| conflicts(a, &ego_box, steps)) {
            stop = stop.min(s - s_ego - half_len - cfg.stop_margin);
            break;
        }
        s += SAMPLE_STEP;
    }
    stop
}

/// Whether the agent's constant-velocity prediction, inflated for safety,
/// touches `ego_box` within the horizon. Stationary pedestrians waiting to
/// cross are predicted along their scripted path.
fn conflicts(a: &AgentState, ego_box: &OrientedBox, steps: usize) -> bool {
    let (margin_long, margin_lat) = match a.class {
        super::world::AgentClass::Pedestrian => (0.8, 0.8),
        _ => (1.0, 0.5),
    };
    let mut vel = a.velocity();
    if let Behavior::ScriptedCrossing {
        triggered: true,
        target,
        walk_speed,
        ..
    } = &a.behavior
    {
        let to = sub(*target, a.pose.position());
        let len = dot(to, to).sqrt();
        if len > 1e-6 {
            vel = [to[0] / len * walk_speed, to[1] / len * walk_speed];
        }
    }
    (0..=steps).any(|k| {
        let t = 0.25 * k as f64;
        let mut b = a.footprint().inflated(margin_long, margin_lat);
        b.center = [b.center[0] + vel[0] * t, b.center[1] + vel[1] * t];
        b.overlaps(ego_box)
    })
}

/// Speed limit from curvature over the next stretch of route.
fn curve_speed(w: &WorldState, cfg: &ExpertConfig, s_ego: f64) -> f64 {
    let k = w.route.path.max_curvature(s_ego, s_ego + 12.0);
    if k < 1e-6 {
        f64::INFINITY
    } else {
        (cfg.max_lateral_accel / k).sqrt()
    }
}

/// Plans along the route, then tracks the plan with pure pursuit and a
/// proportional speed loop.
pub fn expert_policy(w: &WorldState, cfg: &ExpertConfig) -> ExpertOutput {
    let path = &w.route.path;
    let proj = path.project(w.ego.pose.position());
    let s_ego = proj.s;
    let d_stop = stop_distance(w, cfg, s_ego);
    let v_curve = curve_speed(w, cfg, s_ego);
    let profile = |d: f64| {
        cfg.cruise_speed
            .min(v_curve)
            .min((2.0 * cfg.comfort_decel * d.max(0.0)).sqrt())
    };
    let target_speed = if d_stop <= 0.05 { 0.0 } else { profile(d_stop) };

    // Forward-simulate the speed plan to place the waypoints.
    let mut waypoints = [[0.0; 2]; HORIZON];
    let (mut s, mut v) = (0.0f64, w.ego.speed);
    let sub_steps = 10;
    let dt = PLAN_DT / sub_steps as f64;
    for wp in waypoints.iter_mut() {
        for _ in 0..sub_steps {
            let vt = profile(d_stop - s);
            let a = ((vt - v) / dt).clamp(-w.vehicle.brake_decel, w.vehicle.throttle_accel);
            let v1 = (v + a * dt).max(0.0);
            s = (s + 0.5 * (v + v1) * dt).min(d_stop.max(0.0));
            v = v1;
        }
        let (p, _) = path.sample(s_ego + s);
        *wp = w.ego.pose.to_local(p);
    }

    let command = track(w, cfg, s_ego, target_speed);
    ExpertOutput {
        trajectory: Trajectory { waypoints },
        command,
        target_speed,
        stop_distance: (d_stop < path.length() - s_ego).then_some(d_stop),
        off_route: proj.lateral.abs() > cfg.deviation_threshold,
    }
}

fn track(w: &WorldState, _cfg: &ExpertConfig, s_ego: f64, target_speed: f64) -> VehicleCommand {
    let p = &w.vehicle;
    let lookahead = (2.0 + 0.8 * w.ego.speed).max(3.0);
    let (aim, _) = w.route.path.sample(s_ego + lookahead);
    let local = w.ego.pose.to_local(aim);
    let alpha = local[1].atan2(local[0]);
    let ld = local[0].hypot(local[1]).max(1e-3);
    let delta = (2.0 * p.wheelbase * alpha.sin() / ld).atan();
    let steer = (delta / p.max_steer).clamp(-1.0, 1.0);

    let err = target_speed - w.ego.speed;
    if target_speed < 0.05 || err < -0.3 {
        let brake = if target_speed < 0.05 { 1.0 } else { (-err / 2.0).clamp(0.2, 1.0) };
        VehicleCommand {
            steer,
            throttle: 0.0,
            brake,
        }
    } else {
        VehicleCommand {
            steer,
            throttle: (0.8 * err).clamp(0.0, 1.0),
            brake: 0.0,
        }
    }
}

/// Ego pose a fixed distance along the route, facing along it.
pub fn pose_on_route(w: &WorldState, s: f64) -> Pose2 {
    let (p, h) = w.route.path.sample(s);
    Pose2::new(p[0], p[1], h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{run_route, EvalConfig, ExpertDriver};
    use crate::sim::{build_scenario, ScenarioKind};

    fn empty_straight(speed: f64) -> WorldState {
        let mut w = build_scenario(ScenarioKind::Straight, 0);
        w.agents.clear();
        w.ego.pose = Pose2::new(10.0, 0.0, 0.0);
        w.ego.speed = speed;
        w
    }

    #[test]
    fn cruise_waypoints_are_two_metres_apart() {
        let out = expert_policy(&empty_straight(4.0), &ExpertConfig::default());
        for (t, wp) in out.trajectory.waypoints.iter().enumerate() {
            assert!((wp[0] - 2.0 * (t + 1) as f64).abs() < 1e-9, "{wp:?}");
            assert!(wp[1].abs() < 1e-9);
        }
        assert!(out.stop_distance.is_none());
        assert!(!out.off_route);
    }

    #[test]
    fn red_signal_ahead_stops_before_the_line() {
        let mut w = build_scenario(ScenarioKind::Signal, 0);
        w.agents.clear();
        // Front bumper 3 m before the stop line at x = 46.
        w.ego.pose = Pose2::new(46.0 - 3.0 - 2.25, 0.0, 0.0);
        w.ego.speed = 4.0;
        let cfg = ExpertConfig::default();
        let out = expert_policy(&w, &cfg);
        for wp in out.trajectory.waypoints {
            let front = w.ego.pose.to_world(wp)[0] + 2.25;
            assert!(front <= 46.0 + 1e-9, "{wp:?}");
        }
        assert!(out.command.brake > 0.0 && out.command.throttle == 0.0);
        let mut w = w;
        for _ in 0..100 {
            let c = expert_policy(&w, &cfg).command;
            w = crate::sim::step_world(&w, &c, 0.05);
        }
        assert_eq!(w.ego.speed, 0.0);
        assert!(w.ego.front()[0] < 46.0);
    }

    #[test]
    fn crossing_pedestrian_triggers_braking() {
        let mut w = build_scenario(ScenarioKind::CrossingPedestrian, 0);
        let ped = w.agents.iter().position(|a| a.class == super::super::world::AgentClass::Pedestrian).unwrap();
        let x = w.agents[ped].pose.x;
        w.agents[ped].pose.y = -1.5;
        if let Behavior::ScriptedCrossing { triggered, .. } = &mut w.agents[ped].behavior {
            *triggered = true;
        }
        w.ego.pose = Pose2::new(x - 9.0, 0.0, 0.0);
        w.ego.speed = 4.0;
        let out = expert_policy(&w, &ExpertConfig::default());
        assert!(out.stop_distance.is_some());
        assert!(out.command.brake > 0.0, "{out:?}");
    }

    #[test]
    fn expert_clears_the_scenario_suite() {
        let cfg = EvalConfig::default();
        for kind in ScenarioKind::ALL {
            for seed in 0..3 {
                let mut p = ExpertDriver::new(ExpertConfig::default(), cfg.physics_dt);
                let r = run_route(&mut p, build_scenario(kind, seed), kind.name(), &cfg).unwrap();
                assert!(r.route_completion >= 99.0 && r.infractions.is_empty(), "{kind} {seed}: {r:?}");
            }
        }
    }
}
