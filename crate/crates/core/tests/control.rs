//! The inverse-dynamics controller closing the loop on the bicycle model.

use transfuser_core::control::{ControllerConfig, InverseDynamics};
use transfuser_core::head::Trajectory;
use transfuser_core::sim::geometry::Pose2;
use transfuser_core::sim::world::step_world;
use transfuser_core::sim::{build_scenario, ScenarioKind};

/// Tracks the line `y = 0` at `target` m/s from a lateral offset; returns the
/// final lateral offset and speed and the speed history.
fn track(offset: f64, target: f64, seconds: f64) -> (f64, f64, Vec<f64>) {
    let mut w = build_scenario(ScenarioKind::Straight, 0);
    w.agents.clear();
    w.signals.clear();
    w.ego.pose = Pose2::new(5.0, offset, 0.0);
    w.ego.speed = 0.0;
    let dt = 0.05;
    let mut ctl = InverseDynamics::new(ControllerConfig::default());
    let mut speeds = Vec::new();
    for _ in 0..(seconds / dt) as usize {
        let ego = w.ego.pose;
        let mut wp = [[0.0; 2]; 4];
        for (k, p) in wp.iter_mut().enumerate() {
            let ahead = ego.x + target * 0.5 * (k + 1) as f64;
            *p = ego.to_local([ahead, 0.0]);
        }
        let cmd = ctl.command(&Trajectory { waypoints: wp }, w.ego.speed, dt);
        w = step_world(&w, &cmd, dt);
        speeds.push(w.ego.speed);
    }
    (w.ego.pose.y, w.ego.speed, speeds)
}

#[test]
fn settles_on_the_line_at_the_target_speed() {
    for (offset, target) in [(1.0, 4.0), (-1.5, 3.0), (0.0, 5.0)] {
        let (y, v, speeds) = track(offset, target, 20.0);
        assert!(y.abs() < 0.2, "lateral offset {y} from {offset}");
        assert!((v - target).abs() < 0.1 * target, "speed {v} vs {target}");
        // No sustained overshoot once settled.
        let tail = &speeds[speeds.len() - 100..];
        assert!(tail.iter().all(|s| *s < 1.15 * target));
    }
}
