//! The five toy scenarios, with seeded variation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Pose2};
use super::world::{AgentState, Behavior, Route, Signal, SignalState, VehicleParams, WorldState};

/// Spacing of the sparse goal locations along a route (m).
pub const GOAL_SPACING: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LeadVehicle,
    Signal,
    CrossingPedestrian,
    OncomingTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::LeadVehicle,
        ScenarioKind::Signal,
        ScenarioKind::CrossingPedestrian,
        ScenarioKind::OncomingTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeadVehicle => "lead_vehicle",
            ScenarioKind::Signal => "signal",
            ScenarioKind::CrossingPedestrian => "crossing_pedestrian",
            ScenarioKind::OncomingTurn => "oncoming_turn",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown scenario `{0}` (expected one of straight, lead_vehicle, signal, crossing_pedestrian, oncoming_turn)")]
pub struct UnknownScenario(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

fn straight_route(length: f64) -> Polyline {
    Polyline::new(vec![[0.0, 0.0], [length, 0.0]]).expect("two distinct points")
}

/// Straight to `(turn_x, 0)`, a left quarter circle of radius `r`, then
/// north to `y_end`.
fn left_turn_route(turn_x: f64, r: f64, y_end: f64) -> Polyline {
    let mut pts = vec![[0.0, 0.0]];
    for i in 0..=18 {
        let th = std::f64::consts::FRAC_PI_2 * i as f64 / 18.0;
        pts.push([turn_x + r * th.sin(), r * (1.0 - th.cos())]);
    }
    pts.push([turn_x + r, y_end]);
    Polyline::new(pts).expect("route has distinct points")
}

/// Non-conflicting roadside objects.
fn props(rng: &mut ChaCha8Rng, along_x: bool) -> Vec<AgentState> {
    (0..2)
        .map(|i| {
            let s = rng.gen_range(15.0..35.0) + 40.0 * i as f64;
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let off = side * rng.gen_range(6.5..9.0);
            let pose = if along_x {
                Pose2::new(s, off, 0.0)
            } else {
                Pose2::new(off, s, 0.0)
            };
            AgentState::static_obstacle(pose, rng.gen_range(1.0..3.0), rng.gen_range(1.0..2.0))
        })
        .collect()
}

/// Builds the initial world for a scenario. The same `(kind, seed)` always
/// yields the same world.
pub fn build_scenario(kind: ScenarioKind, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let y0 = rng.gen_range(-0.3..0.3);
    let h0 = rng.gen_range(-0.05..0.05);
    let ego = AgentState::ego(Pose2::new(0.0, y0, h0), 0.0);
    let mut agents = Vec::new();
    let mut signals = Vec::new();
    let path = match kind {
        ScenarioKind::Straight => {
            agents.extend(props(&mut rng, true));
            straight_route(120.0)
        }
        ScenarioKind::LeadVehicle => {
            let gap = rng.gen_range(16.0..22.0);
            let speed = rng.gen_range(2.0..3.0);
            agents.push(AgentState::vehicle(Pose2::new(gap, 0.0, 0.0), speed, Behavior::ConstantVelocity));
            agents.extend(props(&mut rng, true));
            straight_route(120.0)
        }
        ScenarioKind::Signal => {
            let red = rng.gen_range(13.0..16.0);
            let stop_x = 46.0;
            signals.push(Signal {
                stop_line: [[stop_x, -3.5], [stop_x, 3.5]],
                approach_heading: 0.0,
                state: SignalState::Red,
                timer: red,
                red_duration: 20.0,
                green_duration: 300.0,
                head: Some([56.0, -4.5, 3.5]),
            });
            // Cross traffic runs on the opposite phase.
            signals.push(Signal {
                stop_line: [[48.0, -5.5], [55.5, -5.5]],
                approach_heading: std::f64::consts::FRAC_PI_2,
                state: SignalState::Green,
                timer: red,
                red_duration: 300.0,
                green_duration: 20.0,
                head: None,
            });
            let start_y = -rng.gen_range(30.0..45.0);
            agents.push(AgentState::vehicle(
                Pose2::new(51.75, start_y, std::f64::consts::FRAC_PI_2),
                5.0,
                Behavior::SignalObeying {
                    signal: 1,
                    stop_point: [51.75, -5.5],
                    cruise: 5.0,
                },
            ));
            straight_route(120.0)
        }
        ScenarioKind::CrossingPedestrian => {
            let x = rng.gen_range(40.0..50.0);
            agents.push(AgentState::pedestrian(
                [x, -6.0],
                std::f64::consts::FRAC_PI_2,
                Behavior::ScriptedCrossing {
                    trigger_distance: rng.gen_range(16.0..20.0),
                    target: [x, 6.0],
                    walk_speed: rng.gen_range(1.2..1.6),
                    triggered: false,
                },
            ));
            agents.extend(props(&mut rng, true));
            straight_route(120.0)
        }
        ScenarioKind::OncomingTurn => {
            let x0 = rng.gen_range(100.0..120.0);
            let v = rng.gen_range(4.5..5.5);
            agents.push(AgentState::vehicle(
                Pose2::new(x0, 3.5, std::f64::consts::PI),
                v,
                Behavior::ConstantVelocity,
            ));
            left_turn_route(45.0, 7.0, 70.0)
        }
    };
    WorldState {
        time: 0.0,
        ego,
        agents,
        signals,
        route: Route::new(path, GOAL_SPACING),
        vehicle: VehicleParams::default(),
        rng_seed: seed,
    }
}
