//! Closed-loop route execution with infraction detection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{driving_score, InfractionEvent, InfractionKind, PenaltyTable, RouteResult};
use super::{EvalError, Result};
use crate::control::VehicleCommand;
use crate::sim::geometry::segments_intersect;
use crate::sim::{expert_policy, step_world, AgentClass, ExpertConfig, SignalState, WorldState};

#[derive(Debug, thiserror::Error)]
#[error("policy failed: {0}")]
pub struct PolicyError(pub String);

/// A driving policy. The command is held for `period` seconds between
/// decisions.
pub trait Policy {
    fn period(&self) -> f64;

    fn act(&mut self, w: &WorldState) -> std::result::Result<VehicleCommand, PolicyError>;
}

/// The privileged expert, deciding every physics step.
#[derive(Clone, Debug)]
pub struct ExpertDriver {
    pub config: ExpertConfig,
    pub period: f64,
}

impl ExpertDriver {
    pub fn new(config: ExpertConfig, period: f64) -> Self {
        Self { config, period }
    }
}

impl Policy for ExpertDriver {
    fn period(&self) -> f64 {
        self.period
    }

    fn act(&mut self, w: &WorldState) -> std::result::Result<VehicleCommand, PolicyError> {
        Ok(expert_policy(w, &self.config).command)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub physics_dt: f64,
    pub time_limit: f64,
    /// Lateral distance from the route that ends it (m).
    pub deviation_threshold: f64,
    /// Distance to the route end counted as arrival (m).
    pub completion_radius: f64,
    pub penalties: PenaltyTable,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            physics_dt: 0.05,
            time_limit: 90.0,
            deviation_threshold: 4.0,
            completion_radius: 2.0,
            penalties: PenaltyTable::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(EvalError::Range {
                    field: field.into(),
                    value: v,
                    bound: "> 0",
                })
            }
        };
        pos("eval.physics_dt", self.physics_dt)?;
        pos("eval.time_limit", self.time_limit)?;
        pos("eval.deviation_threshold", self.deviation_threshold)?;
        pos("eval.completion_radius", self.completion_radius)?;
        self.penalties.validate()
    }
}

/// Why a rollout stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Arrived,
    Deviated,
}

/// Watches consecutive world states for infractions and tracks progress.
#[derive(Clone, Debug)]
pub struct InfractionMonitor {
    deviation_threshold: f64,
    completion_radius: f64,
    overlapping: BTreeSet<usize>,
    progress: f64,
    events: Vec<InfractionEvent>,
}

impl InfractionMonitor {
    pub fn new(start: &WorldState, deviation_threshold: f64, completion_radius: f64) -> Self {
        let s0 = start.route.path.project(start.ego.pose.position()).s;
        let mut m = Self {
            deviation_threshold,
            completion_radius,
            overlapping: BTreeSet::new(),
            progress: 0.0,
            events: Vec::new(),
        };
        m.progress = s0.max(0.0);
        m.check_collisions(start);
        m
    }

    pub fn events(&self) -> &[InfractionEvent] {
        &self.events
    }

    /// Route completion in percent; never decreases.
    pub fn route_completion(&self, w: &WorldState) -> f64 {
        (100.0 * self.progress / w.route.path.length()).clamp(0.0, 100.0)
    }

    fn push(&mut self, kind: InfractionKind, w: &WorldState) {
        self.events.push(InfractionEvent {
            kind,
            time: w.time,
            position: w.ego.pose.position(),
        });
    }

    fn check_collisions(&mut self, w: &WorldState) {
        let ego = w.ego.footprint();
        for (i, a) in w.agents.iter().enumerate() {
            if a.footprint().overlaps(&ego) {
                // One event per continuous overlap.
                if self.overlapping.insert(i) {
                    let kind = match a.class {
                        AgentClass::Pedestrian => InfractionKind::CollisionPedestrian,
                        AgentClass::Static => InfractionKind::CollisionStatic,
                        _ => InfractionKind::CollisionVehicle,
                    };
                    self.push(kind, w);
                }
            } else {
                self.overlapping.remove(&i);
            }
        }
    }

    /// Records infractions of the transition `prev → next`.
    pub fn observe(&mut self, prev: &WorldState, next: &WorldState) -> Option<Termination> {
        self.check_collisions(next);
        let (f0, f1) = (prev.ego.front(), next.ego.front());
        let crossed_red = prev.signals.iter().any(|s| {
            s.state == SignalState::Red
                && s.governs(prev.ego.pose.heading)
                && segments_intersect(f0, f1, s.stop_line[0], s.stop_line[1])
        });
        if crossed_red {
            self.push(InfractionKind::RedLight, next);
        }

        let path = &next.route.path;
        let proj = path.project(next.ego.pose.position());
        if proj.lateral.abs() > self.deviation_threshold {
            self.push(InfractionKind::RouteDeviation, next);
            return Some(Termination::Deviated);
        }
        self.progress = self.progress.max(proj.s);
        let to_end = crate::sim::geometry::distance(next.ego.pose.position(), path.end());
        if to_end <= self.completion_radius && proj.s >= path.length() - self.completion_radius {
            self.progress = path.length();
            return Some(Termination::Arrived);
        }
        None
    }
}

/// Rolls `policy` out from `world` until arrival, deviation, timeout or a
/// policy failure.
pub fn run_route(policy: &mut dyn Policy, world: WorldState, route_id: &str, cfg: &EvalConfig) -> Result<RouteResult> {
    cfg.validate()?;
    let period = policy.period();
    if !(period > 0.0) {
        return Err(EvalError::Range {
            field: "policy.period".into(),
            value: period,
            bound: "> 0",
        });
    }
    // Decide every `ticks` physics steps.
    let ticks = ((period / cfg.physics_dt).round() as usize).max(1);
    let max_steps = (cfg.time_limit / cfg.physics_dt).round() as usize;
    let mut monitor = InfractionMonitor::new(&world, cfg.deviation_threshold, cfg.completion_radius);
    let mut w = world;
    let mut cmd = VehicleCommand::full_brake();
    let mut completed = false;
    let mut aborted = None;
    for step in 0..max_steps {
        if step % ticks == 0 {
            match policy.act(&w) {
                Ok(c) => cmd = c.clamped(),
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }
        let next = step_world(&w, &cmd, cfg.physics_dt);
        let end = monitor.observe(&w, &next);
        w = next;
        match end {
            Some(Termination::Arrived) => {
                completed = true;
                break;
            }
            Some(Termination::Deviated) => break,
            None => {}
        }
    }
    let deviated = monitor.events().iter().any(|e| e.kind == InfractionKind::RouteDeviation);
    if !completed && !deviated {
        monitor.push(InfractionKind::Timeout, &w);
    }
    let rc = monitor.route_completion(&w);
    let ds = driving_score(rc, monitor.events(), &cfg.penalties)?;
    Ok(RouteResult {
        route_id: route_id.to_string(),
        route_completion: rc,
        driving_score: ds,
        infractions: monitor.events().to_vec(),
        duration: w.time,
        completed,
        aborted,
    })
}
