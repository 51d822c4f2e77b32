//! Infractions, driving score and run aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    RouteDeviation,
    Timeout,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 6] = [
        InfractionKind::CollisionPedestrian,
        InfractionKind::CollisionVehicle,
        InfractionKind::CollisionStatic,
        InfractionKind::RedLight,
        InfractionKind::RouteDeviation,
        InfractionKind::Timeout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InfractionKind::CollisionPedestrian => "collision_pedestrian",
            InfractionKind::CollisionVehicle => "collision_vehicle",
            InfractionKind::CollisionStatic => "collision_static",
            InfractionKind::RedLight => "red_light",
            InfractionKind::RouteDeviation => "route_deviation",
            InfractionKind::Timeout => "timeout",
        }
    }

    pub fn is_collision(self) -> bool {
        matches!(
            self,
            InfractionKind::CollisionPedestrian | InfractionKind::CollisionVehicle | InfractionKind::CollisionStatic
        )
    }
}

impl fmt::Display for InfractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InfractionKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EvalError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub time: f64,
    pub position: [f64; 2],
}

/// Multiplicative penalty per infraction kind. Route deviation and timeout
/// also end the route; their factors make sure a shortened route never
/// scores as if it were clean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyTable {
    pub collision_pedestrian: f64,
    pub collision_vehicle: f64,
    pub collision_static: f64,
    pub red_light: f64,
    pub route_deviation: f64,
    pub timeout: f64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        Self {
            collision_pedestrian: 0.50,
            collision_vehicle: 0.60,
            collision_static: 0.65,
            red_light: 0.70,
            route_deviation: 0.80,
            timeout: 0.80,
        }
    }
}

impl PenaltyTable {
    pub fn penalty(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::CollisionPedestrian => self.collision_pedestrian,
            InfractionKind::CollisionVehicle => self.collision_vehicle,
            InfractionKind::CollisionStatic => self.collision_static,
            InfractionKind::RedLight => self.red_light,
            InfractionKind::RouteDeviation => self.route_deviation,
            InfractionKind::Timeout => self.timeout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in InfractionKind::ALL {
            let p = self.penalty(k);
            if !(p > 0.0 && p <= 1.0) {
                return Err(EvalError::Range {
                    field: format!("penalties.{k}"),
                    value: p,
                    bound: "(0, 1]",
                });
            }
        }
        Ok(())
    }
}

/// Route completion scaled by the product of the infraction penalties.
pub fn driving_score(rc: f64, events: &[InfractionEvent], table: &PenaltyTable) -> Result<f64> {
    if !(0.0..=100.0).contains(&rc) {
        return Err(EvalError::Range {
            field: "route_completion".into(),
            value: rc,
            bound: "[0, 100]",
        });
    }
    table.validate()?;
    // Count per kind first so the product does not depend on event order.
    let mut counts: BTreeMap<InfractionKind, i32> = BTreeMap::new();
    for e in events {
        *counts.entry(e.kind).or_default() += 1;
    }
    let factor: f64 = counts.iter().map(|(k, &n)| table.penalty(*k).powi(n)).product();
    Ok(rc * factor)
}

/// Same as [`driving_score`] with kinds given by name.
pub fn driving_score_named(rc: f64, kinds: &[&str], table: &PenaltyTable) -> Result<f64> {
    let events = kinds
        .iter()
        .map(|k| {
            Ok(InfractionEvent {
                kind: k.parse()?,
                time: 0.0,
                position: [0.0; 2],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    driving_score(rc, &events, table)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(EvalError::EmptyGroup("values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Outcome of one route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub route_id: String,
    pub route_completion: f64,
    pub driving_score: f64,
    pub infractions: Vec<InfractionEvent>,
    pub duration: f64,
    pub completed: bool,
    /// Set when the policy failed and the route was aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// One evaluation of one trained model over a route set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub routes: Vec<RouteResult>,
}

impl RunResult {
    /// Route-averaged (DS, RC).
    pub fn scores(&self) -> Result<(f64, f64)> {
        if self.routes.is_empty() {
            return Err(EvalError::EmptyGroup(self.method.clone()));
        }
        let n = self.routes.len() as f64;
        Ok((
            self.routes.iter().map(|r| r.driving_score).sum::<f64>() / n,
            self.routes.iter().map(|r| r.route_completion).sum::<f64>() / n,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub runs: usize,
    pub ds_mean: f64,
    pub ds_std: f64,
    pub rc_mean: f64,
    pub rc_std: f64,
    /// Totals over all runs.
    pub infractions: BTreeMap<InfractionKind, u64>,
    /// Totals divided by the number of runs.
    pub infractions_per_run: BTreeMap<InfractionKind, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: Vec<MethodMetrics>,
    /// Infraction types the toy world cannot produce.
    pub structurally_absent: Vec<String>,
}

/// Groups runs by method (first-appearance order) and aggregates.
pub fn aggregate_runs(runs: &[RunResult]) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(EvalError::EmptyGroup("runs".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    let methods = order
        .into_iter()
        .map(|m| {
            let group: Vec<&RunResult> = runs.iter().filter(|r| r.method == m).collect();
            let scores = group.iter().map(|r| r.scores()).collect::<Result<Vec<_>>>()?;
            let (ds_mean, ds_std) = mean_std(&scores.iter().map(|s| s.0).collect::<Vec<_>>())?;
            let (rc_mean, rc_std) = mean_std(&scores.iter().map(|s| s.1).collect::<Vec<_>>())?;
            let mut infractions: BTreeMap<InfractionKind, u64> = InfractionKind::ALL.iter().map(|&k| (k, 0)).collect();
            for e in group.iter().flat_map(|r| &r.routes).flat_map(|r| &r.infractions) {
                *infractions.entry(e.kind).or_default() += 1;
            }
            let infractions_per_run = infractions
                .iter()
                .map(|(&k, &n)| (k, n as f64 / group.len() as f64))
                .collect();
            Ok(MethodMetrics {
                method: m.to_string(),
                runs: group.len(),
                ds_mean,
                ds_std,
                rc_mean,
                rc_std,
                infractions,
                infractions_per_run,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        methods,
        structurally_absent: vec!["stop_sign".into(), "lane_infraction".into()],
    })
}

/// One row per run: `method,train_seed,eval_seed,ds,rc`.
pub fn runs_csv(runs: &[RunResult]) -> Result<String> {
    let mut out = String::from("method,train_seed,eval_seed,ds,rc\n");
    for r in runs {
        let (ds, rc) = r.scores()?;
        out.push_str(&format!("{},{},{},{ds:.2},{rc:.2}\n", r.method, r.train_seed, r.eval_seed));
    }
    Ok(out)
}

/// `method,ds_mean,ds_std,rc_mean,rc_std`, two decimals.
pub fn summary_csv(report: &MetricsReport) -> String {
    let mut out = String::from("method,ds_mean,ds_std,rc_mean,rc_std\n");
    for m in &report.methods {
        out.push_str(&format!(
            "{},{:.2},{:.2},{:.2},{:.2}\n",
            m.method, m.ds_mean, m.ds_std, m.rc_mean, m.rc_std
        ));
    }
    out
}

/// Per-method infraction totals, one column per kind.
pub fn infractions_csv(report: &MetricsReport) -> String {
    let mut out = String::from("method");
    for k in InfractionKind::ALL {
        out.push_str(&format!(",{k}"));
    }
    out.push('\n');
    for m in &report.methods {
        out.push_str(&m.method);
        for k in InfractionKind::ALL {
            out.push_str(&format!(",{}", m.infractions.get(&k).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out
}
