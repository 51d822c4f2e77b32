//! Closed-loop evaluation: route rollouts, infraction detection, driving
//! score and aggregation over runs.

pub mod metrics;
pub mod route;

pub use metrics::{
    aggregate_runs, driving_score, driving_score_named, infractions_csv, mean_std, runs_csv, summary_csv,
    InfractionEvent, InfractionKind, MethodMetrics, MetricsReport, PenaltyTable, RouteResult, RunResult,
};
pub use route::{run_route, EvalConfig, ExpertDriver, InfractionMonitor, Policy, PolicyError, Termination};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{field} = {value} is outside {bound}")]
    Range {
        field: String,
        value: f64,
        bound: &'static str,
    },
    #[error("unknown infraction kind `{0}`")]
    UnknownKind(String),
    #[error("no results for {0}")]
    EmptyGroup(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;
