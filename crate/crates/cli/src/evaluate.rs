//! `eval`: closed-loop evaluation of checkpoints (or the expert) over the
//! configured route set and evaluation seeds.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use transfuser_core::eval::{
    aggregate_runs, infractions_csv, run_route, runs_csv, summary_csv, ExpertDriver, MetricsReport, Policy, RouteResult,
    RunResult,
};
use transfuser_core::model::{ModelPolicy, ModelSpec};
use transfuser_core::parallel::map_indexed;
use transfuser_core::sim::build_scenario;
use transfuser_core::tensor::ParamStore;
use transfuser_core::train::{load_checkpoint, load_checkpoint_manifest};

use crate::{write_file, write_json, CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum PolicySource {
    Checkpoints(Vec<PathBuf>),
    /// The privileged expert used for data collection.
    Expert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub out: PathBuf,
    pub runs: Vec<RunResult>,
    pub metrics: MetricsReport,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>5} {:>8} {:>7} {:>8} {:>7}", "method", "runs", "DS", "±", "RC", "±")?;
        for m in &self.metrics.methods {
            writeln!(
                f,
                "{:<18} {:>5} {:>8.2} {:>7.2} {:>8.2} {:>7.2}",
                m.method, m.runs, m.ds_mean, m.ds_std, m.rc_mean, m.rc_std
            )?;
        }
        write!(f, "results in {}", self.out.display())
    }
}

/// A trained model ready to drive.
struct Loaded {
    spec: ModelSpec,
    seed: u64,
    params: Arc<ParamStore<f32>>,
}

fn load(cfg: &RunConfig, dir: &Path) -> Result<Loaded> {
    if !dir.join("checkpoint.json").exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", dir.display())));
    }
    let m = load_checkpoint_manifest(dir)?;
    if m.spec.profile != cfg.profile {
        return Err(CliError::Usage(format!(
            "profile mismatch: checkpoint {} is {}, config is {}",
            dir.display(),
            m.spec.profile,
            cfg.profile
        )));
    }
    let (m, t) = load_checkpoint(dir)?;
    Ok(Loaded {
        spec: m.spec,
        seed: m.seed,
        params: Arc::new(t.params),
    })
}

/// Drives every route of evaluation run `run`; routes fan out in parallel.
pub fn run_routes<F>(cfg: &RunConfig, run: usize, make_policy: F) -> Result<Vec<RouteResult>>
where
    F: Fn() -> Box<dyn Policy + Send> + Sync + Send,
{
    let n = cfg.eval_routes.routes;
    map_indexed(n, |r| -> Result<RouteResult> {
        let (kind, seed) = cfg.eval_route(run, r)?;
        let mut policy = make_policy();
        Ok(run_route(policy.as_mut(), build_scenario(kind, seed), &format!("{kind}_{r}"), &cfg.eval)?)
    })
    .into_iter()
    .collect()
}

/// Evaluation runs of one trained model, one per evaluation seed.
pub fn eval_model(cfg: &RunConfig, spec: &ModelSpec, params: Arc<ParamStore<f32>>, train_seed: u64) -> Result<Vec<RunResult>> {
    (0..cfg.seeds.eval_runs)
        .map(|j| {
            let routes = run_routes(cfg, j, || {
                Box::new(ModelPolicy::new(
                    spec.clone(),
                    params.clone(),
                    cfg.controller.clone(),
                    cfg.policy.period,
                    cfg.policy.goal_lead,
                ))
            })?;
            Ok(RunResult {
                method: spec.method.name().to_string(),
                train_seed,
                eval_seed: cfg.seeds.eval(j),
                routes,
            })
        })
        .collect()
}

pub fn eval(cfg: &RunConfig, source: &PolicySource, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    match source {
        PolicySource::Expert => {
            for j in 0..cfg.seeds.eval_runs {
                let routes = run_routes(cfg, j, || Box::new(ExpertDriver::new(cfg.data.expert, cfg.eval.physics_dt)))?;
                runs.push(RunResult {
                    method: "expert".into(),
                    train_seed: 0,
                    eval_seed: cfg.seeds.eval(j),
                    routes,
                });
            }
        }
        PolicySource::Checkpoints(dirs) => {
            if dirs.is_empty() {
                return Err(CliError::Usage("eval needs --checkpoint or --expert".into()));
            }
            // Validate every path before spending time on rollouts.
            let loaded = dirs.iter().map(|d| load(cfg, d)).collect::<Result<Vec<_>>>()?;
            for l in loaded {
                runs.extend(eval_model(cfg, &l.spec, l.params, l.seed)?);
            }
        }
    }
    for r in &runs {
        let name = format!("{}_t{}_e{}.json", r.method, r.train_seed, r.eval_seed);
        write_json(&out.join("runs").join(name), r)?;
    }
    let metrics = aggregate_runs(&runs)?;
    write_file(&out.join("runs.csv"), runs_csv(&runs)?)?;
    write_file(&out.join("summary.csv"), summary_csv(&metrics))?;
    write_file(&out.join("infractions.csv"), infractions_csv(&metrics))?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(EvalReport {
        out: out.to_path_buf(),
        runs,
        metrics,
    })
}
