//! `ablate`: the fusion configuration grid, each row trained briefly and
//! driven on the evaluation routes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transfuser_core::fusion::{token_mixer, FusionConfig};
use transfuser_core::model::{Method, ModelSpec};
use transfuser_core::nn::Graph;
use transfuser_core::tensor::{ParamStore, Tensor};
use transfuser_core::train::{load_samples, split_routes, Trainer};

use crate::evaluate::eval_model;
use crate::{load_dataset, write_file, CliError, Result, RunConfig};

/// The eight configuration rows, relative to `base`.
/// Rows are `(parameter, value, config)`.
pub fn ablation_grid(base: &FusionConfig) -> Vec<(&'static str, &'static str, FusionConfig)> {
    let with = |f: &dyn Fn(&mut FusionConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("scale", "1", with(&|c| c.scales = 1)),
        ("scale", "2", with(&|c| c.scales = 2)),
        ("scale", "3", with(&|c| c.scales = 3)),
        ("shared_transformer", "-", with(&|c| c.shared_transformer = true)),
        ("attention_layers", "1", with(&|c| c.layers = 1)),
        ("attention_layers", "4", with(&|c| c.layers = 4)),
        ("no_pos_embed", "-", with(&|c| c.positional_embedding = false)),
        ("default", "-", base.clone()),
    ]
}

/// Largest difference between mixing permuted tokens and permuting the
/// mixed tokens at the last fused stage.
pub fn permutation_gap(spec: &ModelSpec, params: &ParamStore<f32>, seed: u64) -> Result<f64> {
    let params: ParamStore<f64> = params.cast();
    let cfg = &spec.fusion;
    let (n, c) = (cfg.tokens(), spec.backbone.stage_channels[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Tensor<f64> = Tensor::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0));
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..n).collect();
        p.rotate_left(n / 3);
        p.swap(0, n - 1);
        p
    };
    let permute = |t: &Tensor<f64>| Tensor::from_fn(&[n, c], |i| t.data()[perm[i / c] * c + i % c]);
    let mix = |t: Tensor<f64>| -> Result<Tensor<f64>> {
        let mut g = Graph::inference(&params);
        let v = g.constant(t);
        let (out, _) = token_mixer(&mut g, cfg, 4, v, 2.0)?;
        Ok(g.value(out).clone())
    };
    let a = permute(&mix(x.clone())?);
    let b = mix(permute(&x))?;
    Ok(a.max_abs_diff(&b).expect("same shape"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub parameter: String,
    pub value: String,
    pub fusion: FusionConfig,
    pub params: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub ds: Option<f64>,
    pub rc: Option<f64>,
    pub permutation_gap: Option<f64>,
    pub completed: bool,
}

impl AblationRow {
    /// Equivariance threshold matching the property test.
    pub fn equivariant(&self) -> Option<bool> {
        self.permutation_gap.map(|g| g < 1e-6)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub out: PathBuf,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// True when the budget ran out before every row finished.
    pub fn partial(&self) -> bool {
        self.rows.iter().any(|r| !r.completed)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("parameter,value,scales,layers,shared,pos_embed,params,steps,final_loss,ds,rc,equivariant,completed\n");
        let opt = |v: Option<f64>, dp: usize| v.map_or(String::new(), |v| format!("{v:.dp$}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.parameter,
                r.value,
                r.fusion.scales,
                r.fusion.layers,
                r.fusion.shared_transformer,
                r.fusion.positional_embedding,
                r.params,
                r.steps,
                opt(r.final_loss, 4),
                opt(r.ds, 2),
                opt(r.rc, 2),
                r.equivariant().map_or(String::new(), |e| e.to_string()),
                r.completed
            ));
        }
        out
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>8} {:>6} {:>8} {:>8} {:>6}", "configuration", "params", "steps", "DS", "RC", "equiv")?;
        for r in &self.rows {
            let num = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            writeln!(
                f,
                "{:<22} {:>8} {:>6} {:>8} {:>8} {:>6}{}",
                format!("{} {}", r.parameter, r.value),
                r.params,
                r.steps,
                num(r.ds),
                num(r.rc),
                r.equivariant().map_or("-".into(), |e| e.to_string()),
                if r.completed { "" } else { "  (skipped: budget)" }
            )?;
        }
        write!(f, "table in {}", self.out.join("ablation.csv").display())
    }
}

pub fn ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.method != Method::Transfuser {
        return Err(CliError::Usage(format!("ablation needs method transfuser, got {}", cfg.method)));
    }
    let base = cfg.model_spec();
    let manifest = load_dataset(data, &base.rig, base.profile.name())?;
    let mut tc = cfg.train_config();
    tc.steps = cfg.ablation.steps;
    let seed = cfg.seeds.train(0);
    let (train_routes, _) = split_routes(&manifest, tc.val_fraction, seed);
    // Inputs depend only on the profile, so every row shares them.
    let samples = load_samples(&base, data, &manifest, Some(&train_routes))?;
    let eval_cfg = RunConfig {
        seeds: crate::config::SeedConfig {
            eval_runs: 1,
            ..cfg.seeds.clone()
        },
        ..cfg.clone()
    };

    let start = Instant::now();
    let mut rows = Vec::new();
    for (parameter, value, fusion) in ablation_grid(&base.fusion) {
        let spec = ModelSpec::new(base.method, base.profile, fusion.clone());
        spec.validate()?;
        let mut row = AblationRow {
            parameter: parameter.to_string(),
            value: value.to_string(),
            params: spec.init_params::<f32>(seed)?.count(),
            fusion,
            steps: 0,
            final_loss: None,
            ds: None,
            rc: None,
            permutation_gap: None,
            completed: false,
        };
        if start.elapsed().as_secs_f64() > cfg.ablation.budget_secs {
            rows.push(row);
            continue;
        }
        let mut t = Trainer::new(spec.clone(), tc, seed)?;
        while t.step_count() < tc.steps {
            t.step(&samples)?;
        }
        row.steps = t.step_count();
        row.final_loss = t.history.last().copied();
        row.permutation_gap = Some(permutation_gap(&spec, &t.params, seed)?);
        let runs = eval_model(&eval_cfg, &spec, Arc::new(t.params), seed)?;
        let (ds, rc) = runs[0].scores()?;
        row.ds = Some(ds);
        row.rc = Some(rc);
        row.completed = true;
        eprintln!("{parameter} {value}: loss {:.4} DS {ds:.2} RC {rc:.2}", row.final_loss.unwrap_or(f64::NAN));
        rows.push(row);
    }
    let report = AblationReport {
        out: out.to_path_buf(),
        rows,
    };
    write_file(&out.join("ablation.csv"), report.csv())?;
    Ok(report)
}
