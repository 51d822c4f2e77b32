//! `train`: behavior cloning on a recorded dataset, with checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};

use transfuser_core::train::{
    load_checkpoint, load_samples, mean_waypoint_l1, save_checkpoint, split_routes, TrainSample, Trainer,
};

use crate::{load_dataset, write_file, CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Training run index; the seed is `seeds.base + run`.
    pub run: usize,
    /// Train on the first `n` training frames and track their L1 error.
    pub overfit: Option<usize>,
    pub resume: bool,
    /// Overrides the configured step count.
    pub steps: Option<u64>,
    /// Steps between overfit L1 evaluations.
    pub eval_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            run: 0,
            overfit: None,
            resume: false,
            steps: None,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub out: PathBuf,
    pub method: String,
    pub seed: u64,
    pub start_step: u64,
    pub steps: u64,
    pub samples: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// `(step, mean per-waypoint L1)` on the overfit frames.
    pub overfit_l1: Vec<(u64, f64)>,
    /// Mean per-waypoint L1 on the held-out routes.
    pub val_l1: Option<f64>,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} seed {}: steps {}..{} on {} samples",
            self.method, self.seed, self.start_step, self.steps, self.samples
        )?;
        if let (Some(a), Some(b)) = (self.first_loss, self.final_loss) {
            writeln!(f, "loss {a:.4} -> {b:.4}")?;
        }
        if let Some(&(step, l1)) = self.overfit_l1.last() {
            let best = self.overfit_l1.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            writeln!(f, "overfit L1 {l1:.4} m at step {step} (best {best:.4} m)")?;
        }
        if let Some(v) = self.val_l1 {
            writeln!(f, "validation L1 {v:.4} m")?;
        }
        write!(f, "checkpoint {}", self.out.display())
    }
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let spec = cfg.model_spec();
    let mut tc = cfg.train_config();
    if let Some(s) = opts.steps {
        tc.steps = s;
    }
    let seed = cfg.seeds.train(opts.run);
    let manifest = load_dataset(data, &spec.rig, spec.profile.name())?;
    let (train_routes, val_routes) = split_routes(&manifest, tc.val_fraction, seed);
    let mut samples = load_samples(&spec, data, &manifest, Some(&train_routes))?;
    if let Some(n) = opts.overfit {
        if n == 0 || n > samples.len() {
            return Err(CliError::Usage(format!(
                "--overfit {n} needs 1..={} training frames",
                samples.len()
            )));
        }
        samples.truncate(n);
    }

    let mut trainer = if opts.resume {
        if !out.join("checkpoint.json").exists() {
            return Err(CliError::Usage(format!("no checkpoint to resume in {}", out.display())));
        }
        let (m, t) = load_checkpoint(out)?;
        if m.spec != spec || m.seed != seed {
            return Err(CliError::Usage(format!(
                "checkpoint in {} was trained with a different model or seed",
                out.display()
            )));
        }
        Trainer { config: tc, ..t }
    } else {
        Trainer::new(spec.clone(), tc, seed)?
    };
    let start_step = trainer.step_count();
    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    let mut overfit_l1 = Vec::new();
    let track = |t: &Trainer, out: &mut Vec<(u64, f64)>, s: &[TrainSample]| -> Result<()> {
        out.push((t.step_count(), mean_waypoint_l1(&t.spec, &t.params, s)?));
        Ok(())
    };

    while trainer.step_count() < tc.steps {
        let loss = trainer.step(&samples)?;
        let step = trainer.step_count();
        if step % 100 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
        if opts.overfit.is_some() && opts.eval_every > 0 && step % opts.eval_every == 0 {
            track(&trainer, &mut overfit_l1, &samples)?;
        }
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 {
            save_checkpoint(out, &trainer, snapshot.clone())?;
        }
    }
    if opts.overfit.is_some() && overfit_l1.last().map(|p| p.0) != Some(trainer.step_count()) {
        track(&trainer, &mut overfit_l1, &samples)?;
    }
    save_checkpoint(out, &trainer, snapshot)?;

    let mut log = String::from("step,loss\n");
    for (i, l) in trainer.history.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&out.join("loss.csv"), log)?;

    let val_l1 = if opts.overfit.is_none() && !val_routes.is_empty() {
        let val = load_samples(&spec, data, &manifest, Some(&val_routes))?;
        Some(mean_waypoint_l1(&spec, &trainer.params, &val)?)
    } else {
        None
    };
    let h = &trainer.history;
    Ok(TrainReport {
        out: out.to_path_buf(),
        method: spec.method.name().to_string(),
        seed,
        start_step,
        steps: trainer.step_count(),
        samples: samples.len(),
        first_loss: h.get(start_step as usize).copied(),
        final_loss: h.last().copied(),
        overfit_l1,
        val_l1,
    })
}
