//! Behavior cloning: mini-batch L1 regression of expert waypoints, and
//! checkpoints that reload bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::head::l1_loss;
use crate::model::{forward, predict, ModelError, ModelSpec, SampleInput};
use crate::nn::Graph;
use crate::parallel::map_indexed;
use crate::sim::dataset::{read_frame, DatasetError, Manifest};
use crate::tensor::{
    fnv1a, read_blob_file, write_blob_file, Adam, AdamConfig, BlobError, Gradients, ParamStore, Tensor, TensorError,
};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const SPLIT_SALT: u64 = 0x5eed_5b17;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{field} = {value} is outside {bound}")]
    Range {
        field: &'static str,
        value: f64,
        bound: &'static str,
    },
    #[error("no training samples")]
    Empty,
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite loss at step {0}")]
    Diverged(u64),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Fraction of routes held out for validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            checkpoint_every: 500,
            val_fraction: 0.1,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            optimizer: AdamConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field, value: f64, ok: bool, bound| {
            if ok {
                Ok(())
            } else {
                Err(TrainError::Range { field, value, bound })
            }
        };
        check("train.batch_size", self.batch_size as f64, self.batch_size >= 1, ">= 1")?;
        let lr = self.optimizer.learning_rate;
        check("train.optimizer.learning_rate", lr, lr > 0.0 && lr.is_finite(), "> 0")?;
        for (field, b) in [("train.optimizer.beta1", self.optimizer.beta1), ("train.optimizer.beta2", self.optimizer.beta2)] {
            check(field, b, (0.0..1.0).contains(&b), "[0, 1)")?;
        }
        let eps = self.optimizer.epsilon;
        check("train.optimizer.epsilon", eps, eps > 0.0, "> 0")?;
        check(
            "train.val_fraction",
            self.val_fraction,
            (0.0..1.0).contains(&self.val_fraction),
            "[0, 1)",
        )
    }
}

/// A prepared frame with its expert waypoints.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: SampleInput<f32>,
    /// `4×2` ego-frame waypoints.
    pub target: Tensor<f32>,
    pub route: usize,
}

/// Route ids split into (train, validation). Whole routes are held out so
/// no frames of a validation route leak into training.
pub fn split_routes(manifest: &Manifest, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = manifest.routes.iter().map(|r| r.id).collect();
    let n_val = ((ids.len() as f64 * val_fraction).floor() as usize).min(ids.len().saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    ids.shuffle(&mut rng);
    let mut val = ids.split_off(ids.len() - n_val);
    ids.sort_unstable();
    val.sort_unstable();
    (ids, val)
}

/// Loads and prepares the frames of `routes` (all routes when `None`), in
/// manifest order.
pub fn load_samples(
    spec: &ModelSpec,
    dir: &Path,
    manifest: &Manifest,
    routes: Option<&[usize]>,
) -> Result<Vec<TrainSample>> {
    let metas: Vec<_> = manifest
        .frames
        .iter()
        .filter(|f| routes.is_none_or(|r| r.contains(&f.route)))
        .collect();
    map_indexed(metas.len(), |i| -> Result<TrainSample> {
        let meta = metas[i];
        let f = read_frame(dir, meta)?;
        let seed = fnv1a(&[(meta.route as u64).to_le_bytes(), (meta.index as u64).to_le_bytes()].concat());
        let input = SampleInput::prepare(spec, &f.image, &f.points, f.velocity, f.goal, seed)?;
        Ok(TrainSample {
            input,
            target: f.waypoints.to_tensor(),
            route: meta.route,
        })
    })
    .into_iter()
    .collect()
}

/// Sample indices of step `step`: a seeded draw without replacement (with
/// replacement if the batch exceeds the pool).
pub fn batch_indices(seed: u64, step: u64, pool: usize, batch: usize) -> Vec<usize> {
    let key = [seed.to_le_bytes(), step.to_le_bytes()].concat();
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
    if batch <= pool {
        let mut idx: Vec<usize> = (0..pool).collect();
        idx.partial_shuffle(&mut rng, batch);
        idx.truncate(batch);
        idx
    } else {
        (0..batch).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Per-sample loss and gradients.
fn sample_grad(spec: &ModelSpec, params: &ParamStore<f32>, s: &TrainSample) -> Result<(f64, Gradients<f32>)> {
    let mut g = Graph::new(params);
    let out = forward(&mut g, spec, &s.input)?;
    let gt = g.constant(s.target.clone());
    let loss = l1_loss(&mut g, out.decoded.waypoints, gt)?;
    let value = g.value(loss).item() as f64;
    Ok((value, g.into_tape().backward(loss)?))
}

/// Optimization state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Mean batch loss of every step so far.
    pub history: Vec<f64>,
}

impl Trainer {
    pub fn new(spec: ModelSpec, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = spec.init_params(seed)?;
        let adam = Adam::new(config.optimizer, &params);
        Ok(Self {
            spec,
            config,
            seed,
            params,
            adam,
            history: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// One optimizer step; returns the mean batch loss. Samples are
    /// processed in parallel and their gradients summed in batch order, so
    /// the result does not depend on the thread count.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(TrainError::Empty);
        }
        let idx = batch_indices(self.seed, self.step_count(), samples.len(), self.config.batch_size);
        let (spec, params) = (&self.spec, &self.params);
        let results = map_indexed(idx.len(), |i| sample_grad(spec, params, &samples[idx[i]]));
        let scale = 1.0 / idx.len() as f32;
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.accumulate(&g, scale);
        }
        let loss = loss / idx.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged(self.step_count()));
        }
        self.adam.step(&mut self.params, &grads)?;
        self.history.push(loss);
        Ok(loss)
    }
}

/// Mean per-waypoint L1 distance `|dx| + |dy|` over `samples`.
pub fn mean_waypoint_l1(spec: &ModelSpec, params: &ParamStore<f32>, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let per = map_indexed(samples.len(), |i| -> Result<f64> {
        let s = &samples[i];
        let t = predict(spec, params, &s.input)?;
        let gt = s.target.data();
        Ok(t.waypoints
            .iter()
            .flatten()
            .zip(gt)
            .map(|(p, &g)| (p - g as f64).abs())
            .sum::<f64>()
            / t.waypoints.len() as f64)
    });
    let total: f64 = per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
    Ok(total / samples.len() as f64)
}

/// `checkpoint.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
    pub loss_history: Vec<f64>,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run_config: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `checkpoint.json`, `weights.tfw` and `optimizer.tfw` into `dir`.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, run_config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let weights: Vec<(String, Tensor<f32>)> = trainer.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    write_blob_file(&dir.join("weights.tfw"), &weights)?;
    let (m, v) = trainer.adam.moments();
    let moments: Vec<(String, Tensor<f32>)> = m
        .iter()
        .map(|(n, t)| (format!("m.{n}"), t.clone()))
        .chain(v.iter().map(|(n, t)| (format!("v.{n}"), t.clone())))
        .collect();
    write_blob_file(&dir.join("optimizer.tfw"), &moments)?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA,
        spec: trainer.spec.clone(),
        train: trainer.config,
        seed: trainer.seed,
        step: trainer.step_count(),
        param_count: trainer.params.count(),
        loss_history: trainer.history.clone(),
        run_config,
    };
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| TrainError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(io(&path))
}

pub fn load_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|source| TrainError::Json {
        path: path.clone(),
        source,
    })?;
    if m.schema_version != CHECKPOINT_SCHEMA {
        return Err(TrainError::Mismatch(format!("schema version {}", m.schema_version)));
    }
    Ok(m)
}

/// Restores the full training state.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Trainer)> {
    let m = load_checkpoint_manifest(dir)?;
    let mut params = ParamStore::new();
    for (name, t) in read_blob_file::<f32>(&dir.join("weights.tfw"))? {
        params.insert(&name, t)?;
    }
    // Cross-check the layout against a freshly registered model.
    let fresh: ParamStore<f32> = m.spec.init_params(m.seed)?;
    if fresh.names().ne(params.names()) {
        return Err(TrainError::Mismatch("weights do not match the model layout".into()));
    }
    for (n, t) in fresh.iter() {
        if params.get(n)?.shape() != t.shape() {
            return Err(TrainError::Mismatch(format!("shape of `{n}`")));
        }
    }
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (name, t) in read_blob_file::<f32>(&dir.join("optimizer.tfw"))? {
        if let Some(n) = name.strip_prefix("m.") {
            first.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("v.") {
            second.insert(n.to_string(), t);
        } else {
            return Err(TrainError::Mismatch(format!("optimizer entry `{name}`")));
        }
    }
    let adam = Adam::from_parts(m.train.optimizer, m.step, first, second);
    let trainer = Trainer {
        spec: m.spec.clone(),
        config: m.train,
        seed: m.seed,
        params,
        adam,
        history: m.loss_history.clone(),
    };
    Ok((m, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::model::{Method, Profile};
    use crate::sim::dataset::{generate_dataset, DatasetConfig};

    fn tiny_fusion() -> FusionConfig {
        FusionConfig {
            layers: 1,
            scales: 1,
            ..FusionConfig::desk()
        }
    }

    fn dataset() -> (tempfile::TempDir, Manifest) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            routes: 2,
            duration: 4.0,
            ..DatasetConfig::desk(5)
        };
        let m = generate_dataset(&cfg, dir.path(), true).unwrap();
        (dir, m)
    }

    #[test]
    fn batches_are_seeded_and_distinct() {
        assert_eq!(batch_indices(1, 7, 16, 8), batch_indices(1, 7, 16, 8));
        assert_ne!(batch_indices(1, 7, 16, 8), batch_indices(1, 8, 16, 8));
        let b = batch_indices(3, 0, 16, 8);
        let mut u = b.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 8);
        assert_eq!(batch_indices(3, 0, 2, 5).len(), 5);
    }

    #[test]
    fn route_split_holds_out_whole_routes() {
        let (_d, mut m) = dataset();
        m.routes = (0..20)
            .map(|id| crate::sim::dataset::RouteMeta {
                id,
                ..m.routes[0].clone()
            })
            .collect();
        let (train, val) = split_routes(&m, 0.1, 4);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 18);
        assert!(val.iter().all(|v| !train.contains(v)));
        let (train, val) = split_routes(&m, 0.0, 4);
        assert!(val.is_empty() && train.len() == 20);
    }

    #[test]
    fn loss_decreases_and_resume_matches() {
        let (dir, m) = dataset();
        let spec = ModelSpec::new(Method::Transfuser, Profile::Desk, tiny_fusion());
        let samples = load_samples(&spec, dir.path(), &m, None).unwrap();
        assert_eq!(samples.len(), 16);
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::desk()
        };
        let mut full = Trainer::new(spec.clone(), cfg, 9).unwrap();
        let first = mean_waypoint_l1(&spec, &full.params, &samples).unwrap();
        for _ in 0..6 {
            full.step(&samples).unwrap();
        }

        let mut half = Trainer::new(spec.clone(), cfg, 9).unwrap();
        for _ in 0..3 {
            half.step(&samples).unwrap();
        }
        let ck = tempfile::tempdir().unwrap();
        save_checkpoint(ck.path(), &half, serde_json::json!({"note": "test"})).unwrap();
        let (man, mut resumed) = load_checkpoint(ck.path()).unwrap();
        assert_eq!(man.step, 3);
        assert_eq!(resumed.params, half.params);
        for _ in 0..3 {
            resumed.step(&samples).unwrap();
        }
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.params, full.params);

        for _ in 0..40 {
            full.step(&samples).unwrap();
        }
        let last = mean_waypoint_l1(&spec, &full.params, &samples).unwrap();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn checkpoint_reload_is_bitwise() {
        let (dir, m) = dataset();
        for method in Method::ALL {
            let spec = ModelSpec::new(method, Profile::Desk, tiny_fusion());
            let samples = load_samples(&spec, dir.path(), &m, Some(&[1])).unwrap();
            let mut t = Trainer::new(spec.clone(), TrainConfig::desk(), 2).unwrap();
            t.step(&samples).unwrap();
            let ck = tempfile::tempdir().unwrap();
            save_checkpoint(ck.path(), &t, serde_json::Value::Null).unwrap();
            let (_, r) = load_checkpoint(ck.path()).unwrap();
            let a = predict(&spec, &t.params, &samples[3].input).unwrap();
            let b = predict(&spec, &r.params, &samples[3].input).unwrap();
            assert_eq!(a, b, "{method}");
        }
    }
}
