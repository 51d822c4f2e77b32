//! Expert demonstrations recorded at a fixed frame rate.
//!
//! A dataset directory holds `manifest.json` and one tensor blob per frame
//! under `frames/`, with tensors `image` (3×H×W, 0–255), `points` (N×3, ego
//! frame), `velocity` (1), `goal` (2, ego frame) and `waypoints` (4×2, ego
//! frame).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::expert::{expert_policy, ExpertConfig};
use super::scenarios::{build_scenario, ScenarioKind};
use super::sensors::{render_camera, scan_lidar, RgbImage, SensorRig};
use super::world::{step_world, WorldState};
use super::Pose2;
use crate::bev::register_goal;
use crate::eval::InfractionMonitor;
use crate::head::{Trajectory, HORIZON};
use crate::tensor::{fnv1a, read_blob_file, write_blob_file, BlobError, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
/// Time between stored waypoints (s).
pub const WAYPOINT_DT: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("{field} = {value} is outside {bound}")]
    Range {
        field: &'static str,
        value: f64,
        bound: &'static str,
    },
    #[error("frame {file}: {reason}")]
    Frame { file: String, reason: String },
    #[error("unsupported manifest schema {0}")]
    Schema(u32),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub rig: SensorRig,
    pub scenarios: Vec<ScenarioKind>,
    pub routes: usize,
    /// Recorded time per route (s).
    pub duration: f64,
    pub frame_rate: f64,
    pub physics_dt: f64,
    /// Minimum distance ahead of the ego of the goal location (m).
    pub goal_lead: f64,
    pub expert: ExpertConfig,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            rig: SensorRig::desk(),
            scenarios: ScenarioKind::ALL.to_vec(),
            routes: 4,
            duration: 30.0,
            frame_rate: 2.0,
            physics_dt: 0.05,
            goal_lead: 5.0,
            expert: ExpertConfig::default(),
            seed,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            rig: SensorRig::paper(),
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field, value: f64, ok: bool, bound| {
            if ok {
                Ok(())
            } else {
                Err(DatasetError::Range { field, value, bound })
            }
        };
        check("dataset.routes", self.routes as f64, self.routes > 0, ">= 1")?;
        check(
            "dataset.scenarios",
            self.scenarios.len() as f64,
            !self.scenarios.is_empty(),
            "non-empty",
        )?;
        check("dataset.duration", self.duration, self.duration > 0.0, "> 0")?;
        check("dataset.frame_rate", self.frame_rate, self.frame_rate > 0.0, "> 0")?;
        check("dataset.physics_dt", self.physics_dt, self.physics_dt > 0.0, "> 0")?;
        let ratio = 1.0 / (self.frame_rate * self.physics_dt);
        check(
            "dataset.frame_rate",
            self.frame_rate,
            (ratio - ratio.round()).abs() < 1e-9,
            "a divisor of 1 / physics_dt",
        )?;
        let ratio = WAYPOINT_DT / self.physics_dt;
        check(
            "dataset.physics_dt",
            self.physics_dt,
            (ratio - ratio.round()).abs() < 1e-9,
            "a divisor of 0.5 s",
        )?;
        check("dataset.goal_lead", self.goal_lead, self.goal_lead >= 0.0, ">= 0")
    }

    pub fn frames_per_route(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }

    /// Scenario and scenario seed of route `i`.
    pub fn route_plan(&self, i: usize) -> (ScenarioKind, u64) {
        let kind = self.scenarios[i % self.scenarios.len()];
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend((i as u64).to_le_bytes());
        (kind, fnv1a(&key))
    }
}

/// One recorded observation with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub image: RgbImage,
    pub points: Vec<[f32; 3]>,
    pub velocity: f64,
    pub goal: [f64; 2],
    pub waypoints: Trajectory,
    pub infraction_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub file: String,
    pub route: usize,
    pub index: usize,
    pub time: f64,
    pub scenario: ScenarioKind,
    pub infraction_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteMeta {
    pub id: usize,
    pub scenario: ScenarioKind,
    pub scenario_seed: u64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub routes: Vec<RouteMeta>,
    pub frames: Vec<FrameMeta>,
}

impl Manifest {
    pub fn per_scenario(&self) -> BTreeMap<ScenarioKind, usize> {
        let mut out = BTreeMap::new();
        for f in &self.frames {
            *out.entry(f.scenario).or_default() += 1;
        }
        out
    }
}

/// Rolls the expert out on one route and records `frames_per_route` frames.
/// The simulation runs 2 s past the last frame so every frame has the actual
/// future ego poses as its waypoints.
pub fn record_route(cfg: &DatasetConfig, route: usize) -> Vec<FrameRecord> {
    let (kind, seed) = cfg.route_plan(route);
    let mut w = build_scenario(kind, seed);
    let per_frame = (1.0 / (cfg.frame_rate * cfg.physics_dt)).round() as usize;
    let per_wp = (WAYPOINT_DT / cfg.physics_dt).round() as usize;
    let frames = cfg.frames_per_route();
    let total_steps = (frames - 1) * per_frame + HORIZON * per_wp;

    let mut monitor = InfractionMonitor::new(&w, cfg.expert.deviation_threshold, 0.0);
    // Pose after each step, index 0 = initial state.
    let mut poses: Vec<Pose2> = vec![w.ego.pose];
    let mut first_event_step: Option<usize> = None;
    let mut snapshots: Vec<WorldState> = Vec::with_capacity(frames);
    for step in 0..=total_steps {
        if step % per_frame == 0 && snapshots.len() < frames {
            snapshots.push(w.clone());
        }
        if step == total_steps {
            break;
        }
        let cmd = expert_policy(&w, &cfg.expert).command;
        let next = step_world(&w, &cmd, cfg.physics_dt);
        monitor.observe(&w, &next);
        if first_event_step.is_none() && !monitor.events().is_empty() {
            first_event_step = Some(step + 1);
        }
        w = next;
        poses.push(w.ego.pose);
    }

    snapshots
        .iter()
        .enumerate()
        .map(|(k, snap)| {
            let base = k * per_frame;
            let ego = snap.ego.pose;
            let mut waypoints = [[0.0; 2]; HORIZON];
            for (t, wp) in waypoints.iter_mut().enumerate() {
                let p = poses[base + (t + 1) * per_wp];
                *wp = ego.to_local(p.position());
            }
            let s = snap.route.path.project(ego.position()).s;
            let goal = register_goal(snap.route.goal_for(s, cfg.goal_lead), &ego);
            FrameRecord {
                image: render_camera(snap, &cfg.rig),
                points: scan_lidar(snap, &cfg.rig),
                velocity: snap.ego.speed,
                goal,
                waypoints: Trajectory { waypoints },
                infraction_free: first_event_step.is_none_or(|e| e > base + HORIZON * per_wp),
            }
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn frame_tensors(f: &FrameRecord) -> Vec<(String, Tensor<f32>)> {
    let img = Tensor::new(
        &[3, f.image.height, f.image.width],
        f.image.data.iter().map(|&b| b as f32).collect(),
    )
    .expect("image buffer matches its shape");
    let pts = Tensor::new(&[f.points.len(), 3], f.points.iter().flatten().copied().collect())
        .expect("points are N×3");
    vec![
        ("image".into(), img),
        ("points".into(), pts),
        ("velocity".into(), Tensor::new(&[1], vec![f.velocity as f32]).expect("scalar")),
        (
            "goal".into(),
            Tensor::new(&[2], vec![f.goal[0] as f32, f.goal[1] as f32]).expect("pair"),
        ),
        ("waypoints".into(), f.waypoints.to_tensor()),
    ]
}

/// Generates the dataset into `out`. An existing non-empty directory is only
/// replaced when `force` is set.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::Exists(out.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(io_err(out))?;
        }
    }
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;

    let per_route = crate::parallel::map_indexed(cfg.routes, |i| -> Result<Vec<FrameMeta>> {
        let (kind, _) = cfg.route_plan(i);
        record_route(cfg, i)
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let file = format!("frames/r{i:04}_f{k:04}.tfw");
                write_blob_file(&out.join(&file), &frame_tensors(f))?;
                Ok(FrameMeta {
                    file,
                    route: i,
                    index: k,
                    time: k as f64 / cfg.frame_rate,
                    scenario: kind,
                    infraction_free: f.infraction_free,
                })
            })
            .collect()
    });
    let mut frames = Vec::new();
    let mut routes = Vec::new();
    for (i, r) in per_route.into_iter().enumerate() {
        let metas = r?;
        let (scenario, scenario_seed) = cfg.route_plan(i);
        routes.push(RouteMeta {
            id: i,
            scenario,
            scenario_seed,
            frames: metas.len(),
        });
        frames.extend(metas);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        routes,
        frames,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| DatasetError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.clone(),
        source,
    })?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::Schema(m.schema_version));
    }
    Ok(m)
}

pub fn read_frame(dir: &Path, meta: &FrameMeta) -> Result<FrameRecord> {
    let tensors: BTreeMap<String, Tensor<f32>> = read_blob_file(&dir.join(&meta.file))?.into_iter().collect();
    let bad = |reason: &str| DatasetError::Frame {
        file: meta.file.clone(),
        reason: reason.to_string(),
    };
    let get = |k: &str| tensors.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
    let img = get("image")?;
    let [c, h, w] = img.shape() else {
        return Err(bad("image is not 3×H×W"));
    };
    if *c != 3 {
        return Err(bad("image is not 3×H×W"));
    }
    let pts = get("points")?;
    if pts.rank() != 2 || pts.shape()[1] != 3 {
        return Err(bad("points are not N×3"));
    }
    let goal = get("goal")?;
    let vel = get("velocity")?;
    if goal.len() != 2 || vel.len() != 1 {
        return Err(bad("goal or velocity has the wrong size"));
    }
    let waypoints = Trajectory::from_tensor(get("waypoints")?).map_err(|e| bad(&e.to_string()))?;
    Ok(FrameRecord {
        image: RgbImage {
            width: *w,
            height: *h,
            data: img.data().iter().map(|&v| v as u8).collect(),
        },
        points: pts.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        velocity: vel.data()[0] as f64,
        goal: [goal.data()[0] as f64, goal.data()[1] as f64],
        waypoints,
        infraction_free: meta.infraction_free,
    })
}
