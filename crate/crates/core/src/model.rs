//! End-to-end models: encoder for each method, waypoint head, input
//! preparation and the closed-loop driving policy built on them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bev::{prepare_image, rasterize_bev, register_goal, BevError, GridSpec, ImageNorm, GROUND_THRESHOLD, HISTOGRAM_CAP};
use crate::control::{ControllerConfig, InverseDynamics, VehicleCommand};
use crate::eval::{Policy, PolicyError};
use crate::fusion::{
    geometric_fusion_encode, head_average, image_only_encode, late_fusion_encode, register_backbone,
    register_geometric, register_transfuser, transfuser_encode, BackboneSpec, FusionConfig, FusionError, GeoLinks,
    ScaleAttention, Stream,
};
use crate::head::{decode_waypoints, read_trajectory, reduce_mlp, register_head, Decoded, Trajectory};
use crate::nn::Graph;
use crate::sim::{render_camera, scan_lidar, RgbImage, SensorRig, WorldState};
use crate::tensor::{fnv1a, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("method {0} has no transformer fusion")]
    Unsupported(Method),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transfuser,
    LateFusion,
    GeometricFusion,
    /// Image-only encoder.
    Aim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Transfuser, Method::LateFusion, Method::GeometricFusion, Method::Aim];

    pub fn name(self) -> &'static str {
        match self {
            Method::Transfuser => "transfuser",
            Method::LateFusion => "late_fusion",
            Method::GeometricFusion => "geometric_fusion",
            Method::Aim => "aim",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| ModelError::Unknown {
            what: "method",
            value: s.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    pub fn rig(self) -> SensorRig {
        match self {
            Profile::Paper => SensorRig::paper(),
            Profile::Desk => SensorRig::desk(),
        }
    }

    pub fn grid(self) -> GridSpec {
        match self {
            Profile::Paper => GridSpec::paper(),
            Profile::Desk => GridSpec::desk(),
        }
    }

    pub fn backbone(self) -> BackboneSpec {
        match self {
            Profile::Paper => BackboneSpec::paper(),
            Profile::Desk => BackboneSpec::desk(),
        }
    }

    pub fn fusion(self) -> FusionConfig {
        match self {
            Profile::Paper => FusionConfig::paper(),
            Profile::Desk => FusionConfig::desk(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(ModelError::Unknown {
                what: "profile",
                value: s.to_string(),
            }),
        }
    }
}

/// Everything that fixes the network layout and its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub method: Method,
    pub profile: Profile,
    pub backbone: BackboneSpec,
    pub fusion: FusionConfig,
    pub grid: GridSpec,
    pub rig: SensorRig,
    pub image_norm: ImageNorm,
}

impl ModelSpec {
    pub fn new(method: Method, profile: Profile, fusion: FusionConfig) -> Self {
        Self {
            method,
            profile,
            backbone: profile.backbone(),
            fusion,
            grid: profile.grid(),
            rig: profile.rig(),
            image_norm: ImageNorm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.method == Method::Transfuser {
            self.fusion.validate(&self.backbone, self.rig.camera.crop)?;
        } else if !(1..=4).contains(&self.fusion.scales) {
            return Err(FusionError::Range {
                field: "scales",
                value: self.fusion.scales as i64,
                bound: "1..=4".into(),
            }
            .into());
        }
        Ok(())
    }

    /// Fresh seeded parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut s = ParamStore::new();
        match self.method {
            Method::Transfuser => register_transfuser(&mut s, seed, &self.fusion, &self.backbone)?,
            Method::LateFusion => {
                register_backbone(&mut s, seed, &self.backbone, Stream::Image)?;
                register_backbone(&mut s, seed, &self.backbone, Stream::Lidar)?;
            }
            Method::GeometricFusion => register_geometric(&mut s, seed, &self.backbone, self.fusion.fused_stages())?,
            Method::Aim => register_backbone(&mut s, seed, &self.backbone, Stream::Image)?,
        }
        register_head(&mut s, seed, self.backbone.final_channels())?;
        Ok(s)
    }

    pub fn uses_lidar(&self) -> bool {
        self.method != Method::Aim
    }
}

/// Network-ready observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput<T> {
    /// `3×S×S` normalized crop.
    pub image: Tensor<T>,
    /// `2×R×C` histogram, empty for the image-only method.
    pub bev: Tensor<T>,
    pub velocity: f64,
    /// Ego-frame goal location (m).
    pub goal: [f64; 2],
    pub links: Option<GeoLinks>,
}

impl<T: Real> SampleInput<T> {
    /// `frame_seed` drives the geometric-fusion point sampling.
    pub fn prepare(
        spec: &ModelSpec,
        image: &RgbImage,
        points: &[[f32; 3]],
        velocity: f64,
        goal: [f64; 2],
        frame_seed: u64,
    ) -> Result<Self> {
        let img = prepare_image(image, spec.rig.camera.crop, &spec.image_norm)?;
        let bev = if spec.uses_lidar() {
            rasterize_bev(points, &spec.grid, GROUND_THRESHOLD).to_tensor(HISTOGRAM_CAP)
        } else {
            Tensor::zeros(&[0])
        };
        let links = (spec.method == Method::GeometricFusion).then(|| {
            GeoLinks::build(
                points,
                &spec.rig.camera,
                &spec.grid,
                spec.backbone.stage_sizes(spec.rig.camera.crop),
                spec.fusion.fused_stages(),
                frame_seed,
            )
        });
        Ok(Self {
            image: img,
            bev,
            velocity,
            goal,
            links,
        })
    }
}

pub struct ModelOutput {
    pub decoded: Decoded,
    pub attention: Vec<ScaleAttention>,
}

/// Encoder, reduction MLP and decoder on `g`.
pub fn forward<T: Real>(g: &mut Graph<'_, T>, spec: &ModelSpec, input: &SampleInput<T>) -> Result<ModelOutput> {
    let image = g.constant(input.image.clone());
    let (feature, attention) = match spec.method {
        Method::Transfuser => {
            let bev = g.constant(input.bev.clone());
            let out = transfuser_encode(g, &spec.backbone, &spec.fusion, image, bev, input.velocity)?;
            (out.feature, out.attention)
        }
        Method::LateFusion => {
            let bev = g.constant(input.bev.clone());
            (late_fusion_encode(g, &spec.backbone, image, bev, input.velocity)?, Vec::new())
        }
        Method::GeometricFusion => {
            let bev = g.constant(input.bev.clone());
            let empty = GeoLinks::default();
            let links = input.links.as_ref().unwrap_or(&empty);
            (
                geometric_fusion_encode(g, &spec.backbone, image, bev, links, input.velocity)?,
                Vec::new(),
            )
        }
        Method::Aim => (image_only_encode(g, &spec.backbone, image, input.velocity)?, Vec::new()),
    };
    let f64d = reduce_mlp(g, feature)?;
    let decoded = decode_waypoints(g, f64d, input.goal)?;
    Ok(ModelOutput { decoded, attention })
}

/// Inference-only prediction.
pub fn predict<T: Real>(spec: &ModelSpec, params: &ParamStore<T>, input: &SampleInput<T>) -> Result<Trajectory> {
    let mut g = Graph::inference(params);
    let out = forward(&mut g, spec, input)?;
    Ok(read_trajectory(&g, &out.decoded).1)
}

/// Head-averaged attention of layer `layer` (negative counts from the end)
/// for every fused scale, as `N×N` matrices.
pub fn attention_maps<T: Real>(
    spec: &ModelSpec,
    params: &ParamStore<T>,
    input: &SampleInput<T>,
    layer: isize,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    if spec.method != Method::Transfuser {
        return Err(ModelError::Unsupported(spec.method));
    }
    let mut g = Graph::inference(params);
    let out = forward(&mut g, spec, input)?;
    let n_layers = spec.fusion.layers as isize;
    let l = if layer < 0 { n_layers + layer } else { layer };
    if !(0..n_layers).contains(&l) {
        return Err(FusionError::Range {
            field: "layer",
            value: layer as i64,
            bound: format!("-{n_layers}..{n_layers}"),
        }
        .into());
    }
    Ok(out
        .attention
        .iter()
        .map(|s| {
            let heads: Vec<&Tensor<T>> = s.layers[l as usize].iter().map(|&v| g.value(v)).collect();
            (s.stage, head_average(&heads))
        })
        .collect())
}

/// Learned driving policy: sense, predict waypoints, PID inverse dynamics.
pub struct ModelPolicy {
    spec: ModelSpec,
    params: Arc<ParamStore<f32>>,
    controller: InverseDynamics,
    period: f64,
    goal_lead: f64,
}

impl ModelPolicy {
    pub fn new(spec: ModelSpec, params: Arc<ParamStore<f32>>, controller: ControllerConfig, period: f64, goal_lead: f64) -> Self {
        Self {
            spec,
            params,
            controller: InverseDynamics::new(controller),
            period,
            goal_lead,
        }
    }

    /// Network input for the current world state.
    pub fn observe(&self, w: &WorldState) -> Result<SampleInput<f32>> {
        let image = render_camera(w, &self.spec.rig);
        let points = if self.spec.uses_lidar() {
            scan_lidar(w, &self.spec.rig)
        } else {
            Vec::new()
        };
        let ego = w.ego.pose;
        let s = w.route.path.project(ego.position()).s;
        let goal = register_goal(w.route.goal_for(s, self.goal_lead), &ego);
        let seed = fnv1a(&[w.rng_seed.to_le_bytes(), w.time.to_bits().to_le_bytes()].concat());
        SampleInput::prepare(&self.spec, &image, &points, w.ego.speed, goal, seed)
    }
}

impl Policy for ModelPolicy {
    fn period(&self) -> f64 {
        self.period
    }

    fn act(&mut self, w: &WorldState) -> std::result::Result<VehicleCommand, PolicyError> {
        let input = self.observe(w).map_err(|e| PolicyError(e.to_string()))?;
        let traj = predict(&self.spec, &self.params, &input).map_err(|e| PolicyError(e.to_string()))?;
        if !traj.is_finite() {
            return Err(PolicyError("non-finite waypoints".into()));
        }
        Ok(self.controller.command(&traj, w.ego.speed, self.period))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_scenario, ScenarioKind};

    fn input(spec: &ModelSpec) -> SampleInput<f64> {
        let w = build_scenario(ScenarioKind::LeadVehicle, 2);
        let img = render_camera(&w, &spec.rig);
        let pts = scan_lidar(&w, &spec.rig);
        SampleInput::prepare(spec, &img, &pts, 2.0, [10.0, 0.5], 9).unwrap()
    }

    #[test]
    fn every_method_predicts_finite_waypoints() {
        let mut counts = Vec::new();
        for m in Method::ALL {
            let spec = ModelSpec::new(m, Profile::Desk, FusionConfig::desk());
            let p = spec.init_params::<f64>(1).unwrap();
            let t = predict(&spec, &p, &input(&spec)).unwrap();
            assert!(t.is_finite());
            counts.push(p.count());
        }
        // Late fusion < transfuser, image-only smallest.
        assert!(counts[1] < counts[0]);
        assert!(counts[3] < counts[1]);
    }

    #[test]
    fn shared_transformer_has_fewer_parameters() {
        let base = ModelSpec::new(Method::Transfuser, Profile::Desk, FusionConfig::desk());
        let shared = ModelSpec::new(
            Method::Transfuser,
            Profile::Desk,
            FusionConfig {
                shared_transformer: true,
                ..FusionConfig::desk()
            },
        );
        let a = base.init_params::<f32>(0).unwrap().count();
        let b = shared.init_params::<f32>(0).unwrap().count();
        assert!(b < a, "{b} vs {a}");
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let spec = ModelSpec::new(Method::Transfuser, Profile::Desk, FusionConfig::desk());
        let p = spec.init_params::<f64>(3).unwrap();
        let maps = attention_maps(&spec, &p, &input(&spec), -1).unwrap();
        assert_eq!(maps.iter().map(|m| m.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for (_, m) in maps {
            assert_eq!(m.shape(), &[128, 128]);
            for r in 0..128 {
                let s: f32 = m.data()[r * 128..(r + 1) * 128].iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        let late = ModelSpec::new(Method::LateFusion, Profile::Desk, FusionConfig::desk());
        let lp = late.init_params::<f64>(3).unwrap();
        assert!(matches!(
            attention_maps(&late, &lp, &input(&late), -1),
            Err(ModelError::Unsupported(Method::LateFusion))
        ));
    }

    #[test]
    fn names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("cilrs".parse::<Method>().is_err());
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
    }
}
