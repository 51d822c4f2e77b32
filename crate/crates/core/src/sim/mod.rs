//! Procedural driving world: kinematics, scripted agents, signals,
//! ray-cast sensors and a privileged expert.

pub mod dataset;
pub mod expert;
pub mod geometry;
pub mod scenarios;
pub mod sensors;
pub mod world;

pub use geometry::{OrientedBox, Polyline, Pose2};
pub use sensors::{palette, render_camera, scan_lidar, CameraRig, LidarRig, RgbImage, SensorRig};
pub use world::{
    step_world, AgentClass, AgentState, Behavior, Route, Signal, SignalState, VehicleParams, WorldState,
};
pub use expert::{expert_policy, pose_on_route, ExpertConfig, ExpertOutput};
pub use scenarios::{build_scenario, ScenarioKind, UnknownScenario, GOAL_SPACING};
pub use dataset::{
    generate_dataset, load_manifest, read_frame, record_route, DatasetConfig, DatasetError, FrameMeta, FrameRecord,
    Manifest, RouteMeta,
};
