//! Camera + LiDAR transformer fusion for end-to-end waypoint driving.
//!
//! The crate contains everything needed to train and evaluate the model at
//! desk scale: a small reverse-mode tensor engine ([`tensor`]), a procedural
//! driving world with synthetic sensors and a privileged expert ([`sim`]),
//! BEV input preparation ([`bev`]), the fusion encoders and baselines
//! ([`fusion`]), the recurrent waypoint head ([`head`]), PID inverse
//! dynamics ([`control`]) and the closed-loop metrics ([`eval`]).

pub mod bev;
pub mod control;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod sim;
pub mod tensor;
pub mod train;
