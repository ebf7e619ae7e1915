//! Deterministic tabletop strawberry-cluster simulator.

pub mod camera;
pub mod env;
pub mod geometry;
pub mod render;
pub mod scene;

pub use camera::{parse_camera_list, project_point, CameraLabel, CameraModel, Projection};
pub use env::{classify_detachments, Contact, ContactObject, EnvConfig, Observation, Outcome, SimEnv, StepInfo};
pub use geometry::V3;
pub use render::{render_camera, RenderOptions};
pub use scene::{make_scene, Berry, Leaf, Scene, SceneConfig, StateTable};

use crate::scara::KinematicsError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid cluster state {0} (expected 0-5)")]
    InvalidState(usize),
    #[error("environment stepped after reaching a terminal state")]
    TerminalEnv,
    #[error("episode has not terminated")]
    NotTerminal,
    #[error("action contains non-finite values")]
    NonFiniteAction,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}
