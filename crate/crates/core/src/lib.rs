//! Simulated clustered-strawberry picking with a 4-DoF SCARA arm.

pub mod dataset;
pub mod eval;
pub mod expert;
pub mod image;
pub mod policy;
pub mod runtime;
pub mod scara;
pub mod seeds;
pub mod sim;

pub type JointState64 = scara::JointState<f64>;
pub type JointState32 = scara::JointState<f32>;
pub type EndPose64 = scara::EndPose<f64>;
pub type EndPose32 = scara::EndPose<f32>;
pub type Action64 = scara::Action<f64>;
pub type Action32 = scara::Action<f32>;
pub type ScaraParams64 = scara::ScaraParams<f64>;
pub type ScaraParams32 = scara::ScaraParams<f32>;
pub type Policy32 = policy::Policy<f32>;
pub type Policy64 = policy::Policy<f64>;
