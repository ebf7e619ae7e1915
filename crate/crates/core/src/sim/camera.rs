//! Pinhole wrist cameras rigidly mounted on the end effector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::{Rigid, Rot3, V3};
use crate::scara::{forward_kinematics, JointState, ScaraParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLabel {
    WristUp,
    WristDown,
}

impl CameraLabel {
    pub const ALL: [CameraLabel; 2] = [CameraLabel::WristUp, CameraLabel::WristDown];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraLabel::WristUp => "wrist_up",
            CameraLabel::WristDown => "wrist_down",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            CameraLabel::WristUp => "up",
            CameraLabel::WristDown => "down",
        }
    }
}

impl fmt::Display for CameraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CameraLabel {
    type Err = String;

    /// Accepts `up`/`down` as well as the full labels.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "up" | "wrist_up" => Ok(CameraLabel::WristUp),
            "down" | "wrist_down" => Ok(CameraLabel::WristDown),
            other => Err(format!("unknown camera {other:?} (expected up or down)")),
        }
    }
}

/// Parses a comma-separated camera list such as `up,down`. Duplicates are
/// removed and the result is sorted.
pub fn parse_camera_list(s: &str) -> Result<Vec<CameraLabel>, String> {
    let mut cams = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>, _>>()?;
    cams.sort();
    cams.dedup();
    if cams.is_empty() {
        return Err("camera list is empty".into());
    }
    Ok(cams)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera pose in the end-effector frame (x forward, y left, z up).
    /// Camera axes: x right, y down, z along the optical axis.
    pub mount: Rigid,
    pub label: CameraLabel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64, depth: f64 },
    Behind,
}

impl Projection {
    pub fn pixel(self) -> Option<(f64, f64)> {
        match self {
            Projection::Pixel { u, v, .. } => Some((u, v)),
            Projection::Behind => None,
        }
    }
}

/// Rotation whose optical axis points along `forward`, with image "up"
/// as close as possible to `up`.
pub fn look_rotation(forward: V3, up: V3) -> Rot3 {
    let z = forward.normalized();
    let x = z.cross(up).normalized();
    let y = z.cross(x);
    Rot3 { cols: [x, y, z] }
}

impl CameraModel {
    /// Default wrist camera at the given resolution; focal length scales
    /// with the image (120 px at 96x96).
    pub fn wrist(label: CameraLabel, width: usize, height: usize) -> Self {
        let (pos, target) = match label {
            CameraLabel::WristUp => (V3::new(-0.06, 0.0, 0.06), V3::new(0.06, 0.0, -0.02)),
            CameraLabel::WristDown => (V3::new(-0.06, 0.0, -0.06), V3::new(0.06, 0.0, 0.02)),
        };
        let rotation = look_rotation(target - pos, V3::new(0.0, 0.0, 1.0));
        CameraModel {
            width,
            height,
            fx: 120.0 * width as f64 / 96.0,
            fy: 120.0 * height as f64 / 96.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            mount: Rigid { rotation, translation: pos },
            label,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err("principal point outside the image".into());
        }
        Ok(())
    }

    /// Projects a point given in camera coordinates.
    pub fn project_camera_point(&self, p: V3) -> Projection {
        if p.z <= 0.0 {
            return Projection::Behind;
        }
        Projection::Pixel { u: self.cx + self.fx * p.x / p.z, v: self.cy + self.fy * p.y / p.z, depth: p.z }
    }

    /// World pose of the camera for a given arm configuration.
    pub fn world_pose(&self, q: &JointState<f64>, params: &ScaraParams<f64>) -> Rigid {
        let ee = ee_frame(q, params);
        Rigid {
            rotation: Rot3 { cols: self.mount.rotation.cols.map(|c| ee.rotation.apply(c)) },
            translation: ee.to_parent(self.mount.translation),
        }
    }
}

/// End-effector frame in world coordinates: origin at the tool center
/// point, x along the wrist yaw.
pub fn ee_frame(q: &JointState<f64>, params: &ScaraParams<f64>) -> Rigid {
    let pose = forward_kinematics(q, params);
    Rigid { rotation: Rot3::about_z(pose.yaw), translation: V3::new(pose.x, pose.y, pose.z) }
}

/// Pinhole projection of a world point through a camera on the arm.
pub fn project_point(cam: &CameraModel, q: &JointState<f64>, params: &ScaraParams<f64>, world: V3) -> Projection {
    cam.project_camera_point(cam.world_pose(q, params).to_child(world))
}
