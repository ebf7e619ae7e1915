//! Kinematics of the 4-DoF SCARA arm: two planar revolute joints, a vertical
//! prismatic joint and a wrist yaw.

use berrypick_nn::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("pose unreachable: {0}")]
    Unreachable(String),
    #[error("joint limit violated: {0}")]
    LimitViolation(String),
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Interval<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: T) -> T {
        v.max(self.lo).min(self.hi)
    }

    pub fn width(&self) -> T {
        self.hi - self.lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaraParams<T> {
    /// Upper-arm length (m).
    pub l1: T,
    /// Forearm length (m).
    pub l2: T,
    pub d3_range: Interval<T>,
    pub theta1_range: Interval<T>,
    pub theta2_range: Interval<T>,
    pub theta4_range: Interval<T>,
    pub gripper_range: Interval<T>,
}

impl<T: Real> Default for ScaraParams<T> {
    /// 0.30 m + 0.25 m links covering a 0.55 m tabletop workspace.
    fn default() -> Self {
        let pi = T::PI();
        ScaraParams {
            l1: T::lit(0.30),
            l2: T::lit(0.25),
            d3_range: Interval::new(T::zero(), T::lit(0.40)),
            theta1_range: Interval::new(T::lit(-2.2), T::lit(2.2)),
            theta2_range: Interval::new(T::lit(-2.6), T::lit(2.6)),
            theta4_range: Interval::new(-pi, pi),
            gripper_range: Interval::new(T::zero(), T::one()),
        }
    }
}

impl<T: Real> ScaraParams<T> {
    /// Checks the structural invariants (positive links, ordered ranges).
    pub fn validate(&self) -> Result<(), String> {
        if !(self.l1 > T::zero() && self.l2 > T::zero()) {
            return Err("link lengths must be positive".into());
        }
        for (name, r) in [
            ("d3", self.d3_range),
            ("theta1", self.theta1_range),
            ("theta2", self.theta2_range),
            ("theta4", self.theta4_range),
            ("gripper", self.gripper_range),
        ] {
            if !(r.lo < r.hi) {
                return Err(format!("{name} range must satisfy lo < hi"));
            }
        }
        let pi = T::PI();
        if self.theta4_range.lo < -pi || self.theta4_range.hi > pi {
            return Err("theta4 range must lie within [-pi, pi]".into());
        }
        Ok(())
    }

    pub fn max_reach(&self) -> T {
        self.l1 + self.l2
    }

    pub fn min_reach(&self) -> T {
        (self.l1 - self.l2).abs()
    }

    pub fn cast<U: Real>(&self) -> ScaraParams<U> {
        let c = |v: T| U::lit(v.to_f64().unwrap_or(f64::NAN));
        let ci = |r: Interval<T>| Interval::new(c(r.lo), c(r.hi));
        ScaraParams {
            l1: c(self.l1),
            l2: c(self.l2),
            d3_range: ci(self.d3_range),
            theta1_range: ci(self.theta1_range),
            theta2_range: ci(self.theta2_range),
            theta4_range: ci(self.theta4_range),
            gripper_range: ci(self.gripper_range),
        }
    }
}

/// Arm joint vector `q`: two revolute angles, prismatic stroke, wrist yaw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointState<T> {
    pub theta1: T,
    pub theta2: T,
    pub d3: T,
    pub theta4: T,
}

impl<T: Real> JointState<T> {
    pub fn new(theta1: T, theta2: T, d3: T, theta4: T) -> Self {
        JointState { theta1, theta2, d3, theta4 }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        JointState { theta1: a[0], theta2: a[1], d3: a[2], theta4: a[3] }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.theta1, self.theta2, self.d3, self.theta4]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn elbow(&self) -> Elbow {
        if self.theta2 >= T::zero() {
            Elbow::Up
        } else {
            Elbow::Down
        }
    }

    pub fn within(&self, p: &ScaraParams<T>) -> bool {
        p.theta1_range.contains(self.theta1)
            && p.theta2_range.contains(self.theta2)
            && p.d3_range.contains(self.d3)
            && p.theta4_range.contains(self.theta4)
    }
}

/// Five-channel command: joint targets plus normalized gripper aperture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action<T> {
    pub joints: JointState<T>,
    /// 1 = fully open, 0 = closed.
    pub grip: T,
}

impl<T: Real> Action<T> {
    pub fn new(joints: JointState<T>, grip: T) -> Self {
        Action { joints, grip }
    }

    pub fn from_array(a: [T; 5]) -> Self {
        Action { joints: JointState::new(a[0], a[1], a[2], a[3]), grip: a[4] }
    }

    pub fn to_array(self) -> [T; 5] {
        let j = self.joints;
        [j.theta1, j.theta2, j.d3, j.theta4, self.grip]
    }

    /// Joint targets clamped to limits, gripper clamped to `[0, 1]`.
    pub fn clamped(&self, p: &ScaraParams<T>) -> Self {
        Action { joints: clamp_to_limits(&self.joints, p), grip: p.gripper_range.clamp(self.grip) }
    }
}

/// 6-D end-effector pose. For this arm roll and pitch are always zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EndPose<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub roll: T,
    pub pitch: T,
    pub yaw: T,
}

impl<T: Real> EndPose<T> {
    /// Planar pose with zero roll/pitch; yaw is wrapped.
    pub fn planar(x: T, y: T, z: T, yaw: T) -> Self {
        EndPose { x, y, z, roll: T::zero(), pitch: T::zero(), yaw: wrap_angle(yaw) }
    }

    pub fn from_array(a: [T; 6]) -> Self {
        EndPose { x: a[0], y: a[1], z: a[2], roll: a[3], pitch: a[4], yaw: a[5] }
    }

    pub fn to_array(self) -> [T; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn position(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    /// Largest component-wise difference; the yaw difference is wrapped.
    pub fn max_abs_diff(&self, other: &EndPose<T>) -> T {
        let a = self.to_array();
        let b = other.to_array();
        let mut m = T::zero();
        for i in 0..5 {
            m = m.max((a[i] - b[i]).abs());
        }
        m.max(wrap_angle(a[5] - b[5]).abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elbow {
    /// `theta2 >= 0`
    Up,
    /// `theta2 < 0`
    Down,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = a - two_pi * (a / two_pi).floor();
    if r > T::PI() {
        r -= two_pi;
    }
    // `floor` rounding can leave r marginally below -pi.
    if r <= -T::PI() {
        r += two_pi;
    }
    r
}

pub fn forward_kinematics<T: Real>(q: &JointState<T>, p: &ScaraParams<T>) -> EndPose<T> {
    let a12 = q.theta1 + q.theta2;
    EndPose {
        x: p.l1 * q.theta1.cos() + p.l2 * a12.cos(),
        y: p.l1 * q.theta1.sin() + p.l2 * a12.sin(),
        z: q.d3,
        roll: T::zero(),
        pitch: T::zero(),
        yaw: wrap_angle(a12 + q.theta4),
    }
}

/// Analytic inverse kinematics. Roll and pitch of `pose` are ignored.
pub fn inverse_kinematics<T: Real>(
    pose: &EndPose<T>,
    p: &ScaraParams<T>,
    elbow: Elbow,
) -> Result<JointState<T>, KinematicsError> {
    let r2 = pose.x * pose.x + pose.y * pose.y;
    let r = r2.sqrt();
    let tol = T::lit(1e-12);
    if r > p.max_reach() + tol || r < p.min_reach() - tol {
        return Err(KinematicsError::Unreachable(format!(
            "radius {r} outside [{}, {}]",
            p.min_reach(),
            p.max_reach()
        )));
    }
    if !p.d3_range.contains(pose.z) {
        return Err(KinematicsError::Unreachable(format!("z {} outside stroke", pose.z)));
    }
    let two = T::lit(2.0);
    let c2 = ((r2 - p.l1 * p.l1 - p.l2 * p.l2) / (two * p.l1 * p.l2)).max(-T::one()).min(T::one());
    let mut s2 = ((T::one() - c2) * (T::one() + c2)).max(T::zero()).sqrt();
    if elbow == Elbow::Down {
        s2 = -s2;
    }
    let theta2 = s2.atan2(c2);
    let theta1 = wrap_angle(pose.y.atan2(pose.x) - (p.l2 * s2).atan2(p.l1 + p.l2 * c2));
    let theta4 = wrap_angle(pose.yaw - theta1 - theta2);
    let q = JointState { theta1, theta2, d3: pose.z, theta4 };
    for (name, v, range) in [
        ("theta1", q.theta1, p.theta1_range),
        ("theta2", q.theta2, p.theta2_range),
        ("theta4", q.theta4, p.theta4_range),
    ] {
        if !range.contains(v) {
            return Err(KinematicsError::LimitViolation(format!(
                "{name} = {v} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
    }
    Ok(q)
}

pub fn clamp_to_limits<T: Real>(q: &JointState<T>, p: &ScaraParams<T>) -> JointState<T> {
    JointState {
        theta1: p.theta1_range.clamp(q.theta1),
        theta2: p.theta2_range.clamp(q.theta2),
        d3: p.d3_range.clamp(q.d3),
        theta4: p.theta4_range.clamp(q.theta4),
    }
}

/// Forward kinematics over a joint trajectory.
pub fn end_pose_sequence<T: Real>(q_seq: &[[T; 4]], p: &ScaraParams<T>) -> Vec<EndPose<T>> {
    q_seq.iter().map(|q| forward_kinematics(&JointState::from_array(*q), p)).collect()
}
